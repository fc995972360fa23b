import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from granular_ddp import pca, sim
from granular_ddp.exceptions import ConfigurationError, ShapeError


def random_data(seed, m_o=40, n_n=6):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(2 * m_o, n_n)) @ rng.normal(size=(n_n, n_n))


def test_data_matrix_shape_and_order():
    q = np.arange(2 * 3 * 5 * 2, dtype=float).reshape(2, 3, 5, 2)
    X = pca.assemble_data_matrix([q[0], q[1]])
    assert X.shape == (12, 5)
    # x-row then y-row of the first observation
    np.testing.assert_array_equal(X[0], q[0, 0, :, 0])
    np.testing.assert_array_equal(X[1], q[0, 0, :, 1])
    np.testing.assert_array_equal(X[6], q[1, 0, :, 0])


def test_data_matrix_single_frame_is_transpose():
    frame = sim.init_block(sim.BoxSpec(), sim.GrainParams(), 0.1, 0.04, seed=0)
    X = pca.assemble_data_matrix([[frame]])
    np.testing.assert_array_equal(X, frame.normal_positions.T)


def test_data_matrix_inconsistent_counts():
    with pytest.raises(ShapeError):
        pca.assemble_data_matrix([np.zeros((2, 5, 2)), np.zeros((2, 6, 2))])


def test_constant_data_has_zero_spectrum():
    X = np.tile(np.arange(4.0), (6, 1))
    basis = pca.fit(X, 2)
    assert np.all(basis.eigenvalues == 0)
    np.testing.assert_allclose(basis.loading.T @ basis.loading, np.eye(2), atol=1e-12)
    np.testing.assert_array_equal(pca.project(X, basis), np.zeros((6, 2)))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        curve, degenerate = pca.energy_curve(basis)
    assert degenerate and np.all(curve == 1.0) and caught


def test_rank_one_structure_recovered():
    mu = np.array([0.3, -0.2, 0.5])
    a = np.array([1.0, -1.0, 2.0, -2.0])
    b = np.array([1.0, 2.0, -2.0])
    X = mu + np.outer(a, b)
    basis = pca.fit(X, 3)
    # hand decomposition: centered data is a' b^T with a' = a - mean(a)
    ac = a - a.mean()
    lam_expected = (ac @ ac) * (b @ b) / (X.shape[0] // 2)
    assert basis.eigenvalues[0] == pytest.approx(lam_expected, rel=1e-12)
    np.testing.assert_allclose(basis.eigenvalues[1:], 0.0, atol=1e-12)
    w = basis.loading[:, 0]
    expected = b / np.linalg.norm(b)
    # largest-magnitude entry made positive: entries 2 and 3 tie in magnitude, first wins
    np.testing.assert_allclose(w, expected, atol=1e-12)


def test_full_rank_basis_is_orthogonal():
    basis = pca.fit(random_data(0), 6)
    W = basis.loading
    np.testing.assert_allclose(W.T @ W, np.eye(6), atol=1e-10)
    np.testing.assert_allclose(W @ W.T, np.eye(6), atol=1e-10)


def test_n_nr_out_of_range():
    with pytest.raises(ConfigurationError):
        pca.fit(random_data(0), 7)
    with pytest.raises(ConfigurationError):
        pca.fit(random_data(0), 0)


def test_project_mean_rows_is_zero():
    basis = pca.fit(random_data(1), 3)
    Z = pca.project(np.tile(basis.mean, (4, 1)), basis)
    np.testing.assert_allclose(Z, 0.0, atol=1e-13)


def test_reconstruct_zero_is_mean():
    basis = pca.fit(random_data(1), 3)
    np.testing.assert_array_equal(pca.reconstruct(np.zeros((5, 3)), basis), np.tile(basis.mean, (5, 1)))


def test_single_row_projection_matches_fit_scores():
    X = random_data(2)
    basis = pca.fit(X, 4)
    Z = (X - X.mean(axis=0)) @ basis.loading
    np.testing.assert_allclose(pca.project(X[7:8], basis), Z[7:8], atol=1e-12)


def test_shape_errors():
    basis = pca.fit(random_data(1), 3)
    with pytest.raises(ShapeError):
        pca.project(np.zeros((2, 5)), basis)
    with pytest.raises(ShapeError):
        pca.reconstruct(np.zeros((2, 4)), basis)
    with pytest.raises(ShapeError):
        pca.fit(np.zeros((3, 4)), 1)


def test_truncation_error_matches_tail_spectrum():
    X = random_data(3)
    m_o = X.shape[0] // 2
    for n_nr in range(1, 7):
        basis = pca.fit(X, n_nr)
        err = np.sum((X - pca.reconstruct(pca.project(X, basis), basis)) ** 2)
        tail = m_o * basis.eigenvalues[n_nr:].sum()
        assert err == pytest.approx(tail, rel=1e-6, abs=1e-9)


def test_reconstruction_error_monotone_in_n_nr():
    X = random_data(4)
    errs = [np.sum((X - pca.reconstruct(pca.project(X, b), b)) ** 2) for b in (pca.fit(X, k) for k in range(1, 7))]
    assert all(b <= a + 1e-9 for a, b in zip(errs, errs[1:]))


@pytest.mark.parametrize("lam,expected", [([3, 1, 0, 0], [0.75, 1.0, 1.0, 1.0]), ([1, 1, 1, 1, 1], [0.2, 0.4, 0.6, 0.8, 1.0])])
def test_energy_curve_examples(lam, expected):
    curve, degenerate = pca.energy_curve(np.array(lam, dtype=float))
    assert not degenerate
    np.testing.assert_allclose(curve, expected, rtol=0, atol=1e-15)


def test_fit_deterministic_and_sign_convention():
    X = random_data(5)
    a, b = pca.fit(X, 4), pca.fit(X, 4)
    np.testing.assert_array_equal(a.loading, b.loading)
    idx = np.argmax(np.abs(a.loading), axis=0)
    assert np.all(a.loading[idx, np.arange(4)] > 0)


def test_basis_save_load_roundtrip(tmp_path):
    basis = pca.fit(random_data(6), 3)
    basis.save(tmp_path)
    assert (tmp_path / "basis_w.csv").read_text().splitlines()[0] == "mode_1,mode_2,mode_3"
    back = pca.PcaBasis.load(tmp_path)
    np.testing.assert_array_equal(back.loading, basis.loading)
    np.testing.assert_array_equal(back.mean, basis.mean)
    np.testing.assert_array_equal(back.eigenvalues, basis.eigenvalues)


def test_frame_helpers_roundtrip():
    q = np.random.default_rng(0).normal(size=(4, 6, 2))
    np.testing.assert_array_equal(pca.rows_to_frames(pca.frames_to_rows(q)), q)


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(1, 8).map(lambda k: 2 * k), st.integers(1, 6)),
           elements=st.floats(-10, 10, allow_nan=False)),
    st.integers(0, 10),
)
def test_full_basis_round_trip_property(X, extra):
    basis = pca.fit(X, X.shape[1])
    np.testing.assert_allclose(basis.loading.T @ basis.loading, np.eye(X.shape[1]), atol=1e-10)
    rows = np.random.default_rng(extra).normal(size=(3, X.shape[1]))
    back = pca.reconstruct(pca.project(rows, basis), basis)
    assert np.abs(back - rows).max() <= 1e-8
    assert np.all(np.diff(basis.eigenvalues) <= 0) and np.all(basis.eigenvalues >= 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 1000), st.integers(1, 5))
def test_projector_idempotent_property(seed, n_nr):
    X = random_data(seed)
    basis = pca.fit(X, n_nr)
    z1 = pca.project(X, basis)
    z2 = pca.project(pca.reconstruct(z1, basis), basis)
    np.testing.assert_allclose(z2, z1, atol=1e-10)


def test_estimator_api():
    X = random_data(7)
    est = pca.ParticlePCA(n_components=3).fit(X)
    assert est.get_params() == {"n_components": 3}
    Z = est.transform(X)
    np.testing.assert_allclose(Z, pca.project(X, pca.fit(X, 3)))
    np.testing.assert_allclose(est.inverse_transform(Z), pca.reconstruct(Z, est.basis_))
    np.testing.assert_allclose(est.fit_transform(X), Z)
    clone = pca.ParticlePCA.from_basis(est.basis_)
    np.testing.assert_array_equal(clone.transform(X), Z)
