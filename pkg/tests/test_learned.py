import json
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_history, small_model
from granular_ddp import learned
from granular_ddp.exceptions import InsufficientDataError, NumericError, ShapeError, TrainingError
from granular_ddp.mlp import init_mlp, mlp_backward, mlp_forward
from oracles.fd import central_jacobian, max_rel_error

GOLDEN = os.path.join(os.path.dirname(__file__), "golden", "graph_net.json")


def zero_model(n_nodes=3, history=2, bias=(0.0, 0.0)):
    model = small_model(n_nodes=n_nodes, history=history)
    for layers in model.params.values():
        for W, b in layers:
            W[...] = 0.0
            b[...] = 0.0
    model.params["decoder"][-1][1][...] = bias
    model.out_mean = np.zeros(2)
    model.out_std = np.ones(2)
    return model


# --- mlp ---------------------------------------------------------------------------

def test_mlp_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    layers = init_mlp(rng, [3, 5, 4, 2])
    x = rng.normal(size=(6, 3))
    gy = rng.normal(size=(6, 2))

    def f(x_):
        return float(np.sum(mlp_forward(layers, x_)[0] * gy))

    _, cache = mlp_forward(layers, x)
    grads = []
    gx = mlp_backward(layers, cache, gy, grads)
    num = central_jacobian(f, x)
    assert max_rel_error(gx, num) < 1e-6
    W0 = layers[0][0]

    def fw(w):
        old = W0.copy()
        W0[...] = w
        try:
            return f(x)
        finally:
            W0[...] = old

    assert max_rel_error(grads[0][0], central_jacobian(fw, W0.copy())) < 1e-6


def test_mlp_backward_broadcasts_extra_cotangent_axes():
    rng = np.random.default_rng(1)
    layers = init_mlp(rng, [3, 4, 2])
    x = rng.normal(size=(5, 3))
    _, cache = mlp_forward(layers, x)
    gy = rng.normal(size=(7, 5, 2))
    stacked = mlp_backward(layers, cache, gy)
    for k in range(7):
        np.testing.assert_allclose(stacked[k], mlp_backward(layers, cache, gy[k]), atol=1e-14)


# --- features ----------------------------------------------------------------------

def test_feature_shapes_and_edge_count():
    cfg = learned.GraphConfig(n_nodes=8, history=5)
    senders, receivers = learned.edge_index(8)
    assert senders.size == 56 and np.all(senders != receivers)
    hist, box, acc = random_history(np.random.default_rng(0), 8, 5)
    nodes, edges = learned.build_features(hist, box, acc, history=5)
    assert nodes.shape == (8, cfg.node_dim) and edges.shape == (56, 3)
    assert np.all(edges[:, 2] >= 0)


def test_constant_history_has_zero_velocity_features():
    q = np.repeat(np.random.default_rng(0).normal(size=(1, 4, 2)), 4, axis=0)
    nodes, _ = learned.build_features(q, np.full((4, 2), 0.5), np.zeros(2))
    np.testing.assert_array_equal(nodes[:, 2:8], 0.0)


def test_linear_motion_velocity_features():
    v = np.array([[0.01, -0.02], [0.03, 0.0], [-0.01, 0.04]])
    q = np.array([np.ones((3, 2)) + t * v for t in range(4)])
    nodes, _ = learned.build_features(q, np.zeros((4, 2)), np.zeros(2))
    for c in range(3):
        np.testing.assert_allclose(nodes[:, 2 + 2 * c:4 + 2 * c], v, atol=1e-15)


def test_wrong_history_length():
    hist, box, acc = random_history(np.random.default_rng(0), 3, 3)
    with pytest.raises(ShapeError):
        learned.build_features(hist, box, acc, history=5)


# --- forward -----------------------------------------------------------------------

def test_constant_network_outputs_decoder_bias():
    model = zero_model(bias=(0.3, -0.7))
    hist, box, acc = random_history(np.random.default_rng(1), 3, 2)
    out = learned.predict_accel(model, hist, box, acc)
    np.testing.assert_array_equal(out, np.tile([0.3, -0.7], (3, 1)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    model = small_model(n_nodes=5, history=2, seed=seed % 7)
    hist, box, acc = random_history(rng, 5, 2)
    perm = rng.permutation(5)
    out = learned.predict_accel(model, hist, box, acc)
    out_p = learned.predict_accel(model, hist[:, perm], box, acc)
    np.testing.assert_allclose(out_p, out[perm], rtol=0, atol=1e-12)


def test_golden_outputs():
    from golden.make_golden import compute

    with open(GOLDEN) as fh:
        stored = json.load(fh)
    now = compute()
    for key in ("accel", "step", "dynamics_F"):
        np.testing.assert_allclose(np.array(now[key]), np.array(stored[key]), rtol=0, atol=1e-12)


def test_nonfinite_activation_names_block():
    model = small_model(n_nodes=3, history=2)
    model.params["edge_block_0"][0][0][0, 0] = np.nan
    hist, box, acc = random_history(np.random.default_rng(0), 3, 2)
    with pytest.raises(NumericError, match="block 0"):
        learned.predict_accel(model, hist, box, acc)


def test_normalization_round_trip():
    model = small_model(n_nodes=3, history=2)
    x = np.random.default_rng(0).normal(size=(3, model.config.node_dim))
    np.testing.assert_allclose(model.denormalize_nodes(model.normalize_nodes(x)), x, rtol=0, atol=1e-12)


# --- predict_step ------------------------------------------------------------------

def test_zero_output_constant_history_stays():
    model = zero_model()
    q = np.repeat(np.random.default_rng(0).normal(size=(1, 3, 2)), 3, axis=0)
    np.testing.assert_array_equal(learned.predict_step(model, q, np.zeros((3, 2)), np.zeros(2)), q[-1])


def test_zero_output_linear_history_keeps_velocity():
    model = zero_model()
    v = np.array([[0.01, 0.0], [0.0, -0.02], [0.005, 0.005]])
    q = np.array([t * v for t in range(3)])
    np.testing.assert_allclose(learned.predict_step(model, q, np.zeros((3, 2)), np.zeros(2)), q[-1] + v, atol=1e-15)


# --- input Jacobian ----------------------------------------------------------------

def test_zero_model_has_zero_jacobian():
    model = zero_model(bias=(0.2, 0.1))
    hist, box, acc = random_history(np.random.default_rng(0), 3, 2)
    J = learned.flatten_jacobian(learned.input_jacobian(model, hist, box, acc))
    np.testing.assert_array_equal(J, 0.0)


def _fd_jacobians(model, hist, box, acc):
    def fh(h):
        return learned.predict_accel(model, h, box, acc).ravel()

    def fb(b):
        return learned.predict_accel(model, hist, b, acc).ravel()

    def fa(a):
        return learned.predict_accel(model, hist, box, a).ravel()

    return central_jacobian(fh, hist), central_jacobian(fb, box), central_jacobian(fa, acc)


@pytest.mark.parametrize("seed", range(4))
def test_input_jacobian_matches_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    model = small_model(n_nodes=4, history=3, seed=seed)
    hist, box, acc = random_history(rng, 4, 3)
    analytic = learned.input_jacobian(model, hist, box, acc)
    for a, n in zip(analytic, _fd_jacobians(model, hist, box, acc)):
        assert max_rel_error(a, n) <= 1e-4


def test_jacobian_permutation_consistency():
    rng = np.random.default_rng(5)
    model = small_model(n_nodes=4, history=2)
    hist, box, acc = random_history(rng, 4, 2)
    perm = np.array([2, 0, 3, 1])
    J = learned.input_jacobian(model, hist, box, acc)[0].reshape(4, 2, 3, 4, 2)
    Jp = learned.input_jacobian(model, hist[:, perm], box, acc)[0].reshape(4, 2, 3, 4, 2)
    np.testing.assert_allclose(Jp, J[perm][:, :, :, perm], atol=1e-12)


# --- training ----------------------------------------------------------------------

def test_labels_examples():
    k = np.arange(6, dtype=float)[:, None, None] * np.ones((1, 2, 2))
    np.testing.assert_allclose(learned.training_labels(3.0 + 0.5 * k), 0.0, atol=1e-15)
    np.testing.assert_allclose(learned.training_labels(0.7 * k ** 2), 1.4, atol=1e-12)
    with pytest.raises(InsufficientDataError):
        learned.training_labels(np.zeros((2, 2, 2)))


def test_labels_match_loop():
    p = np.random.default_rng(0).normal(size=(7, 3, 2))
    expected = np.array([p[k] - 2 * p[k - 1] + p[k - 2] for k in range(2, 7)])
    np.testing.assert_array_equal(learned.training_labels(p), expected)


def _toy_dataset(rng, n_examples=3, n_frames=12, n_nodes=3, zero=False):
    out = []
    for _ in range(n_examples):
        if zero:
            q = np.cumsum(np.tile(rng.normal(0, 0.01, (1, n_nodes, 2)), (n_frames, 1, 1)), axis=0)
        else:
            q = np.cumsum(np.cumsum(rng.normal(0, 0.01, (n_frames, n_nodes, 2)), axis=0), axis=0)
        b = np.column_stack([0.5 + np.cumsum(rng.normal(0, 0.01, n_frames)), np.zeros(n_frames)])
        out.append((q, b))
    return out


def test_make_samples_alignment():
    rng = np.random.default_rng(0)
    (q, b), = _toy_dataset(rng, 1, 9)
    H, B, A, Y = learned.make_samples([(q, b)], 3)
    assert H.shape == (5, 4, 3, 2)
    np.testing.assert_array_equal(H[0], q[0:4])
    np.testing.assert_allclose(Y[0], q[4] - 2 * q[3] + q[2])
    np.testing.assert_allclose(A[0], b[4] - 2 * b[3] + b[2])


def test_zero_label_dataset_learned_by_bias():
    rng = np.random.default_rng(0)
    data = _toy_dataset(rng, zero=True)
    cfg = learned.TrainConfig(steps=300, learning_rate=3e-3, batch_size=8, noise_std=0.0)
    model, losses = learned.train(data, cfg, learned.GraphConfig(n_nodes=3, history=2, latent_dim=8, mlp_hidden=(8,), message_passes=1))
    H, B, A, _ = learned.make_samples(data, 2)
    assert np.abs(learned.predict_accel(model, H, B, A)).mean() <= 1e-3


def test_training_deterministic_and_lr_zero_is_identity():
    rng = np.random.default_rng(1)
    data = _toy_dataset(rng)
    gc = learned.GraphConfig(n_nodes=3, history=2, latent_dim=8, mlp_hidden=(8,), message_passes=1)
    cfg = learned.TrainConfig(steps=20, batch_size=4, noise_std=1e-3, seed=3)
    _, l1 = learned.train(data, cfg, gc)
    _, l2 = learned.train(data, cfg, gc)
    np.testing.assert_array_equal(l1, l2)
    base = learned.init_model(gc, seed=0)
    frozen, _ = learned.train(data, learned.TrainConfig(steps=10, learning_rate=0.0, noise_std=0.0), gc, model=base)
    for a, b in zip(base.arrays(), frozen.arrays()):
        np.testing.assert_array_equal(a, b)


def test_parameter_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    model = small_model(n_nodes=3, history=2, seed=4)
    H, B, A, Y = learned.make_samples(_toy_dataset(rng), 2)
    H, B, A, Y = H[:5], B[:5], A[:5], Y[:5]
    _, grads = learned.loss_and_grads(model, H, B, A, Y)
    arrays = model.arrays()
    worst = 0.0
    for which in (0, 3, len(arrays) - 2, len(arrays) - 1):
        arr = arrays[which]
        for idx in list(np.ndindex(arr.shape))[:6]:
            old = arr[idx]
            arr[idx] = old + 1e-6
            lp, _ = learned.loss_and_grads(model, H, B, A, Y)
            arr[idx] = old - 1e-6
            lm, _ = learned.loss_and_grads(model, H, B, A, Y)
            arr[idx] = old
            num = (lp - lm) / 2e-6
            g = grads[which][idx]
            if max(abs(num), abs(g)) > 1e-8:
                worst = max(worst, abs(num - g) / max(abs(num), abs(g)))
    assert worst <= 1e-4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergent_training_raises_with_step():
    rng = np.random.default_rng(0)
    data = _toy_dataset(rng)
    gc = learned.GraphConfig(n_nodes=3, history=2, latent_dim=8, mlp_hidden=(8,), message_passes=1)
    with pytest.raises((TrainingError, NumericError)):
        learned.train(data, learned.TrainConfig(steps=50, learning_rate=1e300, noise_std=0.0), gc)


def test_save_load_roundtrip(tmp_path):
    model = small_model(n_nodes=3, history=2)
    model.save(tmp_path)
    back = learned.GraphNetModel.load(tmp_path)
    assert back.config == model.config
    for a, b in zip(model.arrays(), back.arrays()):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(back.node_std, model.node_std)
    assert (tmp_path / "weights.bin").read_bytes()[:4] == b"GNW1"


def test_estimator_api():
    rng = np.random.default_rng(3)
    data = _toy_dataset(rng)
    est = learned.GraphNetDynamics(history=2, latent_dim=8, mlp_hidden=(8,), message_passes=1, steps=30, batch_size=4)
    assert est.get_params()["steps"] == 30
    est.fit(data)
    H, B, A, _ = learned.make_samples(data, 2)
    np.testing.assert_allclose(est.predict(H[0], B[0], A[0]), learned.predict_step(est.model_, H[0], B[0], A[0]))
    assert np.isfinite(est.score(data))
