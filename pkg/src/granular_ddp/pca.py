"""PCA reduction of particle trajectories.

The data matrix stacks one x-row and one y-row per observation and one column
per particle, so a "mode" is a weighted combination of particles and every
reduced particle still carries an (x, y) pair.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import ConfigurationError, ShapeError

D = 2


def assemble_data_matrix(dataset):
    """Stack examples into the ``(d * m_o, n_n)`` trajectory data matrix.

    ``dataset`` is a list of examples.  Each example is either a list of
    :class:`~granular_ddp.sim.ParticleFrame` or an array ``(N, n_n, 2)`` of
    normal-particle positions.  Rows run example-major, then time-major, with
    the x-row of each observation before its y-row.
    """
    blocks = []
    n_n = None
    for example in dataset:
        if isinstance(example, np.ndarray):
            q = np.asarray(example, dtype=float)
        else:
            q = np.stack([fr.normal_positions for fr in example])
        if q.ndim != 3 or q.shape[2] != D:
            raise ShapeError(f"expected (N, n_n, {D}) positions, got {q.shape}")
        if n_n is None:
            n_n = q.shape[1]
        elif q.shape[1] != n_n:
            raise ShapeError(f"inconsistent particle counts: {n_n} vs {q.shape[1]}")
        # (N, n_n, 2) -> (N, 2, n_n) -> (2N, n_n)
        blocks.append(q.transpose(0, 2, 1).reshape(-1, q.shape[1]))
    if not blocks:
        raise ShapeError("empty dataset")
    return np.concatenate(blocks, axis=0)


def frames_to_rows(q):
    """``(k, n_n, 2)`` positions -> ``(2k, n_n)`` rows (x-row, y-row per frame)."""
    q = np.asarray(q, dtype=float)
    return q.transpose(0, 2, 1).reshape(-1, q.shape[1])


def rows_to_frames(rows):
    """Inverse of :func:`frames_to_rows`."""
    rows = np.asarray(rows, dtype=float)
    if rows.shape[0] % D:
        raise ShapeError("row count must be divisible by 2")
    return rows.reshape(-1, D, rows.shape[1]).transpose(0, 2, 1)


def _sign_fix(vectors):
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


@dataclass
class PcaBasis:
    loading: np.ndarray
    mean: np.ndarray
    eigenvalues: np.ndarray

    @property
    def n_n(self):
        return self.loading.shape[0]

    @property
    def n_nr(self):
        return self.loading.shape[1]

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, "basis.json"), "w") as fh:
            json.dump(
                {
                    "n_n": self.n_n,
                    "n_nr": self.n_nr,
                    "mean": [float(m) for m in self.mean],
                    "eigenvalues": [float(v) for v in self.eigenvalues],
                },
                fh,
                indent=2,
            )
        header = ",".join(f"mode_{i + 1}" for i in range(self.n_nr))
        np.savetxt(
            os.path.join(directory, "basis_w.csv"), self.loading, delimiter=",",
            header=header, comments="", fmt="%.17g",
        )

    @classmethod
    def load(cls, directory):
        with open(os.path.join(directory, "basis.json")) as fh:
            meta = json.load(fh)
        w = np.loadtxt(os.path.join(directory, "basis_w.csv"), delimiter=",", skiprows=1, ndmin=2)
        if w.shape != (meta["n_n"], meta["n_nr"]):
            raise ShapeError(f"basis_w.csv has shape {w.shape}, basis.json says {(meta['n_n'], meta['n_nr'])}")
        return cls(w, np.array(meta["mean"]), np.array(meta["eigenvalues"]))


def fit(X, n_nr):
    """Fit the loading matrix from a data matrix.

    The mean is taken over all ``d * m_o`` rows of each particle column and
    the covariance is normalized by ``m_o`` (not ``m_o - 1``).
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] % D:
        raise ShapeError(f"data matrix needs a row count divisible by {D}, got {X.shape}")
    n_n = X.shape[1]
    if not 1 <= n_nr <= n_n:
        raise ConfigurationError(f"n_nr must be in [1, {n_n}], got {n_nr}")
    m_o = X.shape[0] // D
    mu = X.mean(axis=0)
    Xc = X - mu
    S = Xc.T @ Xc / m_o
    S = 0.5 * (S + S.T)
    lam, vec = np.linalg.eigh(S)
    # descending eigenvalue, ties by ascending solver index
    order = np.lexsort((np.arange(n_n), -lam))
    lam = np.clip(lam[order], 0.0, None)
    vec = _sign_fix(vec[:, order])
    return PcaBasis(loading=vec[:, :n_nr].copy(), mean=mu, eigenvalues=lam)


def _check_cols(rows, n, what):
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    if rows.shape[1] != n:
        raise ShapeError(f"{what} has {rows.shape[1]} columns, expected {n}")
    return rows


def project(X_rows, basis):
    """Map fullspace rows into the subspace: ``(X - 1 mu) W``."""
    X_rows = _check_cols(X_rows, basis.n_n, "X_rows")
    return (X_rows - basis.mean) @ basis.loading


def reconstruct(Z_rows, basis):
    """Map subspace rows back to fullspace: ``Z W^T + 1 mu``."""
    Z_rows = _check_cols(Z_rows, basis.n_nr, "Z_rows")
    return Z_rows @ basis.loading.T + basis.mean


def energy_curve(basis_or_eigenvalues):
    """Cumulative energy fraction of the first i modes.

    Returns ``(curve, degenerate)``; an all-zero spectrum gives all ones with
    ``degenerate`` set.
    """
    lam = getattr(basis_or_eigenvalues, "eigenvalues", basis_or_eigenvalues)
    lam = np.asarray(lam, dtype=float)
    if lam.size == 0:
        raise ShapeError("no eigenvalues")
    total = lam.sum()
    if total <= 0:
        warnings.warn("zero-variance spectrum; energy curve set to ones", RuntimeWarning)
        return np.ones_like(lam), True
    curve = np.cumsum(lam) / total
    curve = np.maximum.accumulate(np.minimum(curve, 1.0))
    curve[-1] = 1.0
    return curve, False


def project_frames(q, basis):
    """``(k, n_n, 2)`` fullspace frames -> ``(k, n_nr, 2)`` reduced frames."""
    return rows_to_frames(project(frames_to_rows(q), basis))


def reconstruct_frames(z, basis):
    """``(k, n_nr, 2)`` reduced frames -> ``(k, n_n, 2)`` fullspace frames."""
    return rows_to_frames(reconstruct(frames_to_rows(z), basis))


class ParticlePCA(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`fit` / :func:`project` / :func:`reconstruct`.

    ``X`` is a data matrix as built by :func:`assemble_data_matrix`.
    """

    def __init__(self, n_components=8):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.basis_ = fit(X, self.n_components)
        self.components_ = self.basis_.loading.T
        self.mean_ = self.basis_.mean
        self.eigenvalues_ = self.basis_.eigenvalues
        self.explained_energy_, _ = energy_curve(self.basis_)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "basis_")
        return project(check_array(X, dtype=np.float64), self.basis_)

    def inverse_transform(self, Z):
        check_is_fitted(self, "basis_")
        return reconstruct(check_array(Z, dtype=np.float64), self.basis_)

    @classmethod
    def from_basis(cls, basis):
        est = cls(n_components=basis.n_nr)
        est.basis_ = basis
        est.components_ = basis.loading.T
        est.mean_ = basis.mean
        est.eigenvalues_ = basis.eigenvalues
        est.explained_energy_, _ = energy_curve(basis)
        est.n_features_in_ = basis.n_n
        return est
