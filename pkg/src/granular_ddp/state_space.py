"""Concatenated control state, learned transition map and its Jacobians.

The state stacks ``C+1`` slots, oldest first, each holding the reduced
particle coordinates (node-major, x before y) followed by the box position::

    X = [p_k, b_k, p_{k+1}, b_{k+1}, ..., p_{k+C}, b_{k+C}]

One transition drops the oldest slot and appends a new one.  The new reduced
positions come from the learned model with a semi-implicit Euler update.  The
new box position is ``2 b_{k+C} - b_{k+C-1} + [u, 0]``, since time steps are
absorbed into positions.

The full model also carries the box's rigid particles, whose box-frame
coordinates map to themselves with an identity block.  They have zero cost
weight and cannot move, so they are left out of ``X`` here.
"""

import numpy as np

from . import learned
from .exceptions import NumericError, ShapeError

D = 2


def lift_u(u):
    """Horizontal control -> 2-D box acceleration ``[u, 0]``."""
    return np.array([float(np.asarray(u).reshape(-1)[0]), 0.0])


def slot_size(n_p):
    return D * (n_p + 1)


def state_dim(n_p, history):
    return slot_size(n_p) * (history + 1)


def split_state(X, n_p, history):
    """``X`` -> particle history ``(C+1, n_p, 2)`` and box history ``(C+1, 2)``."""
    X = np.asarray(X, dtype=float)
    if X.shape != (state_dim(n_p, history),):
        raise ShapeError(f"state has shape {X.shape}, expected ({state_dim(n_p, history)},)")
    slots = X.reshape(history + 1, slot_size(n_p))
    return slots[:, : D * n_p].reshape(history + 1, n_p, D), slots[:, D * n_p:].copy()


def join_state(particles, box):
    particles = np.asarray(particles, dtype=float)
    box = np.asarray(box, dtype=float)
    T = particles.shape[0]
    return np.concatenate([particles.reshape(T, -1), box.reshape(T, D)], axis=1).ravel()


def dynamics_F(X, u, model):
    """One step of the learned reduced dynamics."""
    n_p, C = model.config.n_nodes, model.config.history
    P, B = split_state(X, n_p, C)
    acc = lift_u(u)
    p_new = learned.predict_step(model, P, B, acc)
    b_new = 2.0 * B[-1] - B[-2] + acc
    s = slot_size(n_p)
    out = np.empty_like(np.asarray(X, dtype=float))
    out[: -s] = np.asarray(X, dtype=float)[s:]
    out[-s: -D] = p_new.ravel()
    out[-D:] = b_new
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite state from the learned dynamics")
    return out


def structural_jacobian(n_p, history):
    """The model-independent part of ``dF/dX``.

    Shift block on the top rows, inertia terms ``2I, -I`` for the newest
    particle slot and the box double integrator on the last two rows.
    """
    s = slot_size(n_p)
    n = state_dim(n_p, history)
    A = np.zeros((n, n))
    A[: n - s, s:] = np.eye(n - s)
    rows = slice(n - s, n - s + D * n_p)
    last = (history) * s
    prev = (history - 1) * s
    A[rows, last:last + D * n_p] += 2.0 * np.eye(D * n_p)
    A[rows, prev:prev + D * n_p] -= np.eye(D * n_p)
    A[n - D:, last + D * n_p:last + s] = 2.0 * np.eye(D)
    A[n - D:, prev + D * n_p:prev + s] = -np.eye(D)
    return A


def jacobian_F(X, u, model, structural=None):
    """``(A, B)`` with ``A = dF/dX`` and ``B = dF/du`` (shape ``(n, 1)``)."""
    n_p, C = model.config.n_nodes, model.config.history
    P, Bh = split_state(X, n_p, C)
    J_hist, J_box, J_acc = learned.input_jacobian(model, P, Bh, lift_u(u))
    A = (structural_jacobian(n_p, C) if structural is None else structural).copy()
    s = slot_size(n_p)
    n = state_dim(n_p, C)
    K = D * n_p
    # the acceleration enters the new positions with unit weight
    J_state = np.concatenate([J_hist.reshape(K, C + 1, K), J_box.reshape(K, C + 1, D)], axis=2)
    A[n - s:n - s + K, :] += J_state.reshape(K, n)
    Bm = np.zeros((n, 1))
    Bm[n - s:n - s + K, 0] = J_acc[:, 0]
    Bm[n - D, 0] = 1.0
    return A, Bm


class ReducedBoxDynamics:
    """Callable wrapper handed to the DDP solver."""

    def __init__(self, model):
        self.model = model
        self.n_p = model.config.n_nodes
        self.history = model.config.history
        self.n = state_dim(self.n_p, self.history)
        self._structural = structural_jacobian(self.n_p, self.history)

    def __call__(self, x, u):
        return dynamics_F(x, u, self.model)

    def jacobians(self, x, u):
        return jacobian_F(x, u, self.model, self._structural)
