"""Differential dynamic programming with first-order dynamics expansion (iLQR).

The dynamics are any callable ``f(x, u) -> x_next`` paired with
``jac(x, u) -> (A, B)``.  The cost is quadratic::

    J = sum_k 0.5 u_k' R u_k + 0.5 (x_k - x_g)' P (x_k - x_g)
        + 0.5 (x_N - x_g)' Q_T (x_N - x_g)

``Q_uu`` is regularized as ``Q_uu + lam I`` and ``lam`` is scheduled
multiplicatively: raised on a failed backward pass or a rejected line search,
lowered after an accepted step.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .exceptions import ConfigurationError

log = logging.getLogger(__name__)


@dataclass
class QuadCost:
    R: np.ndarray
    P: np.ndarray
    Q_T: np.ndarray
    X_g: np.ndarray
    offset: float = 0.0

    def __post_init__(self):
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        self.Q_T = np.atleast_2d(np.asarray(self.Q_T, dtype=float))
        self.X_g = np.asarray(self.X_g, dtype=float).ravel()
        n = self.X_g.size
        if self.P.shape != (n, n) or self.Q_T.shape != (n, n):
            raise ConfigurationError("P and Q_T must be n x n with n = len(X_g)")
        if not np.allclose(self.R, self.R.T) or np.linalg.eigvalsh(self.R).min() <= 0:
            raise ConfigurationError("R must be symmetric positive definite")
        for name in ("P", "Q_T"):
            M = getattr(self, name)
            if not np.allclose(M, M.T) or np.linalg.eigvalsh(M).min() < -1e-12 * max(1.0, np.abs(M).max()):
                raise ConfigurationError(f"{name} must be symmetric positive semi-definite")

    def running(self, x, u):
        dx = x - self.X_g
        return 0.5 * float(u @ self.R @ u) + 0.5 * float(dx @ self.P @ dx)

    def terminal(self, x):
        dx = x - self.X_g
        return 0.5 * float(dx @ self.Q_T @ dx)

    def total(self, X, U):
        return self.offset + sum(self.running(x, u) for x, u in zip(X[:-1], U)) + self.terminal(X[-1])


@dataclass
class DdpConfig:
    max_iters: int = 100
    reg_init: float = 1e-6
    reg_min: float = 1e-12
    reg_max: float = 1e10
    reg_scale: float = 2.0
    alphas: Sequence[float] = tuple(0.5 ** i for i in range(11))
    rel_tol: float = 1e-6
    grad_tol: float = 1e-6

    def __post_init__(self):
        self.alphas = tuple(float(a) for a in self.alphas)
        if not (0 < self.reg_min <= self.reg_init <= self.reg_max):
            raise ConfigurationError("need 0 < reg_min <= reg_init <= reg_max")
        if self.reg_scale <= 1:
            raise ConfigurationError("reg_scale must exceed 1")
        if not self.alphas or any(not 0 < a <= 1 for a in self.alphas):
            raise ConfigurationError("line-search steps must lie in (0, 1]")


@dataclass
class DdpSolution:
    U: np.ndarray
    X: np.ndarray
    k: np.ndarray  # feedforward gains, (N, m)
    K: np.ndarray  # feedback gains, (N, m, n)
    cost_history: List[float]
    converged: bool
    iterations: int
    reg_history: List[float] = field(default_factory=list)
    Quu_min_eig: float = float("nan")

    @property
    def cost(self):
        return self.cost_history[-1]

    def to_dict(self, config=None):
        return {
            "controls": self.U.tolist(),
            "states": self.X.tolist(),
            "cost_history": [float(c) for c in self.cost_history],
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "gains": {"k_shape": list(self.k.shape), "K_shape": list(self.K.shape)},
            "feedforward": self.k.tolist(),
            "feedback": self.K.tolist(),
            "config": asdict(config) if config is not None else None,
        }

    def save(self, path, config=None, extra=None):
        d = self.to_dict(config)
        if d["config"] is not None:
            d["config"]["alphas"] = list(d["config"]["alphas"])
        if extra:
            d.update(extra)
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w") as fh:
            json.dump(d, fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            d = json.load(fh)
        return cls(
            U=np.array(d["controls"], dtype=float).reshape(-1, 1) if d["controls"] else np.zeros((0, 1)),
            X=np.array(d["states"], dtype=float),
            k=np.array(d["feedforward"], dtype=float).reshape(d["gains"]["k_shape"]),
            K=np.array(d["feedback"], dtype=float).reshape(d["gains"]["K_shape"]),
            cost_history=list(d["cost_history"]),
            converged=d["converged"],
            iterations=d["iterations"],
        )


def rollout(x0, U, dynamics):
    X = [np.asarray(x0, dtype=float)]
    for u in U:
        X.append(dynamics(X[-1], u))
    return np.array(X)


def backward_pass(X, U, jacobians, cost, lam):
    """Gains about the nominal ``(X, U)``.

    ``jacobians`` is either a callable ``(x, u) -> (A, B)`` or a precomputed
    list of ``(A, B)`` pairs.  Returns ``(k, K, dV, max|Q_u|, min eig Q_uu_reg)``
    or ``None`` when a regularized ``Q_uu`` is not positive definite.
    """
    N = len(U)
    n = X.shape[1]
    m = U.shape[1]
    Vx = cost.Q_T @ (X[-1] - cost.X_g)
    Vxx = cost.Q_T.copy()
    k = np.zeros((N, m))
    K = np.zeros((N, m, n))
    dV = np.zeros(2)
    q_u_max = 0.0
    min_eig = np.inf
    I = np.eye(m)
    for t in range(N - 1, -1, -1):
        A, B = jacobians[t] if not callable(jacobians) else jacobians(X[t], U[t])
        dx = X[t] - cost.X_g
        Qx = cost.P @ dx + A.T @ Vx
        Qu = cost.R @ U[t] + B.T @ Vx
        VxxA = Vxx @ A
        Qxx = cost.P + A.T @ VxxA
        Quu = cost.R + B.T @ Vxx @ B
        Qux = B.T @ VxxA
        Quu_reg = Quu + lam * I
        Quu_reg = 0.5 * (Quu_reg + Quu_reg.T)
        try:
            L = np.linalg.cholesky(Quu_reg)
        except np.linalg.LinAlgError:
            return None
        min_eig = min(min_eig, float(np.linalg.eigvalsh(Quu_reg).min()))
        kt = -_chol_solve(L, Qu)
        Kt = -_chol_solve(L, Qux)
        k[t] = kt
        K[t] = Kt
        q_u_max = max(q_u_max, float(np.max(np.abs(Qu))))
        dV += np.array([kt @ Qu, 0.5 * kt @ Quu @ kt])
        Vx = Qx + Kt.T @ Quu @ kt + Kt.T @ Qu + Qux.T @ kt
        Vxx = Qxx + Kt.T @ Quu @ Kt + Kt.T @ Qux + Qux.T @ Kt
        Vxx = 0.5 * (Vxx + Vxx.T)
    return k, K, dV, q_u_max, min_eig


def _chol_solve(L, b):
    y = np.linalg.solve(L, b)
    return np.linalg.solve(L.T, y)


def forward_pass(X, U, k, K, alpha, dynamics, cost):
    """Line-search rollout ``u = u_bar + alpha k + K (x_new - x_bar)``.

    Returns ``(X_new, U_new, cost)``; a non-finite rollout yields ``cost = inf``.
    """
    N = len(U)
    X_new = np.empty_like(X)
    U_new = np.empty_like(U)
    X_new[0] = X[0]
    try:
        for t in range(N):
            U_new[t] = U[t] + alpha * k[t] + K[t] @ (X_new[t] - X[t])
            X_new[t + 1] = dynamics(X_new[t], U_new[t])
    except FloatingPointError:
        return X_new, U_new, np.inf
    if not (np.all(np.isfinite(X_new)) and np.all(np.isfinite(U_new))):
        return X_new, U_new, np.inf
    return X_new, U_new, cost.total(X_new, U_new)


def solve(x0, U_init, dynamics, jacobians, cost, cfg=None, callback=None):
    """Run DDP from ``x0`` with initial controls ``U_init`` of shape ``(N, m)``."""
    cfg = DdpConfig() if cfg is None else cfg
    U = np.asarray(U_init, dtype=float)
    if U.ndim == 1:
        U = U[:, None]
    if len(U) < 1:
        raise ConfigurationError("horizon must be at least one step")
    X = rollout(x0, U, dynamics)
    J = cost.total(X, U)
    if not np.isfinite(J):
        raise FloatingPointError("initial rollout is not finite")
    history = [J]
    regs = []
    lam = cfg.reg_init
    converged = False
    gains = None
    it = 0
    min_eig = float("nan")
    while it < cfg.max_iters:
        it += 1
        jac = [jacobians(x, u) for x, u in zip(X[:-1], U)]
        bp = None
        while bp is None:
            bp = backward_pass(X, U, jac, cost, lam)
            if bp is None:
                if lam >= cfg.reg_max:
                    break
                lam = min(lam * cfg.reg_scale, cfg.reg_max)
        if bp is None:
            log.info("iteration %d: regularization saturated in the backward pass", it)
            history.append(J)
            regs.append(lam)
            break
        k, K, dV, q_u_max, min_eig = bp
        gains = (k, K)
        if q_u_max < cfg.grad_tol:
            converged = True
            history.append(J)
            regs.append(lam)
            break
        accepted = False
        for alpha in cfg.alphas:
            X_new, U_new, J_new = forward_pass(X, U, k, K, alpha, dynamics, cost)
            if J_new < J:
                expected = -(alpha * dV[0] + alpha ** 2 * dV[1])
                log.debug("alpha=%g actual=%g expected=%g", alpha, J - J_new, expected)
                accepted = True
                break
        if accepted:
            rel = (J - J_new) / max(abs(J), 1e-300)
            X, U, J = X_new, U_new, J_new
            lam = max(lam / cfg.reg_scale, cfg.reg_min)
            history.append(J)
            regs.append(lam)
            if callback is not None:
                callback(it, J, lam)
            if rel < cfg.rel_tol:
                converged = True
                break
        else:
            history.append(J)
            regs.append(lam)
            if lam >= cfg.reg_max:
                log.info("iteration %d: no cost-reducing step at maximum regularization", it)
                break
            lam = min(lam * cfg.reg_scale, cfg.reg_max)
    # gains about the returned nominal, for feedback replay
    final = backward_pass(X, U, jacobians, cost, lam)
    if final is not None:
        gains = final[:2]
        min_eig = final[4]
    if gains is None:
        gains = (np.zeros_like(U), np.zeros((len(U), U.shape[1], X.shape[1])))
    return DdpSolution(
        U=U, X=X, k=gains[0], K=gains[1], cost_history=history, converged=converged,
        iterations=it, reg_history=regs, Quu_min_eig=min_eig,
    )
