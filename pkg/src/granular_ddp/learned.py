"""Graph-network predictor of reduced-particle accelerations.

Every PCA mode is a node of a fully connected directed graph.  Nodes carry
the latest position, the last ``C`` velocities (first differences), a type
flag and the box position, velocity and acceleration as global features.
Edges carry the sender-minus-receiver displacement and its length.

The network is encode-process-decode.  Each of the ``M`` processor blocks
updates edges from ``[edge, sender, receiver]`` latents and nodes from
``[node, sum of incoming edges]``, both residually.  A decoder maps node
latents to accelerations in time-step-absorbed units (second differences of
positions).

Everything is float64 numpy with a hand-written reverse pass, which gives
both the training gradients and the exact input Jacobian used by the
optimizer.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field, replace
from typing import List, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConfigurationError, InsufficientDataError, NumericError, ShapeError, TrainingError
from .mlp import init_mlp, mlp_backward, mlp_forward

D = 2
N_GLOBAL = 6
N_EDGE = D + 1


@dataclass(frozen=True)
class GraphConfig:
    n_nodes: int = 8
    history: int = 5
    latent_dim: int = 64
    mlp_hidden: Tuple[int, ...] = (64, 64)
    message_passes: int = 5
    fully_connected: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mlp_hidden", tuple(int(h) for h in self.mlp_hidden))
        if self.history < 1 or self.message_passes < 1 or self.latent_dim < 1 or self.n_nodes < 1:
            raise ConfigurationError("history, message_passes, latent_dim and n_nodes must be >= 1")
        if not self.fully_connected:
            raise ConfigurationError("only fully connected subspace graphs are supported")

    @property
    def node_dim(self):
        # position, C velocities, type flag, global features
        return D + D * self.history + 1 + N_GLOBAL


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    final_lr_ratio: float = 0.05
    batch_size: int = 16
    steps: int = 5000
    noise_std: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be non-negative")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigurationError("batch_size must be >= 1 and steps >= 0")


def edge_index(n_nodes):
    """Senders and receivers of the fully connected graph without self-loops."""
    s, r = np.meshgrid(np.arange(n_nodes), np.arange(n_nodes), indexing="ij")
    keep = s != r
    return s[keep], r[keep]


def _incidence(n_nodes):
    senders, receivers = edge_index(n_nodes)
    n_edges = senders.size
    S = np.zeros((n_edges, n_nodes))
    R = np.zeros((n_edges, n_nodes))
    S[np.arange(n_edges), senders] = 1.0
    R[np.arange(n_edges), receivers] = 1.0
    return S, R


@dataclass
class GraphNetModel:
    config: GraphConfig
    params: dict
    node_mean: np.ndarray
    node_std: np.ndarray
    edge_mean: np.ndarray
    edge_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray

    def layer_names(self):
        names = ["node_encoder", "edge_encoder"]
        for m in range(self.config.message_passes):
            names += [f"edge_block_{m}", f"node_block_{m}"]
        return names + ["decoder"]

    def arrays(self):
        """Parameter arrays in canonical order (layer, then W before b)."""
        out = []
        for name in self.layer_names():
            for W, b in self.params[name]:
                out += [W, b]
        return out

    def copy(self):
        params = {k: [(W.copy(), b.copy()) for W, b in v] for k, v in self.params.items()}
        return replace(self, params=params)

    def normalize_nodes(self, x):
        return (x - self.node_mean) / self.node_std

    def denormalize_nodes(self, x):
        return x * self.node_std + self.node_mean

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        layout = []
        for name in self.layer_names():
            for li, (W, b) in enumerate(self.params[name]):
                layout.append([f"{name}.{li}.W", list(W.shape)])
                layout.append([f"{name}.{li}.b", list(b.shape)])
        meta = {
            "config": asdict(self.config),
            "normalization": {
                k: [float(v) for v in getattr(self, k)]
                for k in ("node_mean", "node_std", "edge_mean", "edge_std", "out_mean", "out_std")
            },
            "layout": layout,
        }
        with open(os.path.join(directory, "model.json"), "w") as fh:
            json.dump(meta, fh, indent=2)
        header = json.dumps({"dtype": "<f8", "layout": layout}).encode()
        with open(os.path.join(directory, "weights.bin"), "wb") as fh:
            fh.write(b"GNW1")
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            for a in self.arrays():
                fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())

    @classmethod
    def load(cls, directory):
        with open(os.path.join(directory, "model.json")) as fh:
            meta = json.load(fh)
        with open(os.path.join(directory, "weights.bin"), "rb") as fh:
            if fh.read(4) != b"GNW1":
                raise ConfigurationError("weights.bin: bad magic")
            (hlen,) = struct.unpack("<Q", fh.read(8))
            layout = json.loads(fh.read(hlen))["layout"]
            flat = np.frombuffer(fh.read(), dtype="<f8").astype(float)
        cfg = GraphConfig(**meta["config"])
        params, pos = {}, 0
        arrays = []
        for name, shape in layout:
            size = int(np.prod(shape))
            arrays.append((name, flat[pos:pos + size].reshape(shape)))
            pos += size
        if pos != flat.size:
            raise ShapeError("weights.bin size does not match its header")
        for (wname, W), (_, b) in zip(arrays[0::2], arrays[1::2]):
            layer = wname.split(".")[0]
            params.setdefault(layer, []).append((W.copy(), b.copy()))
        norm = {k: np.array(v) for k, v in meta["normalization"].items()}
        return cls(cfg, params, **norm)


def init_model(config, seed=0):
    """Freshly initialized model with identity normalization."""
    rng = np.random.default_rng(seed)
    L, hidden = config.latent_dim, list(config.mlp_hidden)
    params = {
        "node_encoder": init_mlp(rng, [config.node_dim] + hidden + [L]),
        "edge_encoder": init_mlp(rng, [N_EDGE] + hidden + [L]),
    }
    for m in range(config.message_passes):
        params[f"edge_block_{m}"] = init_mlp(rng, [3 * L] + hidden + [L])
        params[f"node_block_{m}"] = init_mlp(rng, [2 * L] + hidden + [L])
    params["decoder"] = init_mlp(rng, [L] + hidden + [D])
    # a fresh model predicts the label mean, the constant baseline
    params["decoder"][-1][0][...] = 0.0
    return GraphNetModel(
        config, params,
        node_mean=np.zeros(config.node_dim), node_std=np.ones(config.node_dim),
        edge_mean=np.zeros(N_EDGE), edge_std=np.ones(N_EDGE),
        out_mean=np.zeros(D), out_std=np.ones(D),
    )


# --- features -------------------------------------------------------------

def _as_batch(reduced_history, box_history, box_accel):
    q = np.asarray(reduced_history, dtype=float)
    b = np.asarray(box_history, dtype=float)
    a = np.asarray(box_accel, dtype=float)
    single = q.ndim == 3
    if single:
        q, b, a = q[None], b[None], a[None]
    return q, b, a, single


def build_features(reduced_history, box_history, box_accel, history=None):
    """Raw node and edge features.

    ``reduced_history`` is ``(C+1, n, 2)`` (or batched ``(B, C+1, n, 2)``),
    ``box_history`` ``(C+1, 2)`` and ``box_accel`` a 2-vector, the box
    acceleration applied over the step being predicted.  Returns node
    features ``(n, 2 + 2C + 1 + 6)`` and edge features ``(n(n-1), 3)``
    ordered as :func:`edge_index`.
    """
    q, b, a, single = _as_batch(reduced_history, box_history, box_accel)
    if q.ndim != 4 or q.shape[-1] != D:
        raise ShapeError(f"reduced_history must be (C+1, n, 2), got {np.shape(reduced_history)}")
    if history is not None and q.shape[1] != history + 1:
        raise ShapeError(f"history length {q.shape[1]} != C+1 = {history + 1}")
    if q.shape[1] < 2:
        raise ShapeError("need at least two history frames")
    if b.shape != (q.shape[0], q.shape[1], D) or a.shape != (q.shape[0], D):
        raise ShapeError("box history / acceleration shapes do not match the particle history")
    B, T, n, _ = q.shape
    vel = np.diff(q, axis=1)  # (B, C, n, 2)
    vel = vel.transpose(0, 2, 1, 3).reshape(B, n, -1)
    glob = np.concatenate([b[:, -1], b[:, -1] - b[:, -2], a], axis=1)  # (B, 6)
    nodes = np.concatenate(
        [q[:, -1], vel, np.ones((B, n, 1)), np.broadcast_to(glob[:, None, :], (B, n, N_GLOBAL))],
        axis=2,
    )
    senders, receivers = edge_index(n)
    disp = q[:, -1, senders] - q[:, -1, receivers]
    dist = np.sqrt(np.sum(disp * disp, axis=-1, keepdims=True))
    edges = np.concatenate([disp, dist], axis=2)
    if single:
        return nodes[0], edges[0]
    return nodes, edges


def _features_backward(g_nodes, g_edges, q_last, n_hist):
    """Pull feature cotangents back to (history, box history, box accel).

    ``g_nodes`` is ``(K, n, F)``, ``g_edges`` ``(K, E, 3)``; ``q_last`` is the
    latest positions ``(n, 2)`` (or ``(K, n, 2)``).
    """
    K, n, _ = g_nodes.shape
    C = n_hist - 1
    gq = np.zeros((K, n_hist, n, D))
    gq[:, C] += g_nodes[:, :, 0:D]
    gv = g_nodes[:, :, D:D + D * C].reshape(K, n, C, D).transpose(0, 2, 1, 3)
    gq[:, 1:] += gv
    gq[:, :-1] -= gv
    o = D + D * C + 1
    gglob = g_nodes[:, :, o:o + N_GLOBAL].sum(axis=1)
    gb = np.zeros((K, n_hist, D))
    gb[:, C] += gglob[:, 0:2] + gglob[:, 2:4]
    gb[:, C - 1] -= gglob[:, 2:4]
    ga = gglob[:, 4:6]
    senders, receivers = edge_index(n)
    disp = q_last[..., senders, :] - q_last[..., receivers, :]
    dist = np.sqrt(np.sum(disp * disp, axis=-1, keepdims=True))
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(dist > 0, disp / dist, 0.0)
    gd = g_edges[:, :, 0:D] + g_edges[:, :, D:D + 1] * unit
    S, R = _incidence(n)
    gq[:, C] += np.matmul(S.T, gd) - np.matmul(R.T, gd)
    return gq, gb, ga


# --- network ----------------------------------------------------------------

def _network_forward(model, vn, en):
    """Normalized features -> normalized outputs, with the reverse-pass cache."""
    p, cfg = model.params, model.config
    n = vn.shape[-2]
    S, R = _incidence(n)
    V, c_venc = mlp_forward(p["node_encoder"], vn)
    E, c_eenc = mlp_forward(p["edge_encoder"], en)
    blocks = []
    for m in range(cfg.message_passes):
        inp_e = np.concatenate([E, np.matmul(S, V), np.matmul(R, V)], axis=-1)
        dE, c_e = mlp_forward(p[f"edge_block_{m}"], inp_e)
        E = E + dE
        agg = np.matmul(R.T, E)
        dV, c_v = mlp_forward(p[f"node_block_{m}"], np.concatenate([V, agg], axis=-1))
        V = V + dV
        if not (np.all(np.isfinite(V)) and np.all(np.isfinite(E))):
            raise NumericError(f"non-finite activations in processor block {m}")
        blocks.append((c_e, c_v))
    out, c_dec = mlp_forward(p["decoder"], V)
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite activations in decoder")
    return out, (c_venc, c_eenc, blocks, c_dec, S, R)


def _network_backward(model, cache, g_out, grads=None):
    """Reverse pass; fills ``grads`` (dict name -> list of (dW, db)) if given."""
    p, cfg = model.params, model.config
    c_venc, c_eenc, blocks, c_dec, S, R = cache
    L = cfg.latent_dim

    def back(name, c, g):
        lst = [] if grads is not None else None
        gx = mlp_backward(p[name], c, g, lst)
        if grads is not None:
            grads[name] = lst
        return gx

    gV = back("decoder", c_dec, g_out)
    gE = np.zeros(gV.shape[:-2] + (S.shape[0], L))
    for m in range(cfg.message_passes - 1, -1, -1):
        c_e, c_v = blocks[m]
        g_in = back(f"node_block_{m}", c_v, gV)
        gV = gV + g_in[..., :L]
        gE = gE + np.matmul(R, g_in[..., L:])
        g_in = back(f"edge_block_{m}", c_e, gE)
        gE = gE + g_in[..., :L]
        gV = gV + np.matmul(S.T, g_in[..., L:2 * L]) + np.matmul(R.T, g_in[..., 2 * L:])
    g_vn = back("node_encoder", c_venc, gV)
    g_en = back("edge_encoder", c_eenc, gE)
    return g_vn, g_en


def forward(model, nodes, edges):
    """Predicted accelerations ``(n, 2)`` (or batched) from raw features."""
    vn = model.normalize_nodes(np.asarray(nodes, dtype=float))
    en = (np.asarray(edges, dtype=float) - model.edge_mean) / model.edge_std
    out, _ = _network_forward(model, vn, en)
    return out * model.out_std + model.out_mean


def predict_accel(model, reduced_history, box_history, box_accel):
    nodes, edges = build_features(reduced_history, box_history, box_accel, model.config.history)
    return forward(model, nodes, edges)


def predict_step(model, reduced_history, box_history, box_accel):
    """Next reduced positions by the semi-implicit Euler update."""
    q = np.asarray(reduced_history, dtype=float)
    a = predict_accel(model, q, box_history, box_accel)
    v_new = (q[..., -1, :, :] - q[..., -2, :, :]) + a
    return q[..., -1, :, :] + v_new


def input_jacobian(model, reduced_history, box_history, box_accel):
    """Exact Jacobian of the predicted accelerations.

    Rows are the ``2n`` outputs (node-major, x before y).  Returns
    ``(J_hist, J_box, J_accel)`` of shapes ``(2n, C+1, n, 2)``,
    ``(2n, C+1, 2)`` and ``(2n, 2)``; :func:`flatten_jacobian` joins them.
    """
    q = np.asarray(reduced_history, dtype=float)
    nodes, edges = build_features(q, box_history, box_accel, model.config.history)
    vn = model.normalize_nodes(nodes)
    en = (edges - model.edge_mean) / model.edge_std
    _, cache = _network_forward(model, vn, en)
    n = q.shape[1]
    K = D * n
    g_out = (np.eye(K) * np.tile(model.out_std, n)).reshape(K, n, D)
    g_vn, g_en = _network_backward(model, cache, g_out)
    g_nodes = g_vn / model.node_std
    g_edges = g_en / model.edge_std
    return _features_backward(g_nodes, g_edges, q[-1], q.shape[0])


def flatten_jacobian(jac):
    J_hist, J_box, J_acc = jac
    K = J_hist.shape[0]
    return np.concatenate([J_hist.reshape(K, -1), J_box.reshape(K, -1), J_acc], axis=1)


# --- training ---------------------------------------------------------------

def training_labels(reduced_positions):
    """Second differences ``p_k - 2 p_{k-1} + p_{k-2}`` for k = 2..N-1."""
    p = np.asarray(reduced_positions, dtype=float)
    if p.shape[0] < 3:
        raise InsufficientDataError(f"need at least 3 frames for labels, got {p.shape[0]}")
    return p[2:] - 2.0 * p[1:-1] + p[:-2]


def make_samples(dataset, history):
    """Slice examples into one-step training samples.

    ``dataset`` is a sequence of ``(positions (N, n, 2), box (N, 2))``.  A
    sample with latest frame ``k`` uses frames ``k-C..k`` as history, the box
    second difference at ``k`` as the applied acceleration and the particle
    second difference at ``k`` as the label.
    """
    H, B, A, Y = [], [], [], []
    for q, b in dataset:
        q = np.asarray(q, dtype=float)
        b = np.asarray(b, dtype=float)
        N = q.shape[0]
        if N < history + 2:
            raise InsufficientDataError(f"example with {N} frames is shorter than C+2 = {history + 2}")
        labels = training_labels(q)  # label j belongs to frame j+1
        box_acc = training_labels(b)
        for k in range(history, N - 1):
            H.append(q[k - history:k + 1])
            B.append(b[k - history:k + 1])
            A.append(box_acc[k - 1])
            Y.append(labels[k - 1])
    if not H:
        raise InsufficientDataError("dataset is empty")
    return np.stack(H), np.stack(B), np.stack(A), np.stack(Y)


def _safe_std(x, axis):
    s = x.std(axis=axis)
    return np.where(s > 1e-12, s, 1.0)


def fit_normalization(model, hist, box, acc, labels):
    nodes, edges = build_features(hist, box, acc)
    node_mean = nodes.reshape(-1, nodes.shape[-1]).mean(axis=0)
    node_std = _safe_std(nodes.reshape(-1, nodes.shape[-1]), 0)
    # the type flag is constant; keep it at 1 after normalization
    node_mean[D + D * model.config.history] = 0.0
    node_std[D + D * model.config.history] = 1.0
    return replace(
        model,
        node_mean=node_mean, node_std=node_std,
        edge_mean=edges.reshape(-1, N_EDGE).mean(axis=0), edge_std=_safe_std(edges.reshape(-1, N_EDGE), 0),
        out_mean=labels.reshape(-1, D).mean(axis=0), out_std=_safe_std(labels.reshape(-1, D), 0),
    )


def loss_and_grads(model, hist, box, acc, labels):
    """Mean squared error in normalized label units and its parameter gradients."""
    nodes, edges = build_features(hist, box, acc)
    vn = model.normalize_nodes(nodes)
    en = (edges - model.edge_mean) / model.edge_std
    out, cache = _network_forward(model, vn, en)
    target = (labels - model.out_mean) / model.out_std
    diff = out - target
    loss = float(np.mean(diff * diff))
    grads = {}
    _network_backward(model, cache, 2.0 * diff / diff.size, grads)
    flat = []
    for name in model.layer_names():
        for dW, db in grads[name]:
            flat += [dW, db]
    return loss, flat


def train(dataset, cfg=None, graph_cfg=None, model=None):
    """Fit a model with Adam on one-step acceleration labels.

    Gaussian noise (``noise_std`` times the per-coordinate position scale) is
    added to the whole input history of every batch.  Returns
    ``(model, loss_history)``.
    """
    cfg = TrainConfig() if cfg is None else cfg
    hist, box, acc, labels = make_samples(dataset, (graph_cfg or GraphConfig()).history)
    if graph_cfg is None:
        graph_cfg = GraphConfig(n_nodes=hist.shape[2])
    elif graph_cfg.n_nodes != hist.shape[2]:
        graph_cfg = replace(graph_cfg, n_nodes=hist.shape[2])
    if model is None:
        model = init_model(graph_cfg, seed=cfg.seed)
        model = fit_normalization(model, hist, box, acc, labels)
    else:
        model = model.copy()
    rng = np.random.default_rng(cfg.seed + 1)
    params = model.arrays()
    m1 = [np.zeros_like(a) for a in params]
    m2 = [np.zeros_like(a) for a in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    pos_scale = model.node_std[:D]
    n_samples = hist.shape[0]
    history = []
    for t in range(cfg.steps):
        idx = rng.integers(0, n_samples, size=cfg.batch_size)
        h = hist[idx]
        if cfg.noise_std > 0:
            h = h + cfg.noise_std * pos_scale * rng.standard_normal(h.shape)
        loss, grads = loss_and_grads(model, h, box[idx], acc[idx], labels[idx])
        if not np.isfinite(loss):
            raise TrainingError(t)
        history.append(loss)
        lr = cfg.learning_rate * cfg.final_lr_ratio ** (t / max(cfg.steps, 1))
        c1 = 1.0 - beta1 ** (t + 1)
        c2 = 1.0 - beta2 ** (t + 1)
        for a, g, s1, s2 in zip(params, grads, m1, m2):
            s1 *= beta1
            s1 += (1.0 - beta1) * g
            s2 *= beta2
            s2 += (1.0 - beta2) * g * g
            a -= lr * (s1 / c1) / (np.sqrt(s2 / c2) + eps)
    return model, np.array(history)


def evaluate_mse(model, dataset):
    """Held-out one-step acceleration MSE and the constant-predictor baseline.

    The baseline is the mean over output entries (node, coordinate) of the
    label variance, i.e. the MSE of the best constant per entry.
    """
    hist, box, acc, labels = make_samples(dataset, model.config.history)
    pred = predict_accel(model, hist, box, acc)
    mse = float(np.mean((pred - labels) ** 2))
    baseline = float(np.mean(labels.var(axis=0)))
    return mse, baseline


class GraphNetDynamics(RegressorMixin, BaseEstimator):
    """Estimator interface: ``fit`` on reduced trajectories, ``predict`` the next frame.

    ``fit`` takes a list of ``(positions (N, n, 2), box (N, 2))`` examples.
    """

    def __init__(self, history=5, latent_dim=64, mlp_hidden=(64, 64), message_passes=5,
                 learning_rate=1e-3, final_lr_ratio=0.05, batch_size=16, steps=5000,
                 noise_std=1e-4, seed=0):
        self.history = history
        self.latent_dim = latent_dim
        self.mlp_hidden = mlp_hidden
        self.message_passes = message_passes
        self.learning_rate = learning_rate
        self.final_lr_ratio = final_lr_ratio
        self.batch_size = batch_size
        self.steps = steps
        self.noise_std = noise_std
        self.seed = seed

    def _configs(self, n_nodes):
        graph_cfg = GraphConfig(
            n_nodes=n_nodes, history=self.history, latent_dim=self.latent_dim,
            mlp_hidden=tuple(self.mlp_hidden), message_passes=self.message_passes,
        )
        train_cfg = TrainConfig(
            learning_rate=self.learning_rate, final_lr_ratio=self.final_lr_ratio,
            batch_size=self.batch_size, steps=self.steps, noise_std=self.noise_std, seed=self.seed,
        )
        return graph_cfg, train_cfg

    def fit(self, X, y=None):
        examples = list(X)
        if not examples:
            raise InsufficientDataError("no training examples")
        graph_cfg, train_cfg = self._configs(np.asarray(examples[0][0]).shape[1])
        self.model_, self.loss_history_ = train(examples, train_cfg, graph_cfg)
        return self

    def predict(self, reduced_history, box_history, box_accel):
        check_is_fitted(self, "model_")
        return predict_step(self.model_, reduced_history, box_history, box_accel)

    def predict_acceleration(self, reduced_history, box_history, box_accel):
        check_is_fitted(self, "model_")
        return predict_accel(self.model_, reduced_history, box_history, box_accel)

    def score(self, X, y=None):
        """``1 - mse / baseline`` on held-out examples."""
        mse, baseline = evaluate_mse(self.model_, list(X))
        return 1.0 - mse / baseline

    @classmethod
    def from_model(cls, model):
        cfg = model.config
        est = cls(history=cfg.history, latent_dim=cfg.latent_dim,
                  mlp_hidden=cfg.mlp_hidden, message_passes=cfg.message_passes)
        est.model_ = model
        return est
