"""Pipeline stages: data generation, PCA, training, optimization, validation, report.

Every stage reads only the serialized output of earlier stages from the run
directory, so stages can be resumed or run independently::

    run/
      config.json
      data/example_000/{frames.csv, meta.json}, data/manifest.json
      pca/{basis.json, basis_w.csv}
      model/{model.json, weights.bin, loss.csv, train_metrics.json}
      control/{solution.json, problem.json}
      validation/{validation.json, shapes.npz}
      report/{metrics.json, energy.csv, cost.csv, box_traj.csv, shapes_A.csv, ...}

Inside the optimizer time steps are absorbed (velocities and accelerations
are first and second differences of per-frame positions).  Physical box
accelerations are recovered by dividing by the squared frame period, once,
when commands are replayed on the simulator.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import ddp, learned, pca, sim, state_space
from .config import save_config
from .exceptions import ConfigurationError, SimulationDivergence
from .targets import TargetShape, realize

log = logging.getLogger(__name__)

# published RMSEs from an MPM ground truth; context only
PUBLISHED_RMSE_REFERENCE = {
    "example_1": {"fullspace": 38.6e-3, "reconstructed": 22.1e-3},
    "example_2": {"fullspace": 17.9e-3, "reconstructed": 2.20e-3},
}
BOX_HOME = (0.5, 0.0)


def _grain(cfg):
    return sim.GrainParams(**cfg["sim"]["grain"])


def _box(cfg, width):
    b = dict(cfg["sim"]["box"])
    b["width"] = width
    return sim.BoxSpec(**b)


def _path(out, *parts):
    return os.path.join(out, *parts)


def _require(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing artifact {path}; run the earlier pipeline stage first")
    return path


def _dump(path, obj):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


def _load(path):
    with open(_require(path)) as fh:
        return json.load(fh)


def rmse(a, b):
    """Root of the mean squared coordinate-wise error over all particles."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ConfigurationError(f"rmse of mismatched shapes {a.shape} and {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


# --- gen-data -----------------------------------------------------------------

def _example_params(cfg, index, attempt):
    ds = cfg["dataset"]
    rng = np.random.default_rng([cfg["seed"], index, attempt])
    width = float(rng.uniform(*ds["width_range"]))
    freq = float(rng.uniform(*ds["frequency_range"]))
    amp = float(rng.uniform(*ds["amplitude_range"]))
    # the box starts at rest; the sign picks the first direction of travel
    phase = float(math.pi / 2 if rng.random() < 0.5 else -math.pi / 2)
    block_seed = int(rng.integers(0, 2 ** 31 - 1))
    return width, freq, amp, phase, block_seed


def _simulate_example(args):
    cfg, index, out_dir = args
    ds, sc = cfg["dataset"], cfg["sim"]
    grain = _grain(cfg)
    dt_frame = 1.0 / ds["rate_hz"]
    for attempt in range(ds["max_retries"] + 1):
        width, freq, amp, phase, block_seed = _example_params(cfg, index, attempt)
        box = _box(cfg, width)
        motion = sim.BoxMotion(
            kind="sinusoid", amplitude=amp, frequency=freq, phase=phase, max_frequency=ds["max_frequency"]
        )
        frame = sim.init_block(
            box, grain, ds["fill_width"], ds["fill_height"], spacing=ds["lattice_spacing"],
            jitter=ds["jitter"], seed=block_seed,
        )
        frame = replace(frame, box_velocity=motion.initial_velocity())
        try:
            frames = sim.rollout(
                frame, motion, ds["n_frames"], sc["substeps"], dt_frame, grain, v_max=sc["v_max"]
            )
        except SimulationDivergence as exc:
            log.warning("example %d attempt %d diverged at frame %d; regenerating", index, attempt, exc.time_index)
            continue
        meta = {
            "index": index,
            "attempt": attempt,
            "seed": [cfg["seed"], index, attempt],
            "block_seed": block_seed,
            "grain": asdict(grain),
            "box": {**asdict(box), "initial_position": list(box.initial_position)},
            "motion": motion.to_dict(),
            "dt_frame": dt_frame,
            "dt": dt_frame / sc["substeps"],
            "substeps": sc["substeps"],
        }
        sim.write_rollout(os.path.join(out_dir, f"example_{index:03d}"), frames, meta)
        return meta
    raise SimulationDivergence(-1, f"example {index} diverged on every retry")


def gen_data(cfg, out):
    """Shake-box rollouts written in the simulator's CSV/JSON format."""
    ds = cfg["dataset"]
    data_dir = _path(out, "data")
    os.makedirs(data_dir, exist_ok=True)
    jobs = [(cfg, i, data_dir) for i in range(ds["n_examples"])]
    if ds["workers"] > 1:
        with ProcessPoolExecutor(max_workers=ds["workers"]) as pool:
            metas = list(pool.map(_simulate_example, jobs))
    else:
        metas = [_simulate_example(j) for j in jobs]
    manifest = {
        "n_examples": len(metas),
        "n_frames": ds["n_frames"],
        "rate_hz": ds["rate_hz"],
        "observations": len(metas) * ds["n_frames"],
        "examples": [
            {k: m[k] for k in ("index", "attempt", "seed", "block_seed")}
            | {"width": m["box"]["width"], "frequency": m["motion"]["frequency"],
               "amplitude": m["motion"]["amplitude"], "phase": m["motion"]["phase"]}
            for m in metas
        ],
    }
    _dump(_path(data_dir, "manifest.json"), manifest)
    return manifest


def load_dataset(out):
    manifest = _load(_path(out, "data", "manifest.json"))
    examples = []
    for e in manifest["examples"]:
        frames, _ = sim.read_rollout(_path(out, "data", f"example_{e['index']:03d}"))
        examples.append(sim.frames_to_arrays(frames))
    return examples


# --- fit-pca --------------------------------------------------------------------

def fit_pca(cfg, out):
    examples = load_dataset(out)
    X = pca.assemble_data_matrix([q for q, _ in examples])
    basis = pca.fit(X, cfg["pca"]["n_nr"])
    basis.save(_path(out, "pca"))
    return basis


def load_basis(out):
    _require(_path(out, "pca", "basis.json"))
    return pca.PcaBasis.load(_path(out, "pca"))


# --- train ------------------------------------------------------------------------

def reduce_examples(examples, basis, rest_padding=0):
    """Project examples to the subspace.

    ``rest_padding`` prepends copies of the first frame, which stands for the
    grains and box being held still before release.
    """
    out = []
    for q, b in examples:
        z = pca.project_frames(q, basis)
        if rest_padding:
            z = np.concatenate([np.repeat(z[:1], rest_padding, axis=0), z])
            b = np.concatenate([np.repeat(b[:1], rest_padding, axis=0), b])
        out.append((z, b))
    return out


def train_stage(cfg, out):
    tc = cfg["train"]
    basis = load_basis(out)
    examples = load_dataset(out)
    reduced = reduce_examples(examples, basis, rest_padding=tc["history"])
    n_hold = tc["holdout"]
    train_set = reduced[: len(reduced) - n_hold]
    held = reduced[len(reduced) - n_hold:] if n_hold else []
    graph_cfg = learned.GraphConfig(
        n_nodes=basis.n_nr, history=tc["history"], latent_dim=tc["latent_dim"],
        mlp_hidden=tuple(tc["mlp_hidden"]), message_passes=tc["message_passes"],
    )
    train_cfg = learned.TrainConfig(
        learning_rate=tc["learning_rate"], final_lr_ratio=tc["final_lr_ratio"],
        batch_size=tc["batch_size"], steps=tc["steps"], noise_std=tc["noise_std"], seed=cfg["seed"],
    )
    model, losses = learned.train(train_set, train_cfg, graph_cfg)
    model.save(_path(out, "model"))
    with open(_path(out, "model", "loss.csv"), "w") as fh:
        fh.write("step,loss\n")
        fh.writelines(f"{i},{l!r}\n" for i, l in enumerate(losses))
    metrics = {"train_examples": len(train_set), "heldout_examples": len(held)}
    if held:
        # held-out scoring on the raw (unpadded) trajectories
        mse, base = learned.evaluate_mse(model, reduce_examples(examples[len(examples) - n_hold:], basis))
        metrics.update(heldout_mse=mse, heldout_baseline=base, heldout_ratio=mse / base)
    _dump(_path(out, "model", "train_metrics.json"), metrics)
    return model, losses, metrics


def load_model(out):
    _require(_path(out, "model", "model.json"))
    return learned.GraphNetModel.load(_path(out, "model"))


# --- optimize ---------------------------------------------------------------------

def control_block(cfg):
    """Fullspace initial block used for optimization and validation (box frame)."""
    ds, cc = cfg["dataset"], cfg["control"]
    return sim.init_block(
        _box(cfg, cc["box_width"]), _grain(cfg), ds["fill_width"], ds["fill_height"],
        spacing=ds["lattice_spacing"], jitter=ds["jitter"], seed=[cfg["seed"], 10_000],
    )


def make_initial_state(model, basis, block_positions, box_position=BOX_HOME):
    """Concatenated initial state from a fullspace block.

    The projected block fills the first slot; the remaining ``C`` slots come
    from letting it collapse under the learned model with zero control,
    starting from a history of the block at rest.  The box stays at
    ``box_position`` throughout.
    """
    C = model.config.history
    z0 = pca.project_frames(np.asarray(block_positions, dtype=float)[None], basis)[0]
    hist = np.repeat(z0[None], C + 1, axis=0)
    box = np.repeat(np.asarray(box_position, dtype=float)[None], C + 1, axis=0)
    frames = [z0]
    for _ in range(C):
        z = learned.predict_step(model, hist, box, np.zeros(2))
        hist = np.concatenate([hist[1:], z[None]])
        frames.append(z)
    return state_space.join_state(np.stack(frames), box)


def make_target_state(target_positions, basis, history, box_position=BOX_HOME):
    """Goal state: the projected target replicated over all ``C+1`` slots."""
    target_positions = np.asarray(target_positions, dtype=float)
    if target_positions.shape != (basis.n_n, 2):
        raise ConfigurationError(
            f"target has {target_positions.shape[0]} particles, basis expects {basis.n_n}"
        )
    z = pca.project_frames(target_positions[None], basis)[0]
    frames = np.repeat(z[None], history + 1, axis=0)
    box = np.repeat(np.asarray(box_position, dtype=float)[None], history + 1, axis=0)
    return state_space.join_state(frames, box)


def build_cost(X_g, n_p, history, terminal_weight=1.0, running_weight=0.0, control_weight=1e-2):
    """Quadratic cost with weight on the particle entries of the newest slot."""
    n = X_g.size
    s = state_space.slot_size(n_p)
    mask = np.zeros(n)
    mask[history * s: history * s + 2 * n_p] = 1.0
    return ddp.QuadCost(
        R=np.array([[control_weight]]),
        P=running_weight * np.diag(mask),
        Q_T=terminal_weight * np.diag(mask),
        X_g=X_g,
    )


def optimize(X0, X_g, model, cost, ddp_cfg, horizon, U_init=None):
    dyn = state_space.ReducedBoxDynamics(model)
    U0 = np.zeros((horizon, 1)) if U_init is None else np.asarray(U_init, dtype=float).reshape(horizon, 1)
    return ddp.solve(X0, U0, dyn, dyn.jacobians, cost, ddp_cfg)


def target_positions(cfg, n_n, reference=None):
    cc, ds = cfg["control"], cfg["dataset"]
    target = TargetShape.from_dict(cc["target"])
    return realize(target, n_n, cc["box_width"], ds["lattice_spacing"], reference=reference)


def zero_control_sim(cfg, block_frame, n_frames):
    grain = _grain(cfg)
    motion = sim.BoxMotion(kind="acceleration_sequence", accelerations=[0.0])
    return sim.rollout(
        block_frame, motion, n_frames, cfg["sim"]["substeps"], 1.0 / cfg["dataset"]["rate_hz"],
        grain, v_max=cfg["sim"]["v_max"],
    )


def optimize_stage(cfg, out):
    cc = cfg["control"]
    basis = load_basis(out)
    model = load_model(out)
    C, N = model.config.history, cc["horizon"]
    block = control_block(cfg)
    # target particle i is matched to where grain i settles without control
    settled = zero_control_sim(cfg, block, C + N + 1)[-1].normal_positions
    A = target_positions(cfg, basis.n_n, reference=settled)
    X0 = make_initial_state(model, basis, block.normal_positions)
    X_g = make_target_state(A, basis, C)
    cost = build_cost(X_g, basis.n_nr, C, **cc["cost"])
    dcfg = ddp.DdpConfig(**cc["ddp"])
    dyn = state_space.ReducedBoxDynamics(model)
    zero = ddp.rollout(X0, np.zeros((N, 1)), dyn)
    zero_cost = cost.total(zero, np.zeros((N, 1)))
    solution = optimize(X0, X_g, model, cost, dcfg, N)
    problem = {
        "X0": X0.tolist(),
        "X_g": X_g.tolist(),
        "target_positions": A.tolist(),
        "block_positions": block.normal_positions.tolist(),
        "zero_control_cost": zero_cost,
        "zero_control_terminal": zero[-1].tolist(),
        "horizon": N,
        "history": C,
    }
    _dump(_path(out, "control", "problem.json"), problem)
    solution.save(_path(out, "control", "solution.json"), dcfg)
    return solution, problem


# --- validate ---------------------------------------------------------------------

def physical_accelerations(U, rate_hz):
    """Time-step-absorbed controls -> m/s^2 (divide by the squared frame period)."""
    dt = 1.0 / rate_hz
    return np.asarray(U, dtype=float).ravel() / dt ** 2


def _reduced_window(frames, basis, history):
    """Concatenated state built from the last ``C+1`` simulator frames."""
    q = np.stack([f.normal_positions for f in frames[-(history + 1):]])
    b = np.stack([f.box_position for f in frames[-(history + 1):]])
    return state_space.join_state(pca.project_frames(q, basis), b)


def replay(cfg, block_frame, solution, basis, history, feedback=False):
    """Drive the simulator with the optimized box accelerations.

    The first ``C`` frames are the uncontrolled collapse covered by the
    initial state; control ``k`` then acts over frame ``C + k``.  With
    ``feedback`` the command is ``u_k + K_k (x_sim - x*_k)``, where ``x_sim``
    is the projected simulator window.
    """
    grain = _grain(cfg)
    rate = cfg["dataset"]["rate_hz"]
    substeps, v_max = cfg["sim"]["substeps"], cfg["sim"]["v_max"]
    U = solution.U.reshape(-1, solution.U.shape[-1] if solution.U.ndim > 1 else 1)
    N = len(U)
    accel = np.concatenate([np.zeros(history), physical_accelerations(U, rate)])
    if not feedback:
        motion = sim.BoxMotion(kind="acceleration_sequence", accelerations=accel)
        return sim.rollout(block_frame, motion, history + N + 1, substeps, 1.0 / rate, grain, v_max=v_max), accel
    frames = sim.rollout(
        block_frame, sim.BoxMotion(kind="acceleration_sequence", accelerations=np.zeros(history)),
        history + 1, substeps, 1.0 / rate, grain, v_max=v_max,
    )
    applied = list(np.zeros(history))
    for k in range(N):
        dx = _reduced_window(frames, basis, history) - solution.X[k]
        u = float(U[k, 0] + (solution.K[k] @ dx)[0])
        a = physical_accelerations([u], rate)[0]
        applied.append(a)
        motion = sim.BoxMotion(kind="acceleration_sequence", accelerations=[a])
        frames.append(sim.rollout(frames[-1], motion, 2, substeps, 1.0 / rate, grain, v_max=v_max)[-1])
    return frames, np.array(applied)


def _tracking_error(frames, solution, basis, history):
    """RMSE between reconstructed simulator and optimal subspace trajectories."""
    n_p = basis.n_nr
    errs = []
    for k in range(len(solution.X)):
        z_opt = state_space.split_state(solution.X[k], n_p, history)[0][-1]
        q = frames[history + k].normal_positions
        rec_sim = pca.reconstruct_frames(pca.project_frames(q[None], basis), basis)[0]
        rec_opt = pca.reconstruct_frames(z_opt[None], basis)[0]
        errs.append(np.mean((rec_sim - rec_opt) ** 2))
    return float(np.sqrt(np.mean(errs)))


def history_of(solution, basis):
    """History length ``C`` implied by the state dimension."""
    return solution.X.shape[1] // state_space.slot_size(basis.n_nr) - 1


def validate(solution, block_frame, basis, cfg, target, feedback=False):
    """Replay on the simulator and score terminal shapes.

    A: fullspace target; B: reconstructed target; C: reconstructed terminal
    state of the learned model; D: simulator terminal state.
    """
    n_p = basis.n_nr
    history = history_of(solution, basis)
    z_terminal = state_space.split_state(solution.X[-1], n_p, history)[0][-1]
    A = np.asarray(target, dtype=float)
    B = pca.reconstruct_frames(pca.project_frames(A[None], basis), basis)[0]
    C = pca.reconstruct_frames(z_terminal[None], basis)[0]
    report = {"valid": True, "feedback": feedback}
    try:
        frames, applied = replay(cfg, block_frame, solution, basis, history, feedback=feedback)
    except SimulationDivergence as exc:
        report.update(valid=False, error=str(exc))
        return report, {"A": A, "B": B, "C": C}
    D = frames[-1].normal_positions
    report.update(
        rmse_fullspace=rmse(A, D),
        rmse_reconstructed=rmse(B, C),
        tracking_rmse=_tracking_error(frames, solution, basis, history),
        box_x_sim=[float(f.box_position[0]) for f in frames],
        applied_accelerations=[float(a) for a in applied],
        rmse_normalization="sqrt(mean over particles and both coordinates of squared error)",
    )
    return report, {"A": A, "B": B, "C": C, "D": D}


def validate_with_feedback(solution, block_frame, basis, cfg, target):
    return validate(solution, block_frame, basis, cfg, target, feedback=True)


def validate_stage(cfg, out):
    basis = load_basis(out)
    problem = _load(_path(out, "control", "problem.json"))
    solution = ddp.DdpSolution.load(_require(_path(out, "control", "solution.json")))
    C = problem["history"]
    A = np.array(problem["target_positions"])
    block = control_block(cfg)
    open_loop, shapes = validate(solution, block, basis, cfg, A)
    result = {"open_loop": open_loop}
    # zero-control baselines, in the learned model and in the simulator
    zero_terminal = np.array(problem["zero_control_terminal"])
    z0 = state_space.split_state(zero_terminal, basis.n_nr, C)[0][-1]
    C0 = pca.reconstruct_frames(z0[None], basis)[0]
    D0 = zero_control_sim(cfg, block, C + len(solution.U) + 1)[-1].normal_positions
    result["zero_control"] = {
        "rmse_reconstructed": rmse(shapes["B"], C0),
        "rmse_fullspace": rmse(A, D0),
    }
    if cfg["control"]["feedback"]:
        fb, fb_shapes = validate_with_feedback(solution, block, basis, cfg, A)
        result["feedback"] = fb
        if "D" in fb_shapes:
            shapes["D_feedback"] = fb_shapes["D"]
    _dump(_path(out, "validation", "validation.json"), result)
    np.savez(_path(out, "validation", "shapes.npz"), **shapes)
    return result, shapes


# --- report -----------------------------------------------------------------------

def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(float(v)) if not isinstance(v, (int, np.integer)) else str(v) for v in row) + "\n")


def report(cfg, out):
    """Regenerate metrics and plot data from stored artifacts only."""
    rep = _path(out, "report")
    os.makedirs(rep, exist_ok=True)
    basis = load_basis(out)
    solution_raw = _load(_path(out, "control", "solution.json"))
    problem = _load(_path(out, "control", "problem.json"))
    validation = _load(_path(out, "validation", "validation.json"))
    train_metrics = _load(_path(out, "model", "train_metrics.json"))
    with np.load(_require(_path(out, "validation", "shapes.npz"))) as f:
        shapes = {k: f[k] for k in f.files}

    curve, _ = pca.energy_curve(basis)
    _write_csv(_path(rep, "energy.csv"), ["n_modes", "cumulative_energy"],
               [(i + 1, e) for i, e in enumerate(curve)])
    costs = solution_raw["cost_history"]
    _write_csv(_path(rep, "cost.csv"), ["iteration", "cost"], list(enumerate(costs)))
    C = problem["history"]
    n_p = basis.n_nr
    rate = cfg["dataset"]["rate_hz"]
    states = np.array(solution_raw["states"])
    box_x = [state_space.split_state(x, n_p, C)[1][-1, 0] for x in states]
    sim_x = validation["open_loop"].get("box_x_sim", [])[C:]
    rows = []
    for k, bx in enumerate(box_x):
        sx = sim_x[k] if k < len(sim_x) else float("nan")
        rows.append((k, (C + k) / rate, bx, sx))
    _write_csv(_path(rep, "box_traj.csv"), ["step", "time_s", "box_x_ddp", "box_x_sim"], rows)
    for key in ("A", "B", "C", "D"):
        if key in shapes:
            _write_csv(_path(rep, f"shapes_{key}.csv"), ["particle_id", "x", "y"],
                       [(i, x, y) for i, (x, y) in enumerate(shapes[key])])
    ol = validation["open_loop"]
    metrics = {
        "rmse_fullspace": ol.get("rmse_fullspace"),
        "rmse_reconstructed": ol.get("rmse_reconstructed"),
        "replay_valid": ol["valid"],
        "zero_control_rmse_reconstructed": validation["zero_control"]["rmse_reconstructed"],
        "zero_control_rmse_fullspace": validation["zero_control"]["rmse_fullspace"],
        "ddp_initial_cost": costs[0],
        "ddp_final_cost": costs[-1],
        "ddp_iterations": solution_raw["iterations"],
        "ddp_converged": solution_raw["converged"],
        "zero_control_cost": problem["zero_control_cost"],
        "energy_at_n_nr": float(curve[n_p - 1]),
        "heldout_ratio": train_metrics.get("heldout_ratio"),
        "heldout_mse": train_metrics.get("heldout_mse"),
        "rmse_normalization": "sqrt(mean over all particles and both coordinates of squared error), metres",
        "published_reference_rmse": PUBLISHED_RMSE_REFERENCE,
    }
    if "feedback" in validation:
        fb = validation["feedback"]
        metrics.update(
            feedback_rmse_fullspace=fb.get("rmse_fullspace"),
            feedback_tracking_rmse=fb.get("tracking_rmse"),
            open_loop_tracking_rmse=ol.get("tracking_rmse"),
        )
    _dump(_path(rep, "metrics.json"), metrics)
    return metrics


def run_all(cfg, out):
    os.makedirs(out, exist_ok=True)
    save_config(cfg, _path(out, "config.json"))
    gen_data(cfg, out)
    fit_pca(cfg, out)
    train_stage(cfg, out)
    optimize_stage(cfg, out)
    validate_stage(cfg, out)
    return report(cfg, out)
