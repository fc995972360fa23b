"""Desk-scale 2D ground-truth granular simulator.

Disks interact through a linear spring-dashpot normal force with a
Coulomb-capped viscous tangential force.  They live inside a rectangular box
(floor plus two side walls) whose horizontal motion is prescribed, so the box
is never pushed back by the grains.

Grain state is kept in the box frame.  The box frame has its origin at the
bottom-left inner corner, so interior grains satisfy ``0 <= x <= width`` and
``y >= 0``.  The box itself is tracked through its representative point, the
center of its bottom side, in the world frame.  Because the box only
translates, integrating in the box frame amounts to adding the pseudo-force
``-m * a_box`` to every grain.

Wall contacts are evaluated against the analytic wall planes.  The rigid wall
particles tile the same planes and are carried along for output; their box
frame coordinates never change.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np

from .exceptions import ConfigurationError, SimulationDivergence

FRAME_COLUMNS = ("time_index", "particle_id", "type", "x", "y", "box_x", "box_y")


@dataclass(frozen=True)
class GrainParams:
    radius: float = 0.01
    mass: float = 0.01
    normal_stiffness: float = 1000.0
    normal_damping: float = 4.0
    friction_coeff: float = 0.9
    gravity: float = 9.81

    def __post_init__(self):
        if not (self.radius > 0 and self.mass > 0 and self.normal_stiffness > 0):
            raise ConfigurationError("radius, mass and normal_stiffness must be positive")
        if self.normal_damping < 0 or self.friction_coeff < 0:
            raise ConfigurationError("normal_damping and friction_coeff must be non-negative")

    @property
    def diameter(self):
        return 2.0 * self.radius


@dataclass(frozen=True)
class BoxSpec:
    width: float = 0.4
    wall_height: float = 0.3
    initial_position: tuple = (0.5, 0.0)
    wall_particle_spacing: float = 0.02

    def __post_init__(self):
        if self.width <= 0 or self.wall_height <= 0 or self.wall_particle_spacing <= 0:
            raise ConfigurationError("box width, wall height and wall spacing must be positive")
        object.__setattr__(self, "initial_position", tuple(float(v) for v in self.initial_position))

    def wall_particles(self):
        """Rigid particle coordinates (box frame) tiling the floor and side walls."""
        s = self.wall_particle_spacing
        nx = int(math.floor(self.width / s + 1e-9))
        floor = np.stack([np.linspace(0.0, nx * s, nx + 1), np.zeros(nx + 1)], axis=1)
        floor[-1, 0] = self.width
        ny = int(math.floor(self.wall_height / s + 1e-9))
        ys = s * np.arange(1, ny + 1)
        left = np.stack([np.zeros(ny), ys], axis=1)
        right = np.stack([np.full(ny, self.width), ys], axis=1)
        return np.concatenate([floor, left, right])


@dataclass(frozen=True)
class ParticleFrame:
    """Positions of all grains and the box pose at one output time step.

    ``normal_velocities`` and ``box_velocity`` are the integrator state that
    the positional record alone does not determine.
    """

    normal_positions: np.ndarray
    rigid_positions: np.ndarray
    box_position: np.ndarray
    time_index: int = 0
    box_width: float = 0.4
    normal_velocities: Optional[np.ndarray] = None
    box_velocity: Optional[np.ndarray] = None

    def __post_init__(self):
        q = np.asarray(self.normal_positions, dtype=float).reshape(-1, 2)
        object.__setattr__(self, "normal_positions", q)
        object.__setattr__(self, "rigid_positions", np.asarray(self.rigid_positions, dtype=float).reshape(-1, 2))
        object.__setattr__(self, "box_position", np.asarray(self.box_position, dtype=float).reshape(2))
        if self.normal_velocities is None:
            object.__setattr__(self, "normal_velocities", np.zeros_like(q))
        else:
            object.__setattr__(self, "normal_velocities", np.asarray(self.normal_velocities, dtype=float).reshape(-1, 2))
        if self.box_velocity is None:
            object.__setattr__(self, "box_velocity", np.zeros(2))
        else:
            object.__setattr__(self, "box_velocity", np.asarray(self.box_velocity, dtype=float).reshape(2))

    @property
    def n_normal(self):
        return self.normal_positions.shape[0]


@dataclass(frozen=True)
class BoxMotion:
    """Prescribed horizontal box motion.

    ``sinusoid`` displaces the box by ``amplitude * (sin(w t + phase) - sin(phase))``.
    ``acceleration_sequence`` holds one physical acceleration per output frame,
    kept constant over that frame's substeps (zero past the end).
    """

    kind: str = "sinusoid"
    amplitude: float = 0.0
    frequency: float = 1.0
    phase: float = 0.0
    accelerations: Optional[Sequence[float]] = None
    max_frequency: float = 3.0

    def __post_init__(self):
        if self.kind not in ("sinusoid", "acceleration_sequence"):
            raise ConfigurationError(f"unknown box motion kind {self.kind!r}")
        if self.kind == "sinusoid" and self.frequency > self.max_frequency:
            raise ConfigurationError(
                f"box frequency {self.frequency} Hz exceeds the {self.max_frequency} Hz cap"
            )
        if self.kind == "acceleration_sequence":
            if self.accelerations is None:
                raise ConfigurationError("acceleration_sequence motion needs accelerations")
            object.__setattr__(self, "accelerations", tuple(float(a) for a in self.accelerations))

    @property
    def omega(self):
        return 2.0 * math.pi * self.frequency

    def initial_velocity(self):
        if self.kind == "sinusoid":
            return np.array([self.amplitude * self.omega * math.cos(self.phase), 0.0])
        return np.zeros(2)

    def acceleration(self, t, frame_index):
        if self.kind == "sinusoid":
            return -self.amplitude * self.omega ** 2 * math.sin(self.omega * t + self.phase)
        if frame_index < len(self.accelerations):
            return self.accelerations[frame_index]
        return 0.0

    def to_dict(self):
        d = asdict(self)
        if d["accelerations"] is not None:
            d["accelerations"] = list(d["accelerations"])
        return d


def init_block(box, grain, fill_width, fill_height, spacing=None, jitter=0.1, seed=0, x_offset=None):
    """Fill a rectangle resting on the box floor with a jittered lattice of grains.

    The rectangle is centered horizontally unless ``x_offset`` (its left edge)
    is given.  Grains are ordered row by row from the bottom, left to right.
    """
    spacing = grain.diameter if spacing is None else float(spacing)
    if fill_width < 0 or fill_height < 0:
        raise ConfigurationError("fill extents must be non-negative")
    if x_offset is None:
        x_offset = 0.5 * (box.width - fill_width)
    if x_offset < -1e-12 or x_offset + fill_width > box.width + 1e-12:
        raise ConfigurationError(
            f"fill region of width {fill_width} does not fit in a box of width {box.width}"
        )
    if fill_height > box.wall_height + 1e-12:
        raise ConfigurationError("fill region is taller than the box walls")
    ncols = int(math.floor(fill_width / spacing + 1e-9))
    nrows = int(math.floor(fill_height / spacing + 1e-9))
    cols, rows = np.meshgrid(np.arange(ncols), np.arange(nrows))
    lattice = np.stack(
        [x_offset + (cols.ravel() + 0.5) * spacing, (rows.ravel() + 0.5) * spacing], axis=1
    ).astype(float)
    if lattice.size and jitter > 0:
        rng = np.random.default_rng(seed)
        lattice = lattice + rng.uniform(-jitter * spacing, jitter * spacing, size=lattice.shape)
        # keep the lattice inside the walls
        lattice[:, 0] = np.clip(lattice[:, 0], grain.radius, box.width - grain.radius)
        lattice[:, 1] = np.maximum(lattice[:, 1], grain.radius)
    return ParticleFrame(
        normal_positions=lattice.reshape(-1, 2),
        rigid_positions=box.wall_particles(),
        box_position=np.array(box.initial_position),
        time_index=0,
        box_width=box.width,
    )


def stability_check(v_max, dt, dx):
    """Courant-style bound ``v_max * dt / dx <= 1``."""
    if dt <= 0 or dx <= 0:
        raise ConfigurationError("dt and dx must be positive")
    return v_max * dt / dx <= 1.0


_HALF_STENCIL = ((0, 0), (1, -1), (1, 0), (1, 1), (0, 1))


def neighbor_pairs(positions, cell_size):
    """Candidate pairs ``(i, j)``, i != j, whose cells are adjacent.

    Uniform spatial hash: grains are bucketed by integer cell, buckets are
    sorted once and each grain scans half of its 3x3 stencil so every pair
    appears exactly once.
    """
    n = positions.shape[0]
    if n < 2:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    cells = np.floor(positions / cell_size).astype(np.int64)
    cells -= cells.min(axis=0) - 1
    stride = cells[:, 1].max() + 3
    keys = cells[:, 0] * stride + cells[:, 1]
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    ii, jj = [], []
    for dx, dy in _HALF_STENCIL:
        target = keys + dx * stride + dy
        lo = np.searchsorted(sorted_keys, target, side="left")
        hi = np.searchsorted(sorted_keys, target, side="right")
        counts = hi - lo
        total = int(counts.sum())
        if total == 0:
            continue
        first = np.repeat(lo, counts)
        within = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
        j = order[first + within]
        i = np.repeat(np.arange(n), counts)
        if dx == 0 and dy == 0:
            keep = i < j
            i, j = i[keep], j[keep]
        ii.append(i)
        jj.append(j)
    if not ii:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    return np.concatenate(ii), np.concatenate(jj)


def _contact(v_rel, normal, overlap, grain):
    """Normal and tangential force on the first body of each contact."""
    vn = np.einsum("ij,ij->i", v_rel, normal)
    fn = np.maximum(grain.normal_stiffness * overlap - grain.normal_damping * vn, 0.0)
    vt = v_rel - vn[:, None] * normal
    speed_t = np.sqrt(np.einsum("ij,ij->i", vt, vt))
    ft = np.minimum(grain.normal_damping * speed_t, grain.friction_coeff * fn)
    with np.errstate(invalid="ignore", divide="ignore"):
        tdir = np.where(speed_t[:, None] > 0, vt / speed_t[:, None], 0.0)
    return fn[:, None] * normal - ft[:, None] * tdir


def contact_forces(positions, velocities, grain, width):
    """Total contact force on every grain (box frame)."""
    n = positions.shape[0]
    r = grain.radius
    force = np.zeros((n, 2))
    i, j = neighbor_pairs(positions, 2.0 * r)
    if i.size:
        d = positions[i] - positions[j]
        dist = np.sqrt(np.einsum("ij,ij->i", d, d))
        touching = (dist < 2.0 * r) & (dist > 0)
        i, j, d, dist = i[touching], j[touching], d[touching], dist[touching]
        if i.size:
            f = _contact(velocities[i] - velocities[j], d / dist[:, None], 2.0 * r - dist, grain)
            for axis in range(2):
                force[:, axis] += np.bincount(i, weights=f[:, axis], minlength=n)
                force[:, axis] -= np.bincount(j, weights=f[:, axis], minlength=n)
    walls = (
        (r - positions[:, 1], np.array([0.0, 1.0])),
        (r - positions[:, 0], np.array([1.0, 0.0])),
        (r - (width - positions[:, 0]), np.array([-1.0, 0.0])),
    )
    for overlap, normal in walls:
        hit = np.nonzero(overlap > 0)[0]
        if hit.size:
            normals = np.broadcast_to(normal, (hit.size, 2))
            force[hit] += _contact(velocities[hit], normals, overlap[hit], grain)
    return force


def step(frame, box_accel, dt, grain, time_index=None):
    """Advance one integration step with semi-implicit Euler.

    ``box_accel`` is the horizontal world-frame box acceleration (m/s^2) held
    over the step.  Returns a new frame; the input is not modified.
    """
    q = frame.normal_positions
    v = frame.normal_velocities
    a_box = np.array([float(box_accel), 0.0])
    force = contact_forces(q, v, grain, frame.box_width)
    accel = force / grain.mass
    accel[:, 1] -= grain.gravity
    accel -= a_box
    v_new = v + dt * accel
    q_new = q + dt * v_new
    vb = frame.box_velocity + dt * a_box
    b = frame.box_position + dt * vb
    idx = frame.time_index if time_index is None else time_index
    if not (np.all(np.isfinite(q_new)) and np.all(np.isfinite(v_new)) and np.all(np.isfinite(b))):
        raise SimulationDivergence(idx)
    return replace(
        frame,
        normal_positions=q_new,
        normal_velocities=v_new,
        box_position=b,
        box_velocity=vb,
        time_index=idx,
    )


def rollout(initial, motion, n_frames, substeps=20, dt_frame=1.0 / 60.0, grain=None, v_max=2.0):
    """Simulate ``n_frames`` output frames (the first is ``initial``)."""
    grain = GrainParams() if grain is None else grain
    if substeps < 1:
        raise ConfigurationError("substeps must be >= 1")
    if n_frames < 1:
        raise ConfigurationError("n_frames must be >= 1")
    dt = dt_frame / substeps
    if not stability_check(v_max, dt, grain.diameter):
        raise ConfigurationError(
            f"dt={dt:g} violates the Courant bound for v_max={v_max} and dx={grain.diameter}"
        )
    start = initial.time_index
    frames = [initial]
    state = initial
    for k in range(n_frames - 1):
        for s in range(substeps):
            t = (k * substeps + s) * dt
            state = step(state, motion.acceleration(t, k), dt, grain, time_index=start + k + 1)
        frames.append(state)
    return frames


def settle(frame, grain, n_steps, dt):
    """Run the box at rest, then zero all velocities."""
    for _ in range(n_steps):
        frame = step(frame, 0.0, dt, grain)
    return replace(frame, normal_velocities=np.zeros_like(frame.normal_velocities))


def total_energy(frame, grain):
    """Kinetic + gravitational + elastic energy in the box frame."""
    q, v = frame.normal_positions, frame.normal_velocities
    r, k = grain.radius, grain.normal_stiffness
    kinetic = 0.5 * grain.mass * float(np.sum(v * v))
    potential = grain.mass * grain.gravity * float(np.sum(q[:, 1]))
    elastic = 0.0
    i, j = neighbor_pairs(q, 2.0 * r)
    if i.size:
        d = q[i] - q[j]
        overlap = np.maximum(2.0 * r - np.sqrt(np.einsum("ij,ij->i", d, d)), 0.0)
        elastic += 0.5 * k * float(np.sum(overlap ** 2))
    for overlap in (r - q[:, 1], r - q[:, 0], r - (frame.box_width - q[:, 0])):
        elastic += 0.5 * k * float(np.sum(np.maximum(overlap, 0.0) ** 2))
    return kinetic + potential + elastic


def write_rollout(directory, frames, meta):
    """Write ``frames.csv`` and ``meta.json`` for one example."""
    os.makedirs(directory, exist_ok=True)
    lines = [",".join(FRAME_COLUMNS)]
    for fr in frames:
        bx, by = (repr(float(c)) for c in fr.box_position)
        pid = 0
        for kind, block in (("normal", fr.normal_positions), ("rigid", fr.rigid_positions)):
            for x, y in block:
                lines.append(f"{fr.time_index},{pid},{kind},{float(x)!r},{float(y)!r},{bx},{by}")
                pid += 1
    with open(os.path.join(directory, "frames.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(os.path.join(directory, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def read_rollout(directory):
    """Read an example written by :func:`write_rollout`.

    Returns ``(frames, meta)``; velocities are not stored and come back zero.
    """
    with open(os.path.join(directory, "meta.json")) as fh:
        meta = json.load(fh)
    with open(os.path.join(directory, "frames.csv")) as fh:
        header = fh.readline().strip().split(",")
        if tuple(header) != FRAME_COLUMNS:
            raise ConfigurationError(f"unexpected frames.csv header {header}")
        rows = [line.rstrip("\n").split(",") for line in fh if line.strip()]
    width = meta["box"]["width"]
    by_time = {}
    for t, pid, kind, x, y, bx, by in rows:
        entry = by_time.setdefault(int(t), {"normal": [], "rigid": [], "box": (float(bx), float(by))})
        entry[kind].append((int(pid), float(x), float(y)))
    frames = []
    for t in sorted(by_time):
        e = by_time[t]
        normal = np.array([[x, y] for _, x, y in sorted(e["normal"])]).reshape(-1, 2)
        rigid = np.array([[x, y] for _, x, y in sorted(e["rigid"])]).reshape(-1, 2)
        frames.append(
            ParticleFrame(normal, rigid, np.array(e["box"]), time_index=t, box_width=width)
        )
    return frames, meta


def frames_to_arrays(frames):
    """Stack a rollout into ``(N, n_n, 2)`` grain and ``(N, 2)`` box arrays."""
    q = np.stack([f.normal_positions for f in frames])
    b = np.stack([f.box_position for f in frames])
    return q, b
