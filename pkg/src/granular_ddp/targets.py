"""Parametric target shapes realized as fullspace particle arrangements.

A target is a column profile over ``[x_left, x_right]``.  Columns sit on a
square lattice of the grain spacing, and the ``n_n`` particles are shared out
between columns in proportion to the profile height (largest-remainder
rounding), so every realization has exactly ``n_n`` sites at uniform density.

Sites are ordered row by row from the floor, left to right, like
:func:`granular_ddp.sim.init_block`.  When a reference arrangement is given,
sites are instead matched to its particles by minimum total squared distance,
so that particle ``i`` of the target is a place particle ``i`` can plausibly
reach.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .exceptions import ConfigurationError, ShapeError

KINDS = ("slope", "rectangle", "heightfield")


@dataclass(frozen=True)
class TargetShape:
    kind: str
    x_left: float
    x_right: float
    angle_deg: float = 0.0
    heights: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown target kind {self.kind!r}")
        if self.x_right <= self.x_left:
            raise ConfigurationError("target needs x_right > x_left")
        object.__setattr__(self, "heights", tuple(float(h) for h in self.heights))
        if self.kind == "heightfield" and len(self.heights) < 2:
            raise ConfigurationError("heightfield target needs at least two heights")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigurationError(f"bad target specification: {exc}") from exc

    def to_dict(self):
        return {
            "kind": self.kind, "x_left": self.x_left, "x_right": self.x_right,
            "angle_deg": self.angle_deg, "heights": list(self.heights),
        }

    def column_weights(self, xs, n_n, spacing):
        if self.kind == "rectangle":
            return np.ones_like(xs)
        if self.kind == "heightfield":
            grid = np.linspace(self.x_left, self.x_right, len(self.heights))
            return np.maximum(np.interp(xs, grid, self.heights), 0.0)
        mean_h = n_n * spacing / xs.size
        mid = 0.5 * (self.x_left + self.x_right)
        # positive angle: higher on the left
        return np.maximum(mean_h + math.tan(math.radians(self.angle_deg)) * (mid - xs), 0.0)


def _apportion(weights, total):
    if weights.sum() <= 0:
        raise ConfigurationError("target profile has zero area")
    quota = total * weights / weights.sum()
    counts = np.floor(quota).astype(int)
    rest = total - counts.sum()
    # largest remainder, ties to the left
    order = np.lexsort((np.arange(weights.size), -(quota - counts)))
    counts[order[:rest]] += 1
    return counts


def realize(target, n_n, box_width, spacing, reference=None):
    """``(n_n, 2)`` box-frame positions of the target arrangement."""
    if target.x_left < -1e-12 or target.x_right > box_width + 1e-12:
        raise ConfigurationError(
            f"target [{target.x_left}, {target.x_right}] does not fit in a box of width {box_width}"
        )
    ncols = int(math.floor((target.x_right - target.x_left) / spacing + 1e-9))
    if ncols < 1:
        raise ConfigurationError("target narrower than one grain")
    xs = target.x_left + (np.arange(ncols) + 0.5) * spacing
    counts = _apportion(target.column_weights(xs, n_n, spacing), n_n)
    sites = [
        (j, i) for j in range(counts.max()) for i in range(ncols) if j < counts[i]
    ]
    pos = np.array([[xs[i], (j + 0.5) * spacing] for j, i in sites]).reshape(-1, 2)
    if reference is None:
        return pos
    reference = np.asarray(reference, dtype=float)
    if reference.shape != pos.shape:
        raise ShapeError(f"reference arrangement has shape {reference.shape}, expected {pos.shape}")
    cost = ((reference[:, None, :] - pos[None, :, :]) ** 2).sum(axis=2)
    rows, cols = linear_sum_assignment(cost)
    out = np.empty_like(pos)
    out[rows] = pos[cols]
    return out
