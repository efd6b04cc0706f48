"""Horizontal frame-valued Euler scheme, single-path interface.

The process solves dX = sqrt(2) u dB + Z dt in the frame lift: the driving
increment is read in the current orthonormal frame, the point moves along
the geodesic with that initial velocity, the frame is parallel transported,
corrected for the metric's time slope, and re-orthonormalized against the
new metric. Batched Monte Carlo uses the engine modules directly; this
module exists for stepwise inspection, diagnostics and small studies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _engine_py
from .errors import FrameNotOrthonormal
from .flows import MetricFlow
from .rng import NoiseStream

FRAME_TOL = 1e-6


@dataclass
class FramePoint:
    """Instantaneous state of the lifted process: time, point, frame columns."""

    t: float
    x: np.ndarray
    u: np.ndarray

    def copy(self) -> "FramePoint":
        return FramePoint(self.t, self.x.copy(), self.u.copy())


@dataclass
class PathSample:
    """Full record of one simulated path on a uniform grid."""

    times: np.ndarray       # (N+1,)
    points: np.ndarray      # (N+1, m)
    frames: np.ndarray      # (N+1, m, d)
    increments: np.ndarray  # (N, d) Brownian increments, variance h each
    defects: np.ndarray     # (N+1,) pre-orthonormalization Gram defects

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    @property
    def defect_max(self) -> float:
        return float(np.max(self.defects))

    def state(self, k: int) -> FramePoint:
        return FramePoint(float(self.times[k]), self.points[k].copy(), self.frames[k].copy())


def initial_state(flow: MetricFlow, s: float, x0, u0=None) -> FramePoint:
    """Validated starting state; canonical frame when none is supplied."""
    x0 = np.asarray(x0, dtype=float)
    flow.check_time(s)
    flow.validate_point(x0)
    if u0 is None:
        u0 = flow.canonical_frame(s, x0)
    else:
        u0 = np.asarray(u0, dtype=float)
        defect = flow.frame_defect(s, x0, u0)
        if defect > FRAME_TOL:
            raise FrameNotOrthonormal(
                f"initial frame Gram defect {defect:.3e} exceeds {FRAME_TOL}"
            )
    return FramePoint(float(s), x0.copy(), u0.copy())


def horizontal_step(flow: MetricFlow, state: FramePoint, dB: np.ndarray, h: float):
    """Advance one step. Returns the new state and the pre-GS Gram defect.

    dB is the raw Brownian increment (variance h per frame direction); the
    sqrt(2) diffusion scaling is applied internally.
    """
    if h <= 0.0:
        raise ValueError("step size must be positive")
    dB = np.asarray(dB, dtype=float).reshape(1, 1, flow.dim)
    out = _engine_py.run_record(flow, state.t, h, 1, state.x, state.u, dB)
    new = FramePoint(state.t + h, out["x"][0, 1], out["u"][0, 1])
    return new, float(out["defect"][1])


def reorthonormalize(flow: MetricFlow, state: FramePoint) -> tuple[FramePoint, float]:
    """Project the frame back onto the g_t orthonormal set; returns the defect fixed."""
    u, defect = flow.gram_schmidt(state.t, state.x, state.u)
    return FramePoint(state.t, state.x.copy(), u), defect


def simulate_path(
    flow: MetricFlow,
    s: float,
    t: float,
    x0,
    n_steps: int,
    seed: int = 0,
    u0=None,
    stream: NoiseStream = None,
    path_index: int = 0,
) -> PathSample:
    """Simulate one path from time s to t on a uniform grid.

    Reproducible: the increments come from the path_index slot of a noise
    stream keyed by the seed, so the same arguments give the same path no
    matter what else has been simulated.
    """
    if t <= s:
        raise ValueError("terminal time must exceed the start time")
    if n_steps < 1:
        raise ValueError("need at least one step")
    start = initial_state(flow, s, x0, u0)
    h = (t - s) / n_steps
    if stream is None:
        stream = NoiseStream(seed, "single-path")
    normals, _ = stream.block(path_index, path_index + 1, n_steps, flow.dim)
    dB = math.sqrt(h) * normals
    rec = _engine_py.run_record(flow, s, h, n_steps, start.x, start.u, dB)
    return PathSample(
        times=rec["t"],
        points=rec["x"][0],
        frames=rec["u"][0],
        increments=dB[0],
        defects=rec["defect"],
    )
