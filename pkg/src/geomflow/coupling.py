"""Coupled pairs of diffusions driven by transported or mirrored noise.

Two copies of the same time-inhomogeneous diffusion start at different
points and share a single noise source: the second marginal consumes the
first marginal's increments mapped along the minimal connecting geodesic,
either by parallel displacement or additionally reflected in the
connecting direction (mirror). Mirrored pairs meet in finite time,
transported pairs contract at the damping rate, and either way the
terminal distance gives a computable upper bound on the transport
distance between the two laws.

Near the cut locus the transport map is ill defined; inside a fixed
margin band the second marginal falls back to an independent increment
and the step is counted as regularized, so the band's influence stays
auditable.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, replace
from typing import Iterator, Optional, Tuple, Union

import numpy as np
from numpy.polynomial.legendre import leggauss

from . import backend, frame_sde
from .errors import (
    ConfigInvalid,
    CutLocusAmbiguity,
    DegenerateInterval,
    InsufficientSamples,
    NoMinimizer,
)
from .flows import MetricFlow
from .montecarlo import Estimate, block_estimate, estimate_mean, map_paths
from .rng import NoiseStream

PARALLEL = "parallel"
MIRROR = "mirror"

#: time value standing in for "this path never coupled"
NOT_COUPLED = math.inf

# threshold factor: pairs closer than this many sqrt(step) count as met,
# since an exact grid hit of zero has probability zero
COUPLE_FACTOR = 10.0

# record-matrix entries kept by default before the node stride widens
RECORD_CAP = 4_000_000

# noise words drawn per chunk, capped to bound peak memory
BLOCK_WORD_CAP = 8_000_000

MIN_DRIFT_PATHS = 8

_RHO_TINY = 1e-12


def default_coupling_threshold(step: float) -> float:
    """Distance below which a pair on a grid of this step counts as met."""
    return COUPLE_FACTOR * math.sqrt(step)


def _normalize_mode(mode: str) -> str:
    low = str(mode).lower()
    if low not in (PARALLEL, MIRROR):
        raise ConfigInvalid(f"unknown coupling mode {mode!r}; use 'parallel' or 'mirror'")
    return low


@dataclass(frozen=True)
class RadialPull:
    """Bounded extra drift on the second marginal, pulling it toward the first.

    The field is -strength times the unit tangent of the connecting
    geodesic at the second marginal, so its inner product with the
    distance gradient is exactly -strength wherever the geodesic is
    unique.
    """

    strength: float

    def __post_init__(self):
        if not math.isfinite(self.strength):
            raise ConfigInvalid("radial pull strength must be finite")


ExtraDrift = Optional[RadialPull]


def _pull_strength(extra_drift: ExtraDrift) -> float:
    if extra_drift is None:
        return 0.0
    if isinstance(extra_drift, RadialPull):
        return float(extra_drift.strength)
    raise ConfigInvalid(
        "unsupported extra drift; only RadialPull (or None) is accepted"
    )


# ---------------------------------------------------------------------------
# coupled state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CoupledPair:
    """Joint state of two marginals at equal time.

    Once ``coupled`` is set the second marginal shadows the first
    exactly and the distance stays zero.
    """

    t: float
    x: np.ndarray
    u: np.ndarray
    y: np.ndarray
    v: np.ndarray
    mode: str
    coupled: bool = False
    extra_drift: ExtraDrift = None

    def distance(self, flow: MetricFlow) -> float:
        return float(flow.distance(self.t, self.x, self.y))


def start_pair(
    flow: MetricFlow,
    s: float,
    x,
    y,
    mode: str,
    extra_drift: ExtraDrift = None,
    u0=None,
    v0=None,
) -> CoupledPair:
    """Validated initial coupled state with canonical frames by default."""
    mode = _normalize_mode(mode)
    _pull_strength(extra_drift)
    first = frame_sde.initial_state(flow, s, x, u0)
    second = frame_sde.initial_state(flow, s, y, v0)
    return CoupledPair(
        t=float(s),
        x=first.x,
        u=first.u,
        y=second.x,
        v=second.u,
        mode=mode,
        coupled=False,
        extra_drift=extra_drift,
    )


def couple_step(
    flow: MetricFlow,
    pair: CoupledPair,
    dB: np.ndarray,
    dBp: np.ndarray,
    h: float,
    delta_couple: Optional[float] = None,
) -> CoupledPair:
    """Advance a coupled pair by one step of size h.

    The first marginal consumes dB; the second consumes the transported
    (or mirrored) copy, or the independent dBp inside the cut-locus
    margin band. The pair is declared met when the new distance falls
    below delta_couple (default 10 sqrt(h)), or when the mirrored
    distance proxy crosses zero within the step.
    """
    if h <= 0.0:
        raise ConfigInvalid("step size must be positive")
    flow.check_time(pair.t + h)
    dB = np.asarray(dB, dtype=float).reshape(1, 1, -1)
    dBp = np.asarray(dBp, dtype=float).reshape(1, 1, -1)
    if dB.shape[2] != flow.dim or dBp.shape[2] != flow.dim:
        raise ConfigInvalid("increment dimension does not match the flow")
    eng, _ = backend.engine_for(flow)
    if pair.coupled:
        # frozen pair: one marginal moves, the other shadows it
        out = eng.run_terminal(flow, pair.t, h, 1, pair.x, pair.u, dB)
        x1 = out["x"][0]
        u1 = out["u"][0]
        return replace(pair, t=pair.t + h, x=x1, u=u1, y=x1.copy(), v=u1.copy())
    if delta_couple is None:
        delta_couple = default_coupling_threshold(h)
    out = eng.run_coupled(
        flow,
        pair.t,
        h,
        1,
        pair.x,
        pair.u,
        pair.y,
        pair.v,
        dB,
        dBp,
        np.ones((1, 1)),
        pair.mode,
        pull_kappa=_pull_strength(pair.extra_drift),
        delta_couple=float(delta_couple),
    )
    return replace(
        pair,
        t=pair.t + h,
        x=out["x"][0],
        u=out["u"][0],
        y=out["y"][0],
        v=out["v"][0],
        coupled=bool(out["coupled_idx"][0] >= 0),
    )


# ---------------------------------------------------------------------------
# ensembles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CouplingPath:
    """One coupled trajectory's distance history at the record nodes."""

    path_id: int
    times: np.ndarray
    rho: np.ndarray
    regularized: np.ndarray
    coupled_time: float

    @property
    def coupled(self) -> bool:
        return math.isfinite(self.coupled_time)


@dataclass
class CouplingEnsemble:
    """Batch of coupled trajectories sharing a start, grid and mode."""

    mode: str
    s: float
    t: float
    h: float
    n_steps: int
    delta_couple: float
    x_end: np.ndarray
    y_end: np.ndarray
    rho_end: np.ndarray
    t0_index: np.ndarray
    reg_count: np.ndarray
    record_nodes: Optional[np.ndarray] = None
    record_times: Optional[np.ndarray] = None
    rho_record: Optional[np.ndarray] = None
    reg_record: Optional[np.ndarray] = None

    @property
    def n_paths(self) -> int:
        return int(self.t0_index.shape[0])

    @property
    def t0_times(self) -> np.ndarray:
        """Per-path meeting time, NOT_COUPLED where the pair never met."""
        idx = self.t0_index
        return np.where(idx >= 0, self.s + self.h * idx, NOT_COUPLED)

    @property
    def reg_fraction(self) -> float:
        """Fraction of all marginal steps that used independent noise."""
        total = self.n_paths * self.n_steps
        return float(self.reg_count.sum()) / total if total else 0.0

    def coupled_fraction(self, by_time: Optional[float] = None) -> float:
        t0 = self.t0_times
        cutoff = self.t if by_time is None else float(by_time)
        return float(np.mean(t0 <= cutoff + 1e-12))

    def _require_records(self):
        if self.rho_record is None:
            raise ConfigInvalid(
                "ensemble was simulated without distance records (rho_stride=0)"
            )

    def paths(self, max_paths: Optional[int] = None) -> Iterator[CouplingPath]:
        self._require_records()
        t0 = self.t0_times
        n = self.n_paths if max_paths is None else min(self.n_paths, int(max_paths))
        for i in range(n):
            yield CouplingPath(
                path_id=i,
                times=self.record_times,
                rho=self.rho_record[i],
                regularized=self.reg_record[i].astype(bool),
                coupled_time=float(t0[i]),
            )

    def to_csv(self, dest: Union[str, io.TextIOBase], max_paths: Optional[int] = None) -> None:
        """Write (path_id, k, t, rho, coupled_flag, regularized_flag) rows."""
        self._require_records()
        own = isinstance(dest, (str, bytes, os.PathLike))
        fh = open(dest, "w", newline="") if own else dest
        try:
            writer = csv.writer(fh)
            writer.writerow(
                ["path_id", "k", "t", "rho", "coupled_flag", "regularized_flag"]
            )
            nodes = self.record_nodes
            times = self.record_times
            n = self.n_paths if max_paths is None else min(self.n_paths, int(max_paths))
            for i in range(n):
                t0i = self.t0_index[i]
                for j, node in enumerate(nodes):
                    met = int(t0i >= 0 and node >= t0i)
                    writer.writerow(
                        [
                            i,
                            int(node),
                            f"{times[j]:.12g}",
                            f"{self.rho_record[i, j]:.12g}",
                            met,
                            int(self.reg_record[i, j]),
                        ]
                    )
        finally:
            if own:
                fh.close()


def simulate_coupling(
    flow: MetricFlow,
    x,
    y,
    s: float,
    t: float,
    mode: str,
    extra_drift: ExtraDrift = None,
    step: float = 1e-3,
    n_paths: int = 1000,
    seed: int = 0,
    u0=None,
    v0=None,
    delta_couple: Optional[float] = None,
    rho_stride: Optional[int] = None,
    threads: Optional[int] = None,
    backend_name: Optional[str] = None,
) -> CouplingEnsemble:
    """Simulate n_paths coupled pairs from (x, y) over [s, t].

    Meeting detection depends on the mode. Transported (parallel) pairs
    count as met when the distance drops below delta_couple, which
    defaults to 10 sqrt(step). Mirrored pairs instead use a zero-crossing
    proxy plus a diffusive bridge draw for the distance's sub-grid
    minimum, which reproduces the continuous meeting law without a
    grid-scale threshold; pass delta_couple explicitly to add the
    threshold on top.

    rho_stride controls how often the distance is recorded (0 disables
    records; None picks the finest stride whose record matrix stays
    under a fixed memory cap).
    """
    mode = _normalize_mode(mode)
    if t <= s:
        raise DegenerateInterval("terminal time must exceed the start time")
    flow.check_time(t)
    if n_paths < 1:
        raise ConfigInvalid("need at least one path")
    if step <= 0.0:
        raise ConfigInvalid("step size must be positive")
    first = frame_sde.initial_state(flow, s, x, u0)
    second = frame_sde.initial_state(flow, s, y, v0)
    if float(flow.distance(s, first.x, second.x)) < _RHO_TINY:
        raise ConfigInvalid("coupling requires distinct starting points")
    n_steps = max(1, round((t - s) / step))
    h = (t - s) / n_steps
    if delta_couple is None:
        delta_couple = default_coupling_threshold(h) if mode == PARALLEL else 0.0
    if rho_stride is None:
        rho_stride = max(1, math.ceil(n_paths * (n_steps + 1) / RECORD_CAP))
    rho_stride = int(rho_stride)

    if rho_stride > 0:
        rec_nodes = list(range(0, n_steps + 1, rho_stride))
        if rec_nodes[-1] != n_steps:
            rec_nodes.append(n_steps)
        n_rec = len(rec_nodes)
    else:
        rec_nodes = None
        n_rec = 0

    d = flow.dim
    m = first.x.shape[0]
    kappa = _pull_strength(extra_drift)
    eng, _ = backend.engine_for(flow, backend_name)
    stream = NoiseStream(seed, "coupling")
    rooth = math.sqrt(h)

    def run_chunk(lo, hi):
        normals, uniforms = stream.block(lo, hi, n_steps, 2 * d, 1)
        dB = rooth * normals[:, :, :d]
        dBp = rooth * normals[:, :, d:]
        out = eng.run_coupled(
            flow,
            s,
            h,
            n_steps,
            first.x,
            first.u,
            second.x,
            second.u,
            dB,
            dBp,
            uniforms,
            mode,
            pull_kappa=kappa,
            delta_couple=float(delta_couple),
            rho_stride=rho_stride,
        )
        cols = [
            out["x"],
            out["y"],
            out["rho"][:, None],
            out["coupled_idx"][:, None].astype(float),
            out["reg_count"][:, None].astype(float),
        ]
        if rho_stride > 0:
            cols.append(out["rho_record"])
            cols.append(out["reg_record"].astype(float))
        return np.concatenate(cols, axis=1)

    width = 2 * m + 3 + 2 * n_rec
    words_per_path = max(1, n_steps * (2 * d + 1))
    chunk = int(min(16384, max(256, BLOCK_WORD_CAP // words_per_path)))
    packed = map_paths(run_chunk, n_paths, width, chunk_size=chunk, threads=threads)

    x_end = packed[:, :m]
    y_end = packed[:, m : 2 * m]
    rho_end = packed[:, 2 * m]
    t0_index = packed[:, 2 * m + 1].astype(np.int64)
    reg_count = packed[:, 2 * m + 2].astype(np.int64)
    ens = CouplingEnsemble(
        mode=mode,
        s=float(s),
        t=float(t),
        h=h,
        n_steps=n_steps,
        delta_couple=float(delta_couple),
        x_end=x_end,
        y_end=y_end,
        rho_end=rho_end,
        t0_index=t0_index,
        reg_count=reg_count,
    )
    if rho_stride > 0:
        base = 2 * m + 3
        nodes = np.asarray(rec_nodes, dtype=np.int64)
        ens.record_nodes = nodes
        ens.record_times = s + h * nodes
        ens.rho_record = packed[:, base : base + n_rec]
        ens.reg_record = packed[:, base + n_rec : base + 2 * n_rec] > 0.5
    return ens


# ---------------------------------------------------------------------------
# index form and distance drift
# ---------------------------------------------------------------------------


def _profile_values(kappa: float, rho: float, sigma: np.ndarray):
    """Boundary-pinned transverse profile u and u' on the geodesic."""
    if kappa > 0.0:
        r = math.sqrt(kappa)
        half = 0.5 * r * rho
        if half >= 0.5 * math.pi - 1e-9:
            raise CutLocusAmbiguity(
                "conjugate point reached: boundary-pinned profile blows up"
            )
        den = math.cos(half)
        u = np.cos(r * (sigma - 0.5 * rho)) / den
        up = -r * np.sin(r * (sigma - 0.5 * rho)) / den
        return u, up
    if kappa < 0.0:
        r = math.sqrt(-kappa)
        den = math.cosh(0.5 * r * rho)
        u = np.cosh(r * (sigma - 0.5 * rho)) / den
        up = r * np.sinh(r * (sigma - 0.5 * rho)) / den
        return u, up
    return np.ones_like(sigma), np.zeros_like(sigma)


def _gauss_nodes(rho: float, n_quad: int):
    z, w = leggauss(int(n_quad))
    return 0.5 * rho * (z + 1.0), 0.5 * rho * w


def _index_profile(kappa: float, rho: float, dperp: int, n_quad: int) -> float:
    if dperp <= 0:
        return 0.0
    sigma, w = _gauss_nodes(rho, n_quad)
    u, up = _profile_values(kappa, rho, sigma)
    return dperp * float(w @ (up * up - kappa * u * u))


def _index_bvp(kappa: float, rho: float, dperp: int, n_quad: int) -> float:
    """Independent route: solve the matrix boundary problem numerically.

    Integrates the second-order transverse system J'' = -kappa J as two
    fundamental matrix solutions, matches J(0) = J(rho) = I, and
    quadratures tr(J'^T J' - kappa J^T J). Constant curvature makes the
    system diagonal, but nothing here exploits that.
    """
    if dperp <= 0:
        return 0.0
    from scipy.integrate import solve_ivp

    k = dperp
    eye = np.eye(k)

    def rhs(_s, state):
        mat = state.reshape(2, k, k)
        return np.concatenate([mat[1].ravel(), (-kappa * mat[0]).ravel()])

    def fundamental(u0, v0):
        y0 = np.concatenate([u0.ravel(), v0.ravel()])
        sol = solve_ivp(
            rhs,
            (0.0, rho),
            y0,
            method="DOP853",
            dense_output=True,
            rtol=1e-10,
            atol=1e-12,
        )
        if not sol.success:
            raise NoMinimizer("transverse boundary problem failed to integrate")
        return sol

    sol_a = fundamental(eye, np.zeros((k, k)))
    sol_b = fundamental(np.zeros((k, k)), eye)

    def parts(sol, sigma):
        mat = sol.sol(sigma).reshape(2, k, k)
        return mat[0], mat[1]

    a_end, _ = parts(sol_a, rho)
    b_end, _ = parts(sol_b, rho)
    try:
        coef = np.linalg.solve(b_end, eye - a_end)
    except np.linalg.LinAlgError:
        raise CutLocusAmbiguity("conjugate point: boundary matching is singular")
    sigma, w = _gauss_nodes(rho, n_quad)
    total = 0.0
    for sg, wg in zip(sigma, w):
        ua, va = parts(sol_a, sg)
        ub, vb = parts(sol_b, sg)
        uj = ua + ub @ coef
        vj = va + vb @ coef
        total += wg * (float(np.sum(vj * vj)) - kappa * float(np.sum(uj * uj)))
    return total


def index_form(
    flow: MetricFlow,
    t: float,
    x,
    y,
    n_quad: int = 64,
    solver: str = "profile",
) -> float:
    """Second-variation index of the connecting geodesic plus drift terms.

    Boundary-pinned transverse fields (value one at both endpoints, a
    parallel frame times a scalar profile in between) are summed over the
    dim-1 orthogonal directions; the drift contributes its directional
    derivatives of the distance at both endpoints. Negative values drive
    contraction of the pair distance.

    solver='profile' integrates the closed-form scalar profile;
    solver='bvp' re-solves the transverse system as a numeric boundary
    problem and serves as a cross-check.
    """
    flow.check_time(t)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    rho, e_x, e_y = flow.connecting_unit(t, x, y)
    rho = float(rho)
    if rho < _RHO_TINY:
        raise NoMinimizer("coincident points admit no unit-speed geodesic")
    margin = float(flow.cut_margin(t, x, y))
    if margin <= 1e-9:
        raise CutLocusAmbiguity("point pair lies on (or numerically at) the cut locus")
    kappa = float(flow.sectional_curvature(t))
    dperp = flow.dim - 1
    if solver == "profile":
        geo = _index_profile(kappa, rho, dperp, n_quad)
    elif solver == "bvp":
        geo = _index_bvp(kappa, rho, dperp, n_quad)
    else:
        raise ConfigInvalid(f"unknown index solver {solver!r}; use 'profile' or 'bvp'")
    zx = flow.drift.value(t, x[None, :])[0]
    zy = flow.drift.value(t, y[None, :])[0]
    drift_term = float(flow.inner(t, y, zy, e_y)) - float(flow.inner(t, x, zx, e_x))
    return geo + drift_term


def rho_drift_bound(
    flow: MetricFlow,
    t: float,
    x,
    y,
    extra_drift: ExtraDrift = None,
    n_quad: int = 64,
) -> float:
    """Upper bound for the drift of the pair distance at this configuration.

    Sum of half the metric time-slope integrated along the geodesic, the
    index form (with drift terms), and the extra-drift contribution.
    """
    flow.check_time(t)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    rho = float(flow.distance(t, x, y))
    if rho < _RHO_TINY:
        raise NoMinimizer("coincident points admit no unit-speed geodesic")
    if flow.kind == "torus":
        v0 = np.asarray(flow.log_map(t, x, y), dtype=float)
        adot = np.asarray([sc.slope(t) for sc in flow.axis_scales], dtype=float)
        slope_term = 0.5 * float(adot @ (v0 * v0)) / rho
    else:
        cval = float(flow.scale.value(t))
        slope_term = 0.5 * float(flow.scale.slope(t)) / cval * rho
    return slope_term + index_form(flow, t, x, y, n_quad) - _pull_strength(extra_drift)


def empirical_rho_drift(
    ensemble: CouplingEnsemble,
    window: Tuple[float, float],
) -> Estimate:
    """Regress distance increments against elapsed time inside a window.

    Uses only paths that never coupled within the window; each path
    contributes a through-origin slope of rho(t) - rho(t_lo) against
    t - t_lo over the record nodes, and the estimate averages the
    per-path slopes.
    """
    ensemble._require_records()
    t_lo, t_hi = float(window[0]), float(window[1])
    if t_hi <= t_lo:
        raise ConfigInvalid("window must have positive width")
    times = ensemble.record_times
    sel = np.nonzero((times >= t_lo - 1e-12) & (times <= t_hi + 1e-12))[0]
    if sel.size < 2:
        raise InsufficientSamples(
            "window covers fewer than two distance record nodes"
        )
    free = ensemble.t0_times > t_hi
    rho_w = ensemble.rho_record[free][:, sel]
    if rho_w.shape[0] < MIN_DRIFT_PATHS:
        raise InsufficientSamples(
            f"only {rho_w.shape[0]} uncoupled paths survive the window"
        )
    w = times[sel[1:]] - times[sel[0]]
    dy = rho_w[:, 1:] - rho_w[:, :1]
    slopes = dy @ w / float(w @ w)
    return estimate_mean(slopes)


def wasserstein_upper(
    flow: MetricFlow,
    x,
    y,
    s: float,
    t: float,
    p: float = 1.0,
    mode: str = PARALLEL,
    n_paths: int = 2000,
    step: float = 1e-3,
    seed: int = 0,
    extra_drift: ExtraDrift = None,
    threads: Optional[int] = None,
    backend_name: Optional[str] = None,
) -> Estimate:
    """Upper bound on the p-transport distance between the two time-t laws.

    Any coupling dominates the infimum, so the p-th moment of the pair
    distance at time t is a valid upper bound. Nonlinearity in the mean
    is handled by block resampling.
    """
    if p < 1.0:
        raise ConfigInvalid("transport order p must be at least 1")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if float(flow.distance(s, x, y)) < _RHO_TINY:
        return Estimate(0.0, 0.0, int(n_paths))
    ens = simulate_coupling(
        flow,
        x,
        y,
        s,
        t,
        mode,
        extra_drift=extra_drift,
        step=step,
        n_paths=n_paths,
        seed=seed,
        rho_stride=0,
        threads=threads,
        backend_name=backend_name,
    )
    powered = ens.rho_end**p
    return block_estimate(powered, lambda b: float(np.mean(b)) ** (1.0 / p))
