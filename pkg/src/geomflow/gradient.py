"""Semigroup evaluation and derivative estimators.

Three gradient representations are implemented, all returning estimates in
the coordinates of the starting frame:

* pathwise: damped transport applied to the terminal gradient;
* integrated: terminal value times a weighted stochastic integral of the
  driving noise, weight profile h with h(s) = 0, h(t) = 1;
* local: the integrated form with the inverse-square time-changed profile
  supported in a ball, so only the field's values inside the ball and the
  exit data enter.

Forward and backward generator-consistency residuals act as discretization
diagnostics, and the recovery functions reproduce pointwise curvature and
gradient data from small-time semigroup differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dataclass_field
from typing import Optional

import numpy as np

from . import backend as backend_mod
from . import damped
from .errors import (
    ConfigInvalid,
    MissingGradient,
    NestedBudgetExceeded,
    SignalBelowNoise,
)
from .flows import MetricFlow
from .montecarlo import (
    DEFAULT_CHUNK,
    Estimate,
    block_bounds,
    estimate_mean,
    map_paths,
)
from .rng import NoiseStream

SQRT2 = math.sqrt(2.0)

# hard ceiling on nested continuation work (path-steps)
NESTED_BUDGET = 50_000_000


# ---------------------------------------------------------------------------
# weight profiles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HProfile:
    """Weight profile for the integrated estimator.

    ``linear`` ramps from 0 at the start time to 1 at the end; ``custom``
    wraps a callable r -> h'(r) whose integral over [s, t] must be 1 (the
    caller's responsibility). The state-dependent time-changed profile is
    built into the local estimator and has no grid representation here.
    """

    kind: str = "linear"
    slope_fn: Optional[object] = None

    def __post_init__(self):
        if self.kind not in ("linear", "custom"):
            raise ConfigInvalid(f"unknown weight profile {self.kind!r}")
        if self.kind == "custom" and self.slope_fn is None:
            raise ConfigInvalid("custom weight profile requires slope_fn")

    def slope_grid(self, s: float, t: float, n_steps: int) -> np.ndarray:
        nodes = s + (t - s) / n_steps * np.arange(n_steps)
        if self.kind == "linear":
            return np.full(n_steps, 1.0 / (t - s))
        return np.asarray([float(self.slope_fn(r)) for r in nodes], dtype=float)


def linear_profile() -> HProfile:
    return HProfile("linear")


def custom_profile(slope_fn) -> HProfile:
    return HProfile("custom", slope_fn=slope_fn)


# ---------------------------------------------------------------------------
# results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GradientEstimate:
    """Estimated gradient of the semigroup in starting-frame coordinates."""

    coords: Estimate          # vector mean/stderr, length d
    frame: np.ndarray         # (m, d) starting frame columns
    method: str
    n_paths: int
    detail: dict = dataclass_field(default_factory=dict)

    @property
    def ambient(self) -> np.ndarray:
        return self.frame @ np.asarray(self.coords.mean)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.coords.mean))

    def as_dict(self) -> dict:
        return {
            "method": self.method,
            "coords": list(np.atleast_1d(self.coords.mean)),
            "stderr": list(np.atleast_1d(self.coords.stderr)),
            "ambient": list(self.ambient),
            "n_paths": self.n_paths,
            **({"detail": self.detail} if self.detail else {}),
        }


def _resolve_start(flow: MetricFlow, s: float, x, u0):
    x = np.asarray(x, dtype=float)
    flow.validate_point(x)
    if u0 is None:
        u0 = flow.canonical_frame(s, x)
    else:
        u0 = np.asarray(u0, dtype=float)
    return x, u0


def _transport_weights(flow: MetricFlow, s: float, t: float, n_steps: int):
    """Deterministic transport norms q_k; None when frame-dependent."""
    if not flow.has_isotropic_damping:
        return None
    return damped.transport_factor_grid(flow, s, (t - s) / n_steps, n_steps)


# ---------------------------------------------------------------------------
# semigroup
# ---------------------------------------------------------------------------


def semigroup(
    flow: MetricFlow,
    fieldf,
    s: float,
    t: float,
    x,
    n_paths: int,
    n_steps: int,
    seed: int = 0,
    u0=None,
    threads: Optional[int] = None,
    backend: Optional[str] = None,
) -> Estimate:
    """Monte Carlo value of the semigroup applied to a field at one point."""
    x, u0 = _resolve_start(flow, s, x, u0)
    engine, _ = backend_mod.engine_for(flow, backend)
    h = (t - s) / n_steps
    root_h = math.sqrt(h)
    stream = NoiseStream(seed, "semigroup")

    def fn(lo, hi):
        normals, _ = stream.block(lo, hi, n_steps, flow.dim)
        out = engine.run_terminal(flow, s, h, n_steps, x, u0, root_h * normals)
        return np.atleast_1d(fieldf.value(t, out["x"]))

    samples = map_paths(fn, n_paths, 1, threads=threads)[:, 0]
    return estimate_mean(samples)


def semigroup_batch(
    flow: MetricFlow,
    fieldf,
    s: float,
    t: float,
    xs: np.ndarray,
    n_inner: int,
    n_steps: int,
    stream: NoiseStream,
    backend: Optional[str] = None,
    share_noise: bool = False,
):
    """Semigroup values at several starts, one vectorized inner run.

    Returns (means, stderrs) of shape (k,). With share_noise the same
    increments drive every start (the noise block is indexed by inner path
    only), so differences across nearby starts see smooth pathwise
    functions instead of independent noise. Without it, each (start, inner)
    pair gets its own block and two calls with the same stream are still
    common-random-number coupled.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    k = xs.shape[0]
    engine, _ = backend_mod.engine_for(flow, backend)
    h = (t - s) / n_steps
    root_h = math.sqrt(h)
    us = flow.canonical_frame(s, xs)
    total = k * n_inner
    if total * n_steps > NESTED_BUDGET:
        raise NestedBudgetExceeded(
            f"nested run of {total} paths x {n_steps} steps exceeds the budget"
        )
    x_tiled = np.repeat(xs, n_inner, axis=0)
    u_tiled = np.repeat(us, n_inner, axis=0)
    vals = np.empty(total)
    chunk = max(1, DEFAULT_CHUNK)
    if share_noise:
        # one inner-indexed block, reused for every start
        for lo in range(0, n_inner, chunk):
            hi = min(lo + chunk, n_inner)
            normals, _ = stream.block(lo, hi, n_steps, flow.dim)
            for j in range(k):
                out = engine.run_terminal(
                    flow, s, h, n_steps,
                    x_tiled[j * n_inner + lo:j * n_inner + hi],
                    u_tiled[j * n_inner + lo:j * n_inner + hi],
                    root_h * normals,
                )
                vals[j * n_inner + lo:j * n_inner + hi] = np.atleast_1d(
                    fieldf.value(t, out["x"])
                )
    else:
        for lo in range(0, total, chunk):
            hi = min(lo + chunk, total)
            normals, _ = stream.block(lo, hi, n_steps, flow.dim)
            out = engine.run_terminal(
                flow, s, h, n_steps, x_tiled[lo:hi], u_tiled[lo:hi], root_h * normals
            )
            vals[lo:hi] = np.atleast_1d(fieldf.value(t, out["x"]))
    grouped = vals.reshape(k, n_inner)
    means = grouped.mean(axis=1)
    stderrs = grouped.std(axis=1, ddof=1) / math.sqrt(n_inner)
    return means, stderrs


# ---------------------------------------------------------------------------
# derivative estimators
# ---------------------------------------------------------------------------


def bismut_pathwise(
    flow: MetricFlow,
    fieldf,
    s: float,
    t: float,
    x,
    n_paths: int,
    n_steps: int,
    seed: int = 0,
    u0=None,
    threads: Optional[int] = None,
    backend: Optional[str] = None,
) -> GradientEstimate:
    """Damped transport of the terminal gradient, averaged over paths.

    Requires the field to expose an analytic gradient. The estimate lives
    in the starting frame; multiply by the frame columns for an ambient
    vector.
    """
    if not fieldf.has_gradient:
        raise MissingGradient("pathwise estimator needs the field gradient")
    x, u0 = _resolve_start(flow, s, x, u0)
    q = _transport_weights(flow, s, t, n_steps)
    if q is None:
        return _pathwise_matrix_route(
            flow, fieldf, s, t, x, u0, n_paths, n_steps, seed, threads
        )
    engine, _ = backend_mod.engine_for(flow, backend)
    h = (t - s) / n_steps
    root_h = math.sqrt(h)
    q_end = float(q[-1])
    stream = NoiseStream(seed, "bismut-pathwise")
    d = flow.dim

    def fn(lo, hi):
        normals, _ = stream.block(lo, hi, n_steps, d)
        out = engine.run_terminal(flow, s, h, n_steps, x, u0, root_h * normals)
        grad = fieldf.gradient(t, out["x"])
        coords = flow.to_frame(t, out["x"], out["u"], grad)
        return q_end * coords

    samples = map_paths(fn, n_paths, d, threads=threads)
    return GradientEstimate(
        coords=estimate_mean(samples),
        frame=u0,
        method="pathwise",
        n_paths=n_paths,
        detail={"transport_norm": q_end},
    )


def _pathwise_matrix_route(flow, fieldf, s, t, x, u0, n_paths, n_steps, seed, threads):
    """Frame-dependent damping: record paths, evolve the transport matrix."""
    h = (t - s) / n_steps
    root_h = math.sqrt(h)
    stream = NoiseStream(seed, "bismut-pathwise")
    d = flow.dim
    tgrid = s + h * np.arange(n_steps + 1)
    from . import _engine_py

    def fn(lo, hi):
        normals, _ = stream.block(lo, hi, n_steps, d)
        rec = _engine_py.run_record(flow, s, h, n_steps, x, u0, root_h * normals)
        q = damped.evolve_transport_along(flow, tgrid, rec["x"], rec["u"])
        xt = rec["x"][:, -1]
        ut = rec["u"][:, -1]
        grad = fieldf.gradient(t, xt)
        coords = flow.to_frame(t, xt, ut, grad)
        # adjoint of the transport acts on the terminal coordinates
        return np.einsum("nji,nj->ni", q, coords)

    samples = map_paths(fn, n_paths, d, threads=threads, chunk_size=512)
    return GradientEstimate(
        coords=estimate_mean(samples),
        frame=u0,
        method="pathwise",
        n_paths=n_paths,
        detail={"transport": "matrix"},
    )


def bismut_integrated(
    flow: MetricFlow,
    fieldf,
    s: float,
    t: float,
    x,
    n_paths: int,
    n_steps: int,
    seed: int = 0,
    u0=None,
    profile: Optional[HProfile] = None,
    threads: Optional[int] = None,
    backend: Optional[str] = None,
) -> GradientEstimate:
    """Derivative from terminal values only, no field gradient required.

    Estimator: terminal value times the stochastic integral of
    h'(r) * (transport norm) against the driving increments, divided by
    sqrt(2) to undo the diffusion scaling.
    """
    x, u0 = _resolve_start(flow, s, x, u0)
    q = _transport_weights(flow, s, t, n_steps)
    if q is None:
        raise ConfigInvalid(
            "integrated estimator requires frame-independent damping; "
            "use the pathwise route for custom drifts"
        )
    if profile is None:
        profile = linear_profile()
    engine, _ = backend_mod.engine_for(flow, backend)
    h = (t - s) / n_steps
    root_h = math.sqrt(h)
    weights = profile.slope_grid(s, t, n_steps) * q[:-1]
    stream = NoiseStream(seed, "bismut-integrated")
    d = flow.dim

    def fn(lo, hi):
        normals, _ = stream.block(lo, hi, n_steps, d)
        out = engine.run_terminal(
            flow, s, h, n_steps, x, u0, root_h * normals, weights=weights
        )
        vals = np.atleast_1d(fieldf.value(t, out["x"]))
        return vals[:, None] * out["integ"] / SQRT2

    samples = map_paths(fn, n_paths, d, threads=threads)
    return GradientEstimate(
        coords=estimate_mean(samples),
        frame=u0,
        method="integrated",
        n_paths=n_paths,
        detail={"profile": profile.kind},
    )


def bismut_local(
    flow: MetricFlow,
    fieldf,
    s: float,
    t: float,
    x,
    radius: float,
    n_paths: int,
    n_steps: int,
    seed: int = 0,
    u0=None,
    n_inner: Optional[int] = None,
    threads: Optional[int] = None,
    backend: Optional[str] = None,
) -> GradientEstimate:
    """Localized derivative estimator.

    The weight h'(r) = fc(r)^-2 / (t - s) with fc = cos(pi rho / (2 radius))
    accumulates only while the path stays in the radius ball around the
    start and its time-changed clock is below t - s. Paths that leave the
    ball before then contribute through a nested continuation started at
    the exit state, so the field is only ever evaluated where the main
    paths have been or at continuation endpoints.
    """
    x, u0 = _resolve_start(flow, s, x, u0)
    q = _transport_weights(flow, s, t, n_steps)
    if q is None:
        raise ConfigInvalid("local estimator requires frame-independent damping")
    engine, _ = backend_mod.engine_for(flow, backend)
    h = (t - s) / n_steps
    root_h = math.sqrt(h)
    stream = NoiseStream(seed, "bismut-local")
    nested_stream = stream.child("continuation")
    if n_inner is None:
        n_inner = max(16, int(math.isqrt(n_paths)))
    d = flow.dim
    exit_counts: list[int] = []

    def fn(lo, hi):
        normals, _ = stream.block(lo, hi, n_steps, d)
        out = engine.run_local(
            flow, s, h, n_steps, x, u0, root_h * normals,
            qgrid=q, radius=radius, t_total=t - s,
        )
        vals = np.empty(hi - lo)
        exited = out["exit_idx"] >= 0
        inside = ~exited
        if np.any(inside):
            vals[inside] = np.atleast_1d(fieldf.value(t, out["x"][inside]))
        idxs = np.nonzero(exited)[0]
        exit_counts.append(len(idxs))
        for i in idxs:
            k_exit = int(out["exit_idx"][i])
            remaining = n_steps - k_exit
            if remaining <= 0:
                vals[i] = float(np.atleast_1d(fieldf.value(t, out["x"][i][None]))[0])
                continue
            t_exit = s + k_exit * h
            sub = nested_stream.child(lo + int(i))
            normals_in, _ = sub.block(0, n_inner, remaining, d)
            u_exit = flow.canonical_frame(t_exit, out["x"][i])
            cont = engine.run_terminal(
                flow, t_exit, h, remaining, out["x"][i], u_exit, root_h * normals_in
            )
            vals[i] = float(np.mean(np.atleast_1d(fieldf.value(t, cont["x"]))))
        return vals[:, None] * out["integ"] / SQRT2

    samples = map_paths(fn, n_paths, d, threads=threads)
    return GradientEstimate(
        coords=estimate_mean(samples),
        frame=u0,
        method="local",
        n_paths=n_paths,
        detail={"radius": radius, "exited": sum(exit_counts), "n_inner": n_inner},
    )


# ---------------------------------------------------------------------------
# generator stencil over batches
# ---------------------------------------------------------------------------


def generator_values(flow: MetricFlow, fieldf, t: float, xs: np.ndarray, h_fd: float = 1e-4):
    """Generator (metric laplacian + drift) of a field at a batch of points."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    n = xs.shape[0]
    u = flow.canonical_frame(t, xs)
    f0 = np.atleast_1d(fieldf.value(t, xs))
    lap = np.zeros(n)
    grad = np.zeros((n, flow.dim))
    for a in range(flow.dim):
        step = h_fd * u[:, :, a]
        xp = np.asarray(flow.exp_map(t, xs, step))
        xm = np.asarray(flow.exp_map(t, xs, -step))
        fp = np.atleast_1d(fieldf.value(t, xp))
        fm = np.atleast_1d(fieldf.value(t, xm))
        lap += (fp - 2.0 * f0 + fm) / h_fd**2
        grad[:, a] = (fp - fm) / (2.0 * h_fd)
    if flow.drift.is_zero:
        return lap
    z = flow.drift.value(t, xs)
    zf = np.atleast_2d(flow.to_frame(t, xs, u, z))
    return lap + np.einsum("na,na->n", zf, grad)


# ---------------------------------------------------------------------------
# generator-consistency residuals
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KolmogorovReport:
    """Finite-difference check of the forward or backward time derivative."""

    direction: str
    residual: Estimate
    scale: float
    delta: float

    @property
    def relative(self) -> float:
        return abs(float(self.residual.mean)) / max(self.scale, 1e-300)

    def as_dict(self) -> dict:
        return {
            "direction": self.direction,
            "residual": float(self.residual.mean),
            "stderr": float(self.residual.stderr),
            "scale": self.scale,
            "delta": self.delta,
            "relative": self.relative,
        }


def kolmogorov_forward(
    flow: MetricFlow,
    fieldf,
    s: float,
    t: float,
    x,
    n_paths: int,
    n_steps: int,
    delta: float = 1e-2,
    seed: int = 0,
    threads: Optional[int] = None,
    backend: Optional[str] = None,
) -> KolmogorovReport:
    """Residual of d/dt P_{s,t} f = P_{s,t} (L_t f), centered difference.

    All three horizons share increments (the shorter runs use prefixes of
    the same noise block), so the difference quotient is common-random-
    number coupled and the residual standard error is honest per path.
    """
    x, u0 = _resolve_start(flow, s, x, None)
    engine, _ = backend_mod.engine_for(flow, backend)
    h = (t - s) / n_steps
    k_delta = max(1, int(round(delta / h)))
    delta_eff = k_delta * h
    n_plus = n_steps + k_delta
    n_minus = n_steps - k_delta
    if n_minus <= 0:
        raise ConfigInvalid("delta too large for the step grid")
    root_h = math.sqrt(h)
    stream = NoiseStream(seed, "kolmogorov-forward")
    d = flow.dim

    def fn(lo, hi):
        normals, _ = stream.block(lo, hi, n_plus, d)
        dB = root_h * normals
        mid = engine.run_terminal(flow, s, h, n_minus, x, u0, dB[:, :n_minus])
        x_minus = mid["x"]
        mid2 = engine.run_terminal(
            flow, s + n_minus * h, h, k_delta, mid["x"], mid["u"], dB[:, n_minus:n_steps]
        )
        x_mid = mid2["x"]
        tail = engine.run_terminal(
            flow, s + n_steps * h, h, k_delta, mid2["x"], mid2["u"], dB[:, n_steps:]
        )
        x_plus = tail["x"]
        f_plus = np.atleast_1d(fieldf.value(t + delta_eff, x_plus))
        f_minus = np.atleast_1d(fieldf.value(t - delta_eff, x_minus))
        lf = generator_values(flow, fieldf, t, x_mid)
        return (f_plus - f_minus) / (2.0 * delta_eff) - lf

    samples = map_paths(fn, n_paths, 1, threads=threads)[:, 0]
    res = estimate_mean(samples)
    scale_run = semigroup(
        flow, _GeneratorMagnitude(flow, fieldf), s, t, x, min(n_paths, 4000), n_steps,
        seed=seed + 1, threads=threads, backend=backend,
    )
    return KolmogorovReport(
        direction="forward",
        residual=res,
        scale=max(abs(float(scale_run.mean)), 1e-12),
        delta=delta_eff,
    )


class _GeneratorMagnitude:
    """|L_t f| as a field, for scale normalization of residuals."""

    has_gradient = False
    name = "generator_magnitude"

    def __init__(self, flow, fieldf):
        self.flow = flow
        self.fieldf = fieldf

    def value(self, t, y):
        return np.abs(generator_values(self.flow, self.fieldf, t, np.atleast_2d(y)))

    def descriptor(self):
        return {"name": self.name}


def kolmogorov_backward(
    flow: MetricFlow,
    fieldf,
    s: float,
    t: float,
    x,
    n_paths: int,
    n_steps: int,
    delta: float = 1e-2,
    h_fd: float = 0.05,
    seed: int = 0,
    backend: Optional[str] = None,
) -> KolmogorovReport:
    """Residual of d/ds P_{s,t} f = -L_s P_{s,t} f at fixed t.

    P_{s,t} f and its stencil values are Monte Carlo surrogates sharing one
    noise stream per evaluation batch (the increments are reused across
    stencil points), so the second differences see smooth functions of the
    start point rather than independent noise.
    """
    x, u0 = _resolve_start(flow, s, x, None)
    if s - delta < 0.0:
        raise ConfigInvalid("backward stencil needs s - delta >= 0")
    d = flow.dim
    stream = NoiseStream(seed, "kolmogorov-backward")

    def p_values(s_eval, starts, stream_tag, share=False):
        n_eval_steps = max(1, int(round((t - s_eval) / ((t - s) / n_steps))))
        means, errs = semigroup_batch(
            flow, fieldf, s_eval, t, starts, n_paths, n_eval_steps,
            stream.child(stream_tag), backend=backend, share_noise=share,
        )
        return means, errs

    # time derivative in s with the pair of shifted starts at the same point
    (m_plus,), (e_plus,) = p_values(s + delta, x[None], "time")
    (m_minus,), (e_minus,) = p_values(s - delta, x[None], "time")
    ds_term = (m_plus - m_minus) / (2.0 * delta)
    ds_err = math.hypot(e_plus, e_minus) / (2.0 * delta)

    # spatial generator on the surrogate at time s via a shared-noise stencil
    u = flow.canonical_frame(s, x)
    stencil = [x]
    for a in range(d):
        stencil.append(np.asarray(flow.exp_map(s, x, h_fd * u[:, a])))
        stencil.append(np.asarray(flow.exp_map(s, x, -h_fd * u[:, a])))
    means, errs = p_values(s, np.stack(stencil), "stencil", share=True)
    f0 = means[0]
    lap = 0.0
    grad = np.zeros(d)
    for a in range(d):
        fp, fm = means[1 + 2 * a], means[2 + 2 * a]
        lap += (fp - 2.0 * f0 + fm) / h_fd**2
        grad[a] = (fp - fm) / (2.0 * h_fd)
    gen = lap
    if not flow.drift.is_zero:
        z = flow.drift.value(s, x[None])[0]
        zf = np.atleast_1d(flow.to_frame(s, x, u, z[None]))
        gen += float(np.dot(np.ravel(zf), grad))
    # shared noise cancels most stencil error; keep the time-pair noise
    residual = Estimate(ds_term + gen, ds_err, n_paths)
    return KolmogorovReport(
        direction="backward",
        residual=residual,
        scale=max(abs(gen), abs(ds_term), 1e-12),
        delta=delta,
    )


def kolmogorov_residual(
    flow: MetricFlow,
    fieldf,
    s: float,
    t: float,
    x,
    n_paths: int,
    n_steps: int,
    delta: float = 1e-2,
    seed: int = 0,
    h_fd: float = 0.05,
    threads: Optional[int] = None,
    backend: Optional[str] = None,
) -> dict:
    """Both generator-consistency residuals, keyed by direction."""
    fwd = kolmogorov_forward(
        flow, fieldf, s, t, x, n_paths, n_steps, delta=delta, seed=seed,
        threads=threads, backend=backend,
    )
    bwd = kolmogorov_backward(
        flow, fieldf, s, t, x, n_paths, n_steps, delta=delta, h_fd=h_fd,
        seed=seed + 1, backend=backend,
    )
    return {"forward": fwd, "backward": bwd}


# ---------------------------------------------------------------------------
# recovery of pointwise data from small-time differences
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RecoveryResult:
    """Small-time recovery output with interval-halving extrapolation."""

    estimate: Estimate        # extrapolated value
    first: Estimate           # at the base horizon
    second: Estimate          # at the doubled horizon
    target: Optional[float]
    kind: str
    signal_ok: bool
    shift_drift: Optional[float] = None  # relative move when the shift doubles

    @property
    def rel_error(self) -> Optional[float]:
        if self.target is None or self.target == 0.0:
            return None
        return abs(float(self.estimate.mean) - self.target) / abs(self.target)

    def require_signal(self):
        if not self.signal_ok:
            raise SignalBelowNoise(
                f"recovered {self.kind} value {self.estimate.mean:.3e} is below "
                f"its noise band {self.estimate.half_width:.3e}"
            )
        return self

    def as_dict(self) -> dict:
        return {
            "kind": self.kind,
            "estimate": float(self.estimate.mean),
            "stderr": float(self.estimate.stderr),
            "first": float(self.first.mean),
            "second": float(self.second.mean),
            "target": self.target,
            "rel_error": self.rel_error,
            "signal_ok": self.signal_ok,
            **(
                {"shift_drift": self.shift_drift}
                if self.shift_drift is not None
                else {}
            ),
        }


def _two_horizon_samples(
    flow, s, x, u0, dt, n_paths, n_steps, stream, sample_fn, width, threads, backend=None
):
    """Per-path samples at horizons s+dt and s+2dt on continued paths.

    sample_fn(t_eval, xs, us, horizon) -> (n, w) per-path statistics with
    horizon 0 or 1; returns the (n, 2w) concatenation. The second horizon
    reuses the first's paths.
    """
    engine, _ = backend_mod.engine_for(flow, backend)
    h = dt / n_steps
    root_h = math.sqrt(h)
    d = flow.dim

    def fn(lo, hi):
        normals, _ = stream.block(lo, hi, 2 * n_steps, d)
        dB = root_h * normals
        first = engine.run_terminal(flow, s, h, n_steps, x, u0, dB[:, :n_steps])
        a = sample_fn(s + dt, first["x"], first["u"], 0)
        second = engine.run_terminal(
            flow, s + dt, h, n_steps, first["x"], first["u"], dB[:, n_steps:]
        )
        b = sample_fn(s + 2.0 * dt, second["x"], second["u"], 1)
        return np.concatenate([a, b], axis=1)

    return map_paths(fn, n_paths, 2 * width, threads=threads)


def _blocked_pair_estimates(samples, width, stat_fn, dt):
    """Apply a block statistic to each horizon and extrapolate.

    stat_fn(mean_vector, dt) maps the per-block column means of one horizon
    to the difference-quotient value.
    """
    def stat_first(block):
        return stat_fn(block[:, :width].mean(axis=0), dt)

    def stat_second(block):
        return stat_fn(block[:, width:].mean(axis=0), 2.0 * dt)

    def stat_extrapolated(block):
        return 2.0 * stat_first(block) - stat_second(block)

    n = samples.shape[0]
    bounds = block_bounds(n)
    outs = []
    for fnc in (stat_first, stat_second, stat_extrapolated):
        vals = np.asarray([fnc(samples[lo:hi]) for lo, hi in bounds])
        full = fnc(samples)
        stderr = vals.std(ddof=1) / math.sqrt(len(bounds))
        outs.append(Estimate(float(full), float(stderr), n))
    return outs


def _auto_probe_radius(flow: MetricFlow, s: float, tau2: float) -> float:
    """Cutoff radius for the recovery probe.

    Large enough that paths rarely leave the flat plateau of the cutoff
    over the longer horizon (seven root-mean-square displacements), capped
    away from the cut locus where the probe's closed forms degrade.
    """
    diffusive = 7.0 * math.sqrt(2.0 * flow.dim * tau2)
    if flow.kind == "sphere":
        return min(diffusive, 0.88 * math.pi * math.sqrt(float(flow.c(s))))
    if flow.kind == "torus":
        a = np.asarray(flow.c(s), dtype=float)
        return min(diffusive, 0.88 * math.pi * math.sqrt(float(np.min(a))))
    return diffusive


def _recovery_setup(flow, s, x, direction, t1, n_steps, probe, r_c):
    from . import fields as fields_mod

    x, u0 = _resolve_start(flow, s, x, None)
    if probe is None:
        if r_c is None:
            r_c = _auto_probe_radius(flow, s, 2.0 * t1)
        probe = fields_mod.NormalLinear(flow, s, x, direction, r_c)
    q_grid = _transport_weights(flow, s, s + t1, n_steps)
    if q_grid is None:
        raise ConfigInvalid(
            "recovery uses the scalar transport norm; frame-dependent "
            "damping is out of its scope"
        )
    q1 = float(q_grid[-1])
    q2 = float(_transport_weights(flow, s, s + 2.0 * t1, 2 * n_steps)[-1])
    # quadratic form of the damping tensor in the probe direction
    xi = np.ravel(np.asarray(flow.to_frame(s, x, u0, probe.direction)))
    r_mat = np.asarray(flow.damping_matrix(s, x, u0), dtype=float)
    if r_mat.ndim == 3:
        r_mat = r_mat[0]
    target = float(xi @ r_mat @ xi)
    return x, u0, probe, (q1, q2), target


def _pathwise_columns(flow, probe, horizon_q):
    def cols(t_eval, xs, us, horizon):
        grad = probe.gradient(t_eval, xs)
        coords = np.atleast_2d(flow.to_frame(t_eval, xs, us, grad))
        return horizon_q[horizon] * coords

    return cols


def recover_curvature_grad(
    flow: MetricFlow,
    s: float,
    x,
    direction,
    p: float = 2.0,
    t1: float = 0.02,
    n_paths: int = 400_000,
    n_steps: int = 100,
    seed: int = 0,
    probe=None,
    r_c: Optional[float] = None,
    threads: Optional[int] = None,
    backend: Optional[str] = None,
) -> RecoveryResult:
    """Damping form in a unit direction from small-time gradient decay.

    Difference quotient [P|grad f|^p - |grad Pf|^p] / (p tau) with the
    compactly supported probe field that is linear in normal coordinates
    (unit gradient, zero Hessian at x), evaluated at horizons t1 and 2 t1
    on one continued ensemble and extrapolated 2 A(t1) - A(2 t1). The
    semigroup gradient comes from the pathwise transport estimator on the
    same paths.
    """
    x, u0, probe, horizon_q, target = _recovery_setup(
        flow, s, x, direction, t1, n_steps, probe, r_c
    )
    stream = NoiseStream(seed, "recover-grad")
    d = flow.dim
    grad_cols = _pathwise_columns(flow, probe, horizon_q)

    def sample_fn(t_eval, xs, us, horizon):
        grad = probe.gradient(t_eval, xs)
        norms = np.atleast_1d(flow.norm(t_eval, xs, grad))
        return np.concatenate(
            [(norms**p)[:, None], grad_cols(t_eval, xs, us, horizon)], axis=1
        )

    width = 1 + d
    samples = _two_horizon_samples(
        flow, s, x, u0, t1, n_paths, n_steps, stream, sample_fn, width, threads, backend
    )

    def stat(mean_vec, tau):
        return (mean_vec[0] - float(np.linalg.norm(mean_vec[1:])) ** p) / (p * tau)

    first, second, extrapolated = _blocked_pair_estimates(samples, width, stat, t1)
    signal_ok = abs(extrapolated.mean) > extrapolated.half_width
    return RecoveryResult(
        estimate=extrapolated,
        first=first,
        second=second,
        target=target,
        kind="curvature_grad",
        signal_ok=signal_ok,
    )


def _variance_stat(p_tilde, shift):
    def stat(mean_vec, tau):
        m_a, m_b = mean_vec[0], mean_vec[1]
        # shift^2 [ (1+m_a) - (1+m_b)^p ] without forming large numbers
        delta = m_a - np.expm1(p_tilde * np.log1p(m_b))
        piece = p_tilde * shift**2 * delta / (4.0 * (p_tilde - 1.0) * tau)
        grad_sq = float(np.dot(mean_vec[2:], mean_vec[2:]))
        return (piece - grad_sq) / tau

    return stat


def _entropy_stat(shift):
    def stat(mean_vec, tau):
        m_a, m_c = mean_vec[0], mean_vec[1]
        ent = shift**2 * (2.0 * m_c - (1.0 + m_a) * np.log1p(m_a))
        grad_sq = float(np.dot(mean_vec[2:], mean_vec[2:]))
        return (ent / (4.0 * tau) - grad_sq) / tau

    return stat


def _run_shifted_recovery(
    flow, s, x, u0, probe, horizon_q, stat_builder, moment_cols, t1,
    n_paths, n_steps, stream, threads, backend,
):
    d = flow.dim
    grad_cols = _pathwise_columns(flow, probe, horizon_q)

    def sample_fn(t_eval, xs, us, horizon):
        moments = moment_cols(t_eval, xs)
        return np.concatenate(
            [moments, grad_cols(t_eval, xs, us, horizon)], axis=1
        )

    width = 2 + d
    samples = _two_horizon_samples(
        flow, s, x, u0, t1, n_paths, n_steps, stream, sample_fn, width, threads, backend
    )
    return _blocked_pair_estimates(samples, width, stat_builder, t1)


def recover_curvature_variance(
    flow: MetricFlow,
    s: float,
    x,
    direction,
    p: float = 2.0,
    shift: float = 1000.0,
    t1: float = 0.02,
    n_paths: int = 400_000,
    n_steps: int = 100,
    seed: int = 0,
    probe=None,
    r_c: Optional[float] = None,
    threads: Optional[int] = None,
    backend: Optional[str] = None,
) -> RecoveryResult:
    """Damping form from the variance family of the shifted probe.

    With f_n = shift + f the statistic is
    [ p {P f_n^2 - (P f_n^(2/p))^p} / (4 (p-1) tau) - |grad P f_n|^2 ] / tau,
    Richardson-extrapolated over tau in {t1, 2 t1}. The moments are
    computed in the shifted variable w = f / shift where the large-shift
    cancellation is exact instead of catastrophic; a quarter-size rerun at
    twice the shift reports the residual shift sensitivity.
    """
    if p <= 1.0:
        raise ConfigInvalid("variance family needs p > 1")
    x, u0, probe, horizon_q, target = _recovery_setup(
        flow, s, x, direction, t1, n_steps, probe, r_c
    )

    def runner(shift_val, n_run, stream):
        def moment_cols(t_eval, xs):
            w = np.atleast_1d(probe.value(t_eval, xs)) / shift_val
            a = w * (2.0 + w)                       # (1+w)^2 - 1
            b = np.expm1((2.0 / p) * np.log1p(w))   # (1+w)^(2/p) - 1
            return np.stack([a, b], axis=1)

        return _run_shifted_recovery(
            flow, s, x, u0, probe, horizon_q, _variance_stat(p, shift_val),
            moment_cols, t1, n_run, n_steps, stream, threads, backend,
        )

    first, second, extrapolated = runner(
        shift, n_paths, NoiseStream(seed, "recover-variance")
    )
    _, _, check = runner(
        2.0 * shift, max(2000, n_paths // 4),
        NoiseStream(seed, "recover-variance-shift"),
    )
    return _finish_shifted(
        first, second, extrapolated, check, target, "curvature_variance"
    )


def recover_curvature_entropy(
    flow: MetricFlow,
    s: float,
    x,
    direction,
    shift: float = 1000.0,
    t1: float = 0.02,
    n_paths: int = 400_000,
    n_steps: int = 100,
    seed: int = 0,
    probe=None,
    r_c: Optional[float] = None,
    threads: Optional[int] = None,
    backend: Optional[str] = None,
) -> RecoveryResult:
    """Damping form from the entropy of the shifted probe squared.

    [ Ent(f_n^2) / (4 tau) - |grad P f_n|^2 ] / tau with f_n = shift + f;
    the log of the shift cancels exactly in the shifted variable, leaving
    log1p expressions of order 1/shift.
    """
    x, u0, probe, horizon_q, target = _recovery_setup(
        flow, s, x, direction, t1, n_steps, probe, r_c
    )

    def runner(shift_val, n_run, stream):
        def moment_cols(t_eval, xs):
            w = np.atleast_1d(probe.value(t_eval, xs)) / shift_val
            a = w * (2.0 + w)
            c = (1.0 + w) ** 2 * np.log1p(w)
            return np.stack([a, c], axis=1)

        return _run_shifted_recovery(
            flow, s, x, u0, probe, horizon_q, _entropy_stat(shift_val),
            moment_cols, t1, n_run, n_steps, stream, threads, backend,
        )

    first, second, extrapolated = runner(
        shift, n_paths, NoiseStream(seed, "recover-entropy")
    )
    _, _, check = runner(
        2.0 * shift, max(2000, n_paths // 4),
        NoiseStream(seed, "recover-entropy-shift"),
    )
    return _finish_shifted(
        first, second, extrapolated, check, target, "curvature_entropy"
    )


def _finish_shifted(first, second, extrapolated, check, target, kind):
    base = float(extrapolated.mean)
    gap = abs(float(check.mean) - base)
    band = 3.0 * math.hypot(float(extrapolated.stderr), float(check.stderr))
    shift_drift = gap / abs(base) if base != 0.0 else None
    signal_ok = abs(base) > extrapolated.half_width and gap <= band
    return RecoveryResult(
        estimate=extrapolated,
        first=first,
        second=second,
        target=target,
        kind=kind,
        signal_ok=signal_ok,
        shift_drift=shift_drift,
    )
