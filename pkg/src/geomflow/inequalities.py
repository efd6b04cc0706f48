"""Empirical verifiers for the semigroup inequalities.

Each verifier assembles the two sides of one inequality as Estimate values
(Monte Carlo where a side needs sampling, quadrature where it is
deterministic) and wraps them in a Verdict. A verdict holds when

    lhs.mean <= rhs.mean + 3 * hypot(lhs.stderr, rhs.stderr)

plus a relative epsilon floor, so exact-degeneracy cases (both sides equal
with zero spread) are not rejected over last-bit rounding. The criterion is
one-sided on purpose: a failure means the gap points the wrong way by at
least three combined standard errors, which a correct implementation should
essentially never produce, while a large positive slack carries no meaning
beyond "held comfortably".

Curvature input K may be a float, a CurvatureBound, a callable t -> K(t),
or a callable (t, xs) -> per-path rates. Space-time rates are accepted only
where the decay enters as a pathwise integral (gradient, entropy, reverse
bounds); those runs are flagged in the verdict diagnostics because the
supporting argument is proved for time-only rates. The distance-based
bounds (Harnack, hyperboundedness, contraction) require time-only rates
outright.
"""

from __future__ import annotations

import inspect
import math
import numbers
import os
from dataclasses import dataclass, field as dc_field, replace
from typing import Callable, Optional

import numpy as np

from . import _engine_py
from . import backend as backend_mod
from .coupling import MIRROR, PARALLEL, wasserstein_upper
from .errors import (
    ConfigInvalid,
    DegenerateInterval,
    FieldBelowOne,
    NestedBudgetExceeded,
    NonPositiveField,
    NoSolution,
)
from .fields import AmbientCoordinate, Custom, GaussianBump, Linear, SinAxis, TruncatedExp
from .flows import (
    CurvatureBound,
    MetricFlow,
    euclidean_flow,
    hyperbolic_flow,
    sphere_flow,
    sphere_ricci_flow,
    static_scale,
    torus_uniform_exp_flow,
)
from .gradient import NESTED_BUDGET, bismut_pathwise
from .montecarlo import (
    DEFAULT_CHUNK,
    Estimate,
    block_estimate,
    estimate_mean,
    map_paths,
)
from .rng import NoiseStream

K_SIGMA = 3.0
# relative floor so exact-equality cases survive last-bit rounding
EPS_HOLDS = 1e-12

CLS_DIVERGENT = "divergent-trend"
CLS_CONVERGENT = "convergent-trend"
_DOUBLE_THRESHOLD = 1.5
_WINDOW_THRESHOLD = 0.7

VARIANT_DIRECT = "direct"
VARIANT_INTEGRATED = "integrated"
VARIANT_COMPARISON = "comparison"


@dataclass(frozen=True)
class MCConfig:
    """Sampling budget shared by the verifiers.

    n_paths drives single-stage ensembles and the transport estimator;
    n_outer / n_inner drive the nested two-stage estimators; u_nodes is the
    number of time nodes for quadrature over the intermediate time in the
    reverse bound.
    """

    n_paths: int = 2000
    step: float = 2e-3
    seed: int = 0
    n_outer: int = 2000
    n_inner: int = 500
    u_nodes: int = 8
    threads: Optional[int] = None
    backend: Optional[str] = None

    def __post_init__(self):
        if self.n_paths < 2 or self.n_outer < 2 or self.n_inner < 4:
            raise ConfigInvalid("sample counts are too small")
        if not self.step > 0.0:
            raise ConfigInvalid("step must be positive")
        if self.u_nodes < 3:
            raise ConfigInvalid("need at least three time nodes")


DEFAULT_MC = MCConfig()


@dataclass(frozen=True)
class Verdict:
    """Two estimated sides of one inequality plus the 3-sigma outcome."""

    name: str
    item: str
    lhs: Estimate
    rhs: Estimate
    holds_with_ci: bool
    config: dict
    diagnostics: dict = dc_field(default_factory=dict)

    @property
    def slack(self) -> float:
        return float(self.rhs.mean) - float(self.lhs.mean)

    @property
    def combined_stderr(self) -> float:
        return math.hypot(float(self.lhs.stderr), float(self.rhs.stderr))

    def as_record(self) -> dict:
        return {
            "name": self.name,
            "paper_item": self.item,
            "lhs": {
                "mean": float(self.lhs.mean),
                "stderr": float(self.lhs.stderr),
                "n": int(self.lhs.n),
            },
            "rhs": {
                "mean": float(self.rhs.mean),
                "stderr": float(self.rhs.stderr),
                "n": int(self.rhs.n),
            },
            "slack": self.slack,
            "stderr": self.combined_stderr,
            "holds": bool(self.holds_with_ci),
            "seed": self.config.get("seed"),
            "config": self.config,
        }


def _verdict(name, item, lhs, rhs, config, diagnostics=None) -> Verdict:
    scale = max(1.0, abs(float(lhs.mean)), abs(float(rhs.mean)))
    band = K_SIGMA * math.hypot(float(lhs.stderr), float(rhs.stderr))
    holds = float(lhs.mean) <= float(rhs.mean) + band + EPS_HOLDS * scale
    return Verdict(name, item, lhs, rhs, bool(holds), config, diagnostics or {})


# ---------------------------------------------------------------------------
# curvature-rate normalization and quadrature


@dataclass(frozen=True)
class _Rate:
    fn: Callable
    time_only: bool
    label: str


def _arity(fn) -> int:
    try:
        sig = inspect.signature(fn)
    except (TypeError, ValueError):
        return 1
    n = 0
    for prm in sig.parameters.values():
        if prm.kind in (prm.POSITIONAL_ONLY, prm.POSITIONAL_OR_KEYWORD):
            if prm.default is prm.empty:
                n += 1
        elif prm.kind == prm.VAR_POSITIONAL:
            return 2
    return n


def _rate_of(K, flow: Optional[MetricFlow]) -> _Rate:
    """Normalize a curvature-rate argument.

    None defers to the flow's own attained bound; floats become constant
    rates; callables are classified by arity as t -> K or (t, xs) -> K.
    """
    if K is None:
        if flow is None:
            raise ConfigInvalid("a curvature rate is required here")
        bound = flow.curvature_bound()
        return _Rate(bound.rate, bound.time_only, "flow")
    if isinstance(K, CurvatureBound):
        return _Rate(K.rate, K.time_only, "bound")
    if isinstance(K, numbers.Real) and not isinstance(K, bool):
        k = float(K)
        return _Rate(
            lambda ts, _k=k: np.full_like(np.asarray(ts, dtype=float), _k),
            True,
            f"const:{k:g}",
        )
    if callable(K):
        n_req = _arity(K)
        if n_req == 1:
            return _Rate(K, True, "time-fn")
        if n_req == 2:
            return _Rate(K, False, "space-time-fn")
    raise ConfigInvalid("curvature rate must be a number, a bound, or a callable of (t) or (t, x)")


def _require_time_only(rate: _Rate, op: str) -> None:
    if not rate.time_only:
        raise ConfigInvalid(f"{op} needs a time-only curvature rate")


def _cum_rate(rate_fn, s, t, n=2048):
    """Grid and cumulative trapezoid of a time-only rate on [s, t]."""
    ts = np.linspace(s, t, n + 1)
    vals = np.broadcast_to(np.asarray(rate_fn(ts), dtype=float), ts.shape)
    seg = 0.5 * (vals[:-1] + vals[1:]) * ((t - s) / n)
    return ts, np.concatenate([[0.0], np.cumsum(seg)])


def _rate_total(rate_fn, s, t) -> float:
    return float(_cum_rate(rate_fn, s, t)[1][-1])


def _decay_double(rate_fn, s, t, n=2048) -> float:
    """int_s^t exp(-2 int_u^t K) du for a time-only rate."""
    ts, cum = _cum_rate(rate_fn, s, t, n)
    return float(np.trapezoid(np.exp(-2.0 * (cum[-1] - cum)), ts))


def _growth_profile(rate_fn, s, t):
    """Dense ODE solution of (int_s K, int_s exp(2 int_s K))."""
    from scipy.integrate import solve_ivp

    def deriv(u, y):
        return [float(np.asarray(rate_fn(u), dtype=float).reshape(())), math.exp(2.0 * y[0])]

    sol = solve_ivp(
        deriv,
        (s, t),
        [0.0, 0.0],
        rtol=1e-12,
        atol=1e-14,
        dense_output=True,
        max_step=(t - s) / 8.0,
    )
    if not sol.success:
        raise ConfigInvalid(f"curvature rate integration failed: {sol.message}")
    return sol.sol


def _growth_j(rate_fn, s, t) -> float:
    return float(_growth_profile(rate_fn, s, t)(t)[1])


# ---------------------------------------------------------------------------
# sampling helpers


def _check_interval(flow: MetricFlow, s, t) -> None:
    if not float(t) > float(s):
        raise DegenerateInterval(f"need s < t (got s={s}, t={t})")
    flow.check_time(float(t))


def _steps(s, t, step) -> int:
    return max(1, int(round((t - s) / step)))


def _coords(x) -> list:
    return [float(v) for v in np.atleast_1d(np.asarray(x, dtype=float))]


def _field_descriptor(f) -> dict:
    desc = getattr(f, "descriptor", None)
    if callable(desc):
        try:
            return desc()
        except Exception:
            pass
    return {"name": getattr(f, "name", type(f).__name__)}


def _base_config(op, flow, mc: MCConfig, rate: Optional[_Rate], **extra) -> dict:
    cfg = {
        "op": op,
        "flow": {"kind": flow.kind, "dim": int(flow.dim)},
        "curvature": rate.label if rate is not None else None,
        "n_paths": mc.n_paths,
        "step": mc.step,
        "seed": mc.seed,
    }
    for key, val in extra.items():
        if val is not None:
            cfg[key] = val
    return cfg


def _terminal_columns(flow, s, t, x, n_steps, stream, mc, cols_fn, width, n_paths=None):
    """Sample columns of terminal-point functionals from a common start."""
    h = (t - s) / n_steps
    root_h = math.sqrt(h)
    x = np.asarray(x, dtype=float)
    u0 = flow.canonical_frame(s, x)
    engine, _ = backend_mod.engine_for(flow, mc.backend)

    def fn(lo, hi):
        normals, _ = stream.block(lo, hi, n_steps, flow.dim)
        out = engine.run_terminal(flow, s, h, n_steps, x, u0, root_h * normals)
        return cols_fn(out["x"])

    return map_paths(fn, n_paths or mc.n_paths, width, threads=mc.threads)


def _record_columns(flow, s, t, x, n_steps, stream, mc, cols_fn, width, n_paths=None):
    """Like _terminal_columns but cols_fn sees every node: (tgrid, xs) -> cols."""
    h = (t - s) / n_steps
    root_h = math.sqrt(h)
    x = np.asarray(x, dtype=float)
    u0 = flow.canonical_frame(s, x)
    tgrid = s + h * np.arange(n_steps + 1)

    def fn(lo, hi):
        normals, _ = stream.block(lo, hi, n_steps, flow.dim)
        rec = _engine_py.run_record(flow, s, h, n_steps, x, u0, root_h * normals)
        return cols_fn(tgrid, rec["x"])

    # recorded nodes are memory-heavy; cap the chunk
    return map_paths(fn, n_paths or mc.n_paths, width, chunk_size=2048, threads=mc.threads)


def _rate_nodes(rate_fn, tgrid, xs):
    """Space-time rate at every node of a recorded batch: (n, nodes)."""
    out = np.empty(xs.shape[:2])
    for k, tv in enumerate(tgrid):
        out[:, k] = np.asarray(rate_fn(float(tv), xs[:, k]), dtype=float)
    return out


def _inner_values(flow, fieldf, s, t, xs, n_inner, n_steps, stream, backend):
    """Terminal field values of n_inner paths from each start: (k, n_inner)."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    k = xs.shape[0]
    total = k * n_inner
    if total * n_steps > NESTED_BUDGET:
        raise NestedBudgetExceeded(
            f"nested stage of {total} paths x {n_steps} steps exceeds the budget"
        )
    engine, _ = backend_mod.engine_for(flow, backend)
    h = (t - s) / n_steps
    root_h = math.sqrt(h)
    us = flow.canonical_frame(s, xs)
    x_tiled = np.repeat(xs, n_inner, axis=0)
    u_tiled = np.repeat(us, n_inner, axis=0)
    vals = np.empty(total)
    for lo in range(0, total, DEFAULT_CHUNK):
        hi = min(lo + DEFAULT_CHUNK, total)
        normals, _ = stream.block(lo, hi, n_steps, flow.dim)
        out = engine.run_terminal(flow, s, h, n_steps, x_tiled[lo:hi], u_tiled[lo:hi], root_h * normals)
        vals[lo:hi] = np.atleast_1d(fieldf.value(t, out["x"]))
    return vals.reshape(k, n_inner)


def _norm_power(coords: Estimate, power: float) -> Estimate:
    """Norm of an estimated vector raised to a power, delta-method stderr."""
    v = np.atleast_1d(np.asarray(coords.mean, dtype=float))
    sig = np.atleast_1d(np.asarray(coords.stderr, dtype=float))
    nrm = float(np.linalg.norm(v))
    if nrm > 0.0:
        dn = math.sqrt(float(np.sum((v / nrm) ** 2 * sig**2)))
    else:
        dn = float(np.linalg.norm(sig))
    mean = nrm**power
    if power == 1.0:
        stderr = dn
    else:
        base = max(nrm, dn)
        stderr = power * base ** (power - 1.0) * dn
    return Estimate(mean, float(stderr), coords.n)


# ---------------------------------------------------------------------------
# gradient-decay bound


def verify_gradient_inequality(flow, f, s, t, x, p=2.0, K=None, mc=None) -> Verdict:
    """|grad P_{s,t} f|^p at x against the damped moment of |grad f|^p.

    lhs: norm of the pathwise-transport gradient estimate, raised to p.
    rhs: E[ |grad f|^p(X_t) exp(-p int_s^t K) ], the integral running along
    the path when the rate depends on space.
    """
    mc = mc or DEFAULT_MC
    p = float(p)
    if p < 1.0:
        raise ConfigInvalid("exponent p must be at least 1")
    _check_interval(flow, s, t)
    rate = _rate_of(K, flow)
    n_steps = _steps(s, t, mc.step)
    grad = bismut_pathwise(
        flow, f, s, t, x,
        n_paths=mc.n_paths, n_steps=n_steps,
        seed=mc.seed, threads=mc.threads, backend=mc.backend,
    )
    lhs = _norm_power(grad.coords, p)
    stream = NoiseStream(mc.seed, "verify-gradient")
    diag = {"n_steps": n_steps}
    if rate.time_only:
        decay = math.exp(-p * _rate_total(rate.fn, s, t))
        diag["decay"] = decay

        def cols(xs):
            g = f.gradient(t, xs)
            nr = np.asarray(flow.norm(t, xs, g), dtype=float)
            return nr**p * decay

        samples = _terminal_columns(flow, s, t, x, n_steps, stream, mc, cols, 1)[:, 0]
    else:
        h = (t - s) / n_steps

        def cols(tg, nodes):
            xt = nodes[:, -1]
            g = f.gradient(t, xt)
            nr = np.asarray(flow.norm(t, xt, g), dtype=float)
            kk = _rate_nodes(rate.fn, tg, nodes)
            integ = np.trapezoid(kk, dx=h, axis=1)
            return nr**p * np.exp(-p * integ)

        samples = _record_columns(flow, s, t, x, n_steps, stream, mc, cols, 1)[:, 0]
        diag["hypothesis_class"] = "space-time rate, outside the verified time-only class"
    rhs = estimate_mean(samples)
    cfg = _base_config(
        "verify_gradient_inequality", flow, mc, rate,
        s=float(s), t=float(t), x=_coords(x), p=p, field=_field_descriptor(f),
    )
    return _verdict("verify_gradient_inequality", "gradient-decay", lhs, rhs, cfg, diag)


# ---------------------------------------------------------------------------
# entropy-energy bound


def _entropy_lhs(fvals, p, pt) -> Estimate:
    n = fvals.shape[0]
    if np.ptp(fvals) == 0.0:
        return Estimate(0.0, 0.0, n)
    if p == 1.0:
        f2 = fvals * fvals
        ent = np.where(f2 > 0.0, f2 * np.log(np.where(f2 > 0.0, f2, 1.0)), 0.0)
        cols = np.stack([f2, ent], axis=1)

        def stat(b):
            m2 = float(b[:, 0].mean())
            return (float(b[:, 1].mean()) - m2 * math.log(m2)) / 4.0

        return block_estimate(cols, stat)
    q = 2.0 / pt
    cols = np.stack([fvals * fvals, fvals**q], axis=1)

    def stat(b):
        return pt * (float(b[:, 0].mean()) - float(b[:, 1].mean()) ** pt) / (4.0 * (pt - 1.0))

    return block_estimate(cols, stat)


def verify_entropy_bound(flow, f, s, t, x, p=2.0, K=None, mc=None) -> Verdict:
    """Entropy-type gap of P_{s,t} at x against the damped gradient energy.

    lhs for p > 1: pt * [P f^2 - (P f^{2/pt})^{pt}] / (4 (pt - 1)) with
    pt = min(p, 2); the p = 1 limit replaces it with the entropy gap
    [P(f^2 log f^2) - P f^2 log P f^2] / 4.
    rhs: E[ |grad f|^2(X_t) * int_s^t exp(-2 int_u^t K) du ].
    """
    mc = mc or DEFAULT_MC
    p = float(p)
    if p < 1.0:
        raise ConfigInvalid("exponent p must be at least 1")
    _check_interval(flow, s, t)
    rate = _rate_of(K, flow)
    pt = min(p, 2.0)
    n_steps = _steps(s, t, mc.step)
    stream = NoiseStream(mc.seed, "verify-entropy")
    diag = {"n_steps": n_steps}
    if rate.time_only:
        d2 = _decay_double(rate.fn, s, t)
        diag["decay_double"] = d2

        def cols(xs):
            fv = np.asarray(f.value(t, xs), dtype=float)
            g = f.gradient(t, xs)
            nr = np.asarray(flow.norm(t, xs, g), dtype=float)
            return np.stack([fv, nr * nr * d2], axis=1)

        mat = _terminal_columns(flow, s, t, x, n_steps, stream, mc, cols, 2)
    else:
        h = (t - s) / n_steps

        def cols(tg, nodes):
            xt = nodes[:, -1]
            fv = np.asarray(f.value(t, xt), dtype=float)
            g = f.gradient(t, xt)
            nr = np.asarray(flow.norm(t, xt, g), dtype=float)
            kk = _rate_nodes(rate.fn, tg, nodes)
            seg = 0.5 * (kk[:, 1:] + kk[:, :-1]) * h
            fwd = np.concatenate([np.zeros((kk.shape[0], 1)), np.cumsum(seg, axis=1)], axis=1)
            tail = fwd[:, -1:] - fwd
            d2p = np.trapezoid(np.exp(-2.0 * tail), dx=h, axis=1)
            return np.stack([fv, nr * nr * d2p], axis=1)

        mat = _record_columns(flow, s, t, x, n_steps, stream, mc, cols, 2)
        diag["hypothesis_class"] = "space-time rate, outside the verified time-only class"
    fvals = mat[:, 0]
    fmin = float(fvals.min())
    if p == 1.0 and fmin < 0.0:
        raise NonPositiveField(f"entropy form needs f >= 0 (sampled min {fmin:g})")
    if 1.0 < p < 2.0 and fmin < 0.0:
        raise NonPositiveField(f"fractional power 2/pt needs f >= 0 (sampled min {fmin:g})")
    lhs = _entropy_lhs(fvals, p, pt)
    rhs = estimate_mean(mat[:, 1])
    cfg = _base_config(
        "verify_entropy_bound", flow, mc, rate,
        s=float(s), t=float(t), x=_coords(x), p=p, field=_field_descriptor(f),
    )
    return _verdict("verify_entropy_bound", "entropy", lhs, rhs, cfg, diag)


# ---------------------------------------------------------------------------
# reverse gradient bound (nested)


def verify_reverse_bound(flow, f, s, t, x, p=2.0, K=None, mc=None) -> Verdict:
    """|grad P_{s,t} f|^2 at x against the reverse two-stage functional.

    rhs numerator for p > 1 is P f^pt - (P f)^pt with pt = min(p, 2); the
    denominator integrates the reciprocal of
        G(u) = E[ (P_{u,t} f)^{2-pt}(X_u) exp(-2 int_s^u K) ]
    over u in [s, t] on mc.u_nodes trapezoid nodes and multiplies by
    pt (pt - 1). The p = 1 limit uses P(f log f) - P f log P f over the
    plain integral of 1/G. Interior nodes need a nested inner stage, priced
    against the shared nested budget.
    """
    mc = mc or DEFAULT_MC
    p = float(p)
    if p < 1.0:
        raise ConfigInvalid("exponent p must be at least 1")
    _check_interval(flow, s, t)
    rate = _rate_of(K, flow)
    pt = min(p, 2.0)
    q_in = 2.0 - pt
    need_inner = q_in > 0.0
    segs = mc.u_nodes - 1
    per = max(1, int(round((t - s) / mc.step / segs)))
    n_steps = per * segs
    h = (t - s) / n_steps
    unodes = s + (t - s) * np.arange(mc.u_nodes) / segs
    node_idx = per * np.arange(mc.u_nodes)
    n_int = mc.u_nodes - 2
    m_amb = np.atleast_1d(np.asarray(x, dtype=float)).shape[-1]
    stream = NoiseStream(mc.seed, "verify-reverse")
    last = mc.u_nodes - 1

    # outer ensemble; record nodes only when something besides f(X_t) is used
    if need_inner or not rate.time_only:
        width = 1 + (mc.u_nodes if not rate.time_only else 0) + (n_int * m_amb if need_inner else 0)

        def cols(tg, nodes):
            out = np.empty((nodes.shape[0], width))
            out[:, 0] = np.asarray(f.value(t, nodes[:, -1]), dtype=float)
            ofs = 1
            if not rate.time_only:
                kk = _rate_nodes(rate.fn, tg, nodes)
                seg = 0.5 * (kk[:, 1:] + kk[:, :-1]) * h
                fwd = np.concatenate([np.zeros((kk.shape[0], 1)), np.cumsum(seg, axis=1)], axis=1)
                out[:, ofs:ofs + mc.u_nodes] = np.exp(-2.0 * fwd[:, node_idx])
                ofs += mc.u_nodes
            if need_inner:
                flat = nodes[:, node_idx[1:-1]].reshape(nodes.shape[0], n_int * m_amb)
                out[:, ofs:] = flat
            return out

        packed = _record_columns(
            flow, s, t, x, n_steps, stream.child("outer"), mc, cols, width, n_paths=mc.n_outer
        )
    else:
        packed = _terminal_columns(
            flow, s, t, x, n_steps, stream.child("outer"), mc,
            lambda xs: np.asarray(f.value(t, xs), dtype=float), 1, n_paths=mc.n_outer,
        )
    fcol = packed[:, 0]
    fmin = float(fcol.min())
    if pt < 2.0 and fmin <= 0.0:
        raise NonPositiveField(f"reverse bound needs f > 0 along paths (sampled min {fmin:g})")

    d2mat = None
    dets = None
    if rate.time_only:
        ts_c, cum = _cum_rate(rate.fn, s, t)
        dets = np.exp(-2.0 * np.interp(unodes, ts_c, cum))
    else:
        d2mat = packed[:, 1:1 + mc.u_nodes]

    det_g = np.full(mc.u_nodes, np.nan)
    samp: dict[int, np.ndarray] = {}
    samp_half: dict[int, np.ndarray] = {}

    def node_decay(j):
        return d2mat[:, j] if d2mat is not None else dets[j]

    if q_in > 0.0:
        w_last = fcol**q_in
        samp[last] = w_last * node_decay(last)
    elif d2mat is not None:
        samp[last] = d2mat[:, last].copy()
    else:
        det_g[last] = dets[last]

    half = mc.n_inner // 2
    if need_inner:
        xs_int = packed[:, -n_int * m_amb:].reshape(mc.n_outer, n_int, m_amb)
        for jj in range(n_int):
            j = jj + 1
            u = float(unodes[j])
            vals = _inner_values(
                flow, f, u, t, xs_int[:, jj], mc.n_inner,
                _steps(u, t, mc.step), stream.child("inner", j), mc.backend,
            )
            mf = vals.mean(axis=1)
            mh = vals[:, :half].mean(axis=1)
            if float(mf.min()) <= 0.0 or float(mh.min()) <= 0.0:
                raise NonPositiveField("inner semigroup means must stay positive")
            scale = node_decay(j)
            samp[j] = mf**q_in * scale
            samp_half[j] = mh**q_in * scale
    else:
        for jj in range(n_int):
            j = jj + 1
            if d2mat is not None:
                samp[j] = d2mat[:, j].copy()
            else:
                det_g[j] = dets[j]

    samp_idx = {}
    cols_list = [fcol]
    for j in range(1, mc.u_nodes):
        if j in samp:
            samp_idx[j] = len(cols_list)
            cols_list.append(samp[j])
    bmat = np.column_stack(cols_list)

    def rhs_stat(b):
        fc = b[:, 0]
        mf = float(fc.mean())
        if p == 1.0:
            num = float((fc * np.log(fc)).mean()) - mf * math.log(mf)
            dscale = 1.0
        else:
            num = float((fc**pt).mean()) - mf**pt
            dscale = pt * (pt - 1.0)
        num = max(num, 0.0)
        g = np.empty(mc.u_nodes)
        g[0] = mf**q_in if q_in > 0.0 else 1.0
        for j in range(1, mc.u_nodes):
            g[j] = float(b[:, samp_idx[j]].mean()) if j in samp_idx else det_g[j]
        integral = float(np.trapezoid(1.0 / g, x=unodes))
        return num / (dscale * integral)

    rhs = block_estimate(bmat, rhs_stat)

    diag = {"n_steps": n_steps, "u_nodes": [float(u) for u in unodes]}
    if not rate.time_only:
        diag["hypothesis_class"] = "space-time rate, outside the verified time-only class"
    if samp_half:
        cols_half = list(cols_list)
        for j, idx in samp_idx.items():
            if j in samp_half:
                cols_half[idx] = samp_half[j]
        diag["inner_halving_delta"] = float(rhs_stat(np.column_stack(cols_half)) - rhs.mean)

    grad = bismut_pathwise(
        flow, f, s, t, x,
        n_paths=mc.n_paths, n_steps=n_steps,
        seed=mc.seed, threads=mc.threads, backend=mc.backend,
    )
    lhs = _norm_power(grad.coords, 2.0)
    cfg = _base_config(
        "verify_reverse_bound", flow, mc, rate,
        s=float(s), t=float(t), x=_coords(x), p=p, field=_field_descriptor(f),
        n_outer=mc.n_outer, n_inner=mc.n_inner, u_nodes=mc.u_nodes,
    )
    return _verdict("verify_reverse_bound", "reverse-gradient", lhs, rhs, cfg, diag)


# ---------------------------------------------------------------------------
# Harnack bounds


def _two_point_samples(flow, f, s, t, x, y, mc, tag):
    """Terminal f-samples from two starts; shared when the starts coincide."""
    n_steps = _steps(s, t, mc.step)
    stream = NoiseStream(mc.seed, tag)
    rho = float(flow.distance(s, np.asarray(x, dtype=float), np.asarray(y, dtype=float)))

    def value_cols(xs):
        return np.asarray(f.value(t, xs), dtype=float)

    fx = _terminal_columns(flow, s, t, x, n_steps, stream.child("lhs"), mc, value_cols, 1)[:, 0]
    if rho <= 1e-12:
        fy = fx
    else:
        fy = _terminal_columns(flow, s, t, y, n_steps, stream.child("rhs"), mc, value_cols, 1)[:, 0]
    return rho, fx, fy, n_steps


def verify_harnack(flow, f, s, t, x, y, p=2.0, K=None, mc=None) -> Verdict:
    """(P f)^p at x against P(f^p) at y with the distance penalty.

    rhs multiplier: exp(p rho_s(x, y)^2 / (4 (p - 1) J)) with
    J = int_s^t exp(2 int_s^r K) dr. Needs p > 1 and f >= 0.
    """
    mc = mc or DEFAULT_MC
    p = float(p)
    if p <= 1.0:
        raise ConfigInvalid("Harnack exponent needs p > 1")
    _check_interval(flow, s, t)
    rate = _rate_of(K, flow)
    _require_time_only(rate, "verify_harnack")
    rho, fx, fy, n_steps = _two_point_samples(flow, f, s, t, x, y, mc, "verify-harnack")
    fmin = float(min(fx.min(), fy.min()))
    if fmin < 0.0:
        raise NonPositiveField(f"Harnack needs f >= 0 (sampled min {fmin:g})")
    jgrow = _growth_j(rate.fn, s, t)
    penalty = math.exp(p * rho * rho / (4.0 * (p - 1.0) * jgrow))
    lhs = block_estimate(fx, lambda b: float(b.mean()) ** p)
    rhs_raw = estimate_mean(fy**p)
    rhs = Estimate(float(rhs_raw.mean) * penalty, float(rhs_raw.stderr) * penalty, rhs_raw.n)
    diag = {"n_steps": n_steps, "rho0": rho, "growth_integral": jgrow, "penalty": penalty}
    cfg = _base_config(
        "verify_harnack", flow, mc, rate,
        s=float(s), t=float(t), x=_coords(x), y=_coords(y), p=p, field=_field_descriptor(f),
    )
    return _verdict("verify_harnack", "harnack", lhs, rhs, cfg, diag)


def verify_log_harnack(flow, f, s, t, x, y, K=None, mc=None) -> Verdict:
    """P(log f) at x against log P f at y plus the distance penalty.

    rhs offset: rho_s(x, y)^2 / (4 J). Needs f >= 1.
    """
    mc = mc or DEFAULT_MC
    _check_interval(flow, s, t)
    rate = _rate_of(K, flow)
    _require_time_only(rate, "verify_log_harnack")
    rho, fx, fy, n_steps = _two_point_samples(flow, f, s, t, x, y, mc, "verify-log-harnack")
    fmin = float(min(fx.min(), fy.min()))
    if fmin < 1.0 - 1e-9:
        raise FieldBelowOne(f"log-Harnack needs f >= 1 (sampled min {fmin:g})")
    jgrow = _growth_j(rate.fn, s, t)
    offset = rho * rho / (4.0 * jgrow)
    lhs = estimate_mean(np.log(np.maximum(fx, 1e-300)))
    my = estimate_mean(fy)
    rhs = Estimate(math.log(float(my.mean)) + offset, float(my.stderr) / float(my.mean), my.n)
    diag = {"n_steps": n_steps, "rho0": rho, "growth_integral": jgrow, "offset": offset}
    cfg = _base_config(
        "verify_log_harnack", flow, mc, rate,
        s=float(s), t=float(t), x=_coords(x), y=_coords(y), field=_field_descriptor(f),
    )
    return _verdict("verify_log_harnack", "log-harnack", lhs, rhs, cfg, diag)


# ---------------------------------------------------------------------------
# two-stage hyperboundedness


def solve_q_relation(s, t, q1, K, r=None, q2=None):
    """Fill in the missing member of the exponent relation.

    The pair must satisfy (q2 - 1)/(q1 - 1) = J(t)/J(r) with
    J(u) = int_s^u exp(2 int_s^v K) dv. Given r, returns q2; given q2,
    returns the r in (s, t) solving the relation.
    """
    s, t = float(s), float(t)
    if not t > s:
        raise DegenerateInterval(f"need s < t (got s={s}, t={t})")
    if (r is None) == (q2 is None):
        raise ConfigInvalid("give exactly one of r, q2")
    q1 = float(q1)
    if q1 == 1.0:
        raise ConfigInvalid("q1 = 1 makes the relation degenerate")
    rate = _rate_of(K, None)
    _require_time_only(rate, "solve_q_relation")
    profile = _growth_profile(rate.fn, s, t)
    jt = float(profile(t)[1])
    if r is not None:
        r = float(r)
        if not (s < r < t):
            raise NoSolution("intermediate time r must lie strictly inside (s, t)")
        return 1.0 + (q1 - 1.0) * (jt / float(profile(r)[1]))
    q2 = float(q2)
    ratio = (q2 - 1.0) / (q1 - 1.0)
    if ratio <= 1.0 + 1e-14:
        raise NoSolution("no intermediate time: (q2 - 1)/(q1 - 1) must exceed 1")
    from scipy.optimize import brentq

    target = jt / ratio
    lo = s + 1e-13 * (t - s)
    return float(
        brentq(lambda rr: float(profile(rr)[1]) - target, lo, t, xtol=1e-15, maxiter=200)
    )


@dataclass(frozen=True)
class HyperboundConfig:
    """Exponent pair (q1, q2) with split time r, validated on construction.

    K must be time-only here. The pair must satisfy the growth relation
    (checked to 1e-10 relative) and fall in one of the two regimes:
    forward (1 < q1 <= q2) or reverse (0 < q2 <= q1 < 1 or q2 <= q1 < 0).
    """

    s: float
    r: float
    t: float
    q1: float
    q2: float
    K: object = 0.0

    def __post_init__(self):
        s, r, t = float(self.s), float(self.r), float(self.t)
        if not t > s:
            raise DegenerateInterval(f"need s < t (got s={s}, t={t})")
        if not (s < r < t):
            raise NoSolution("split time r must lie strictly inside (s, t)")
        q1, q2 = float(self.q1), float(self.q2)
        if q1 == 1.0 or q2 == 1.0:
            raise ConfigInvalid("exponents equal to 1 are degenerate")
        rate = _rate_of(self.K, None)
        _require_time_only(rate, "HyperboundConfig")
        profile = _growth_profile(rate.fn, s, t)
        ratio = float(profile(t)[1]) / float(profile(r)[1])
        resid = abs((q2 - 1.0) - ratio * (q1 - 1.0))
        if resid > 1e-10 * max(1.0, abs(q2 - 1.0)):
            raise ConfigInvalid(f"exponents break the growth relation (residual {resid:.3e})")
        if q1 > 1.0 and q2 >= q1:
            regime = "forward"
        elif (0.0 < q2 <= q1 < 1.0) or (q2 <= q1 < 0.0):
            regime = "reverse"
        else:
            raise ConfigInvalid("exponent pair fits neither the forward nor the reverse regime")
        object.__setattr__(self, "_regime", regime)

    @property
    def regime(self) -> str:
        return self._regime


def verify_hyperbound(flow, f, cfg: HyperboundConfig, x, mc=None) -> Verdict:
    """Two-stage power-mean bound at the split time against the direct one.

    forward regime: {P_{s,r}(P_{r,t} f)^{q2}}^{1/q2} <= (P_{s,t} f^{q1})^{1/q1};
    reverse regime: the same two sides swapped. The two-stage side runs
    n_outer paths to r and n_inner from each landing point.
    """
    mc = mc or DEFAULT_MC
    s, r, t = float(cfg.s), float(cfg.r), float(cfg.t)
    q1, q2 = float(cfg.q1), float(cfg.q2)
    _check_interval(flow, s, t)
    rate = _rate_of(cfg.K, None)
    x = np.asarray(x, dtype=float)
    strict = cfg.regime == "reverse"
    stream = NoiseStream(mc.seed, "verify-hyper")

    # plain one-stage side
    n_steps_full = _steps(s, t, mc.step)
    fvals = _terminal_columns(
        flow, s, t, x, n_steps_full, stream.child("plain"), mc,
        lambda xs: np.asarray(f.value(t, xs), dtype=float), 1,
    )[:, 0]
    # two-stage side
    n_steps_outer = _steps(s, r, mc.step)
    m_amb = np.atleast_1d(x).shape[-1]
    xr = _terminal_columns(
        flow, s, r, x, n_steps_outer, stream.child("outer"), mc,
        lambda xs: np.asarray(xs, dtype=float), m_amb, n_paths=mc.n_outer,
    )
    vals = _inner_values(
        flow, f, r, t, xr, mc.n_inner, _steps(r, t, mc.step), stream.child("inner"), mc.backend
    )
    fmin = float(min(fvals.min(), vals.min()))
    if strict and fmin <= 0.0:
        raise NonPositiveField(f"negative exponents need f > 0 (sampled min {fmin:g})")
    if fmin < 0.0:
        raise NonPositiveField(f"hyperbound needs f >= 0 (sampled min {fmin:g})")
    m_full = vals.mean(axis=1)
    m_half = vals[:, : mc.n_inner // 2].mean(axis=1)
    if strict and (float(m_full.min()) <= 0.0 or float(m_half.min()) <= 0.0):
        raise NonPositiveField("inner semigroup means must stay positive")

    def power_mean(b, q):
        return float(np.mean(b**q)) ** (1.0 / q)

    nested = block_estimate(m_full, lambda b: power_mean(b, q2))
    plain = block_estimate(fvals, lambda b: power_mean(b, q1))
    delta = power_mean(m_half, q2) - float(nested.mean)
    if cfg.regime == "forward":
        lhs, rhs, item = nested, plain, "hyperbound-forward"
    else:
        lhs, rhs, item = plain, nested, "hyperbound-reverse"
    diag = {
        "regime": cfg.regime,
        "inner_halving_delta": float(delta),
        "n_steps_outer": n_steps_outer,
        "n_steps_full": n_steps_full,
    }
    mcfg = _base_config(
        "verify_hyperbound", flow, mc, rate,
        s=s, t=t, x=_coords(x), field=_field_descriptor(f),
        n_outer=mc.n_outer, n_inner=mc.n_inner,
    )
    mcfg["r"] = r
    mcfg["q1"] = q1
    mcfg["q2"] = q2
    return _verdict("verify_hyperbound", item, lhs, rhs, mcfg, diag)


# ---------------------------------------------------------------------------
# Wasserstein contraction


def verify_contraction(flow, x, y, s, t, p=1.0, K=None, mc=None, mode=PARALLEL) -> Verdict:
    """Coupling-based W_p upper bound against rho_s(x, y) exp(-int_s^t K).

    The parallel coupling certifies any p >= 1; the mirror coupling's
    radial noise is only a supermartingale argument at p = 1, so other
    orders are rejected rather than reported as meaningless failures.
    """
    mc = mc or DEFAULT_MC
    p = float(p)
    if p < 1.0:
        raise ConfigInvalid("order p must be at least 1")
    if mode not in (PARALLEL, MIRROR):
        raise ConfigInvalid(f"unknown coupling mode {mode!r}")
    if mode == MIRROR and p != 1.0:
        raise ConfigInvalid("mirror coupling certifies only the p = 1 contraction")
    _check_interval(flow, s, t)
    rate = _rate_of(K, flow)
    _require_time_only(rate, "verify_contraction")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    rho0 = float(flow.distance(s, x, y))
    lhs = wasserstein_upper(
        flow, x, y, s, t, p=p, mode=mode,
        n_paths=mc.n_paths, step=mc.step, seed=mc.seed,
        threads=mc.threads, backend_name=mc.backend,
    )
    decay = math.exp(-_rate_total(rate.fn, s, t))
    rhs = Estimate(rho0 * decay, 0.0, 1)
    diag = {"rho0": rho0, "decay": decay, "mode": mode}
    cfg = _base_config(
        "verify_contraction", flow, mc, rate,
        s=float(s), t=float(t), x=_coords(x), y=_coords(y), p=p, mode=mode,
    )
    return _verdict("verify_contraction", "contraction", lhs, rhs, cfg, diag)


# ---------------------------------------------------------------------------
# escape-rate growth integral


@dataclass(frozen=True)
class GrowthReport:
    """Cumulative escape-rate integral F over [1, 2 r_max] plus a trend call.

    classification is a heuristic read of the tail: "divergent-trend" when
    F keeps growing at the doubled radius, "convergent-trend" when the
    increments collapse. The raw table is always available via rows() or
    to_csv() so the caller can judge for themselves.
    """

    radii: np.ndarray
    values: np.ndarray
    r_max: float
    f_half: float
    f_r: float
    f_double: float
    double_ratio: float
    window_ratio: float
    classification: str

    @property
    def divergent(self) -> bool:
        return self.classification == CLS_DIVERGENT

    def rows(self):
        return [(float(rv), float(fv)) for rv, fv in zip(self.radii, self.values)]

    def to_csv(self, dest) -> None:
        lines = ["R,F"]
        lines += [f"{rv:.12g},{fv:.12g}" for rv, fv in self.rows()]
        text = "\n".join(lines) + "\n"
        if isinstance(dest, (str, os.PathLike)):
            with open(dest, "w", encoding="utf-8") as fh:
                fh.write(text)
        else:
            dest.write(text)


def _sample_fn(fn, ts):
    """Evaluate a scalar function on a grid, vectorized when possible."""
    try:
        vals = np.asarray(fn(ts), dtype=float)
        if vals.shape == np.shape(ts):
            return vals
    except Exception:
        pass
    return np.asarray([float(fn(float(v))) for v in np.asarray(ts).ravel()], dtype=float)


def grigoryan_integral(psi, r_max=10.0, grid=4097) -> GrowthReport:
    """F(R) = int_1^R int_1^t exp(-int_r^t psi) dr dt, tabulated to 2 r_max.

    psi must be nonnegative on [1, 2 r_max] (sampled check). The inner
    integral is advanced by the exact trapezoid recursion
    I(t + h) = e^{-dPsi} (I(t) + h/2) + h/2, which never exponentiates a
    positive argument, so large psi cannot overflow.
    """
    r_max = float(r_max)
    if r_max < 2.0:
        raise ConfigInvalid("r_max must be at least 2 so the trend window [r/2, 2r] fits")
    grid = int(grid)
    if grid < 33:
        raise ConfigInvalid("grid too coarse for the growth table")
    ts = np.linspace(1.0, 2.0 * r_max, grid)
    pv = _sample_fn(psi, ts)
    pmin = float(pv.min())
    if pmin < -1e-12:
        raise ConfigInvalid(f"psi must be nonnegative (sampled min {pmin:g})")
    pv = np.clip(pv, 0.0, None)
    h = float(ts[1] - ts[0])
    seg = 0.5 * (pv[:-1] + pv[1:]) * h
    big = np.concatenate([[0.0], np.cumsum(seg)])
    # Duhamel recursion with exact cells for piecewise-constant psi; a plain
    # trapezoid cell has an h/2 floor once psi*h >> 1 and fakes linear growth
    dpsi = big[1:] - big[:-1]
    decays = np.exp(-dpsi)
    safe = np.where(dpsi > 1e-12, dpsi, 1.0)
    cells = np.where(dpsi > 1e-12, -h * np.expm1(-dpsi) / safe, h * (1.0 - 0.5 * dpsi))
    inner = np.empty(grid)
    inner[0] = 0.0
    acc = 0.0
    for k in range(grid - 1):
        acc = decays[k] * acc + cells[k]
        inner[k + 1] = acc
    seg2 = 0.5 * (inner[:-1] + inner[1:]) * h
    fvals = np.concatenate([[0.0], np.cumsum(seg2)])
    f_half = float(np.interp(0.5 * r_max, ts, fvals))
    f_r = float(np.interp(r_max, ts, fvals))
    f_double = float(fvals[-1])
    double_ratio = f_double / f_r if f_r > 0.0 else math.inf
    num_w = f_double - f_r
    den_w = f_r - f_half
    if num_w <= 1e-9 * max(f_double, 1.0):
        # tail increment below resolution: F has flattened out
        window_ratio = 0.0
    elif den_w > 0.0:
        window_ratio = num_w / den_w
    else:
        window_ratio = math.inf
    if f_r <= 1e-280:
        cls = CLS_CONVERGENT
    elif double_ratio >= _DOUBLE_THRESHOLD:
        cls = CLS_DIVERGENT
    elif window_ratio <= _WINDOW_THRESHOLD:
        cls = CLS_CONVERGENT
    else:
        # increments not collapsing fast enough to call convergent
        cls = CLS_DIVERGENT
    mask = ts <= r_max + 1e-12
    return GrowthReport(
        radii=ts[mask].copy(),
        values=fvals[mask].copy(),
        r_max=r_max,
        f_half=f_half,
        f_r=f_r,
        f_double=f_double,
        double_ratio=float(double_ratio),
        window_ratio=float(window_ratio),
        classification=cls,
    )


# ---------------------------------------------------------------------------
# escape criterion report


@dataclass(frozen=True)
class NonexplosionSpec:
    """Inputs for the escape-criterion report.

    variant "direct": psi itself drives the growth integral.
    variant "integrated": psi is built as the running integral of phi.
    variant "comparison": h, phi, psi must all be nonnegative and
    nondecreasing, and the radial comparison inequality
        sqrt((d-1) phi(rho)) coth(sqrt(phi(rho)/(d-1)) rho) <= h(t) psi(rho)
    is sampled on a (t, rho) grid alongside the growth integral.
    """

    variant: str = VARIANT_DIRECT
    psi: Optional[Callable] = None
    phi: Optional[Callable] = None
    h: Optional[Callable] = None
    dim: int = 2
    r_max: float = 10.0
    t_max: float = 1.0
    grid: int = 4097

    def __post_init__(self):
        if self.variant not in (VARIANT_DIRECT, VARIANT_INTEGRATED, VARIANT_COMPARISON):
            raise ConfigInvalid(f"unknown variant {self.variant!r}")
        if self.variant == VARIANT_DIRECT and self.psi is None:
            raise ConfigInvalid("variant 'direct' needs psi")
        if self.variant == VARIANT_INTEGRATED and self.phi is None:
            raise ConfigInvalid("variant 'integrated' needs phi")
        if self.variant == VARIANT_COMPARISON and (self.psi is None or self.phi is None):
            raise ConfigInvalid("variant 'comparison' needs both psi and phi")
        if self.dim < 2:
            raise ConfigInvalid("comparison dimension must be at least 2")
        if self.r_max < 2.0 or self.t_max <= 0.0:
            raise ConfigInvalid("r_max must be >= 2 and t_max positive")


@dataclass(frozen=True)
class NonexplosionReport:
    """Growth verdict plus sampled hypothesis checks; never raises on content."""

    variant: str
    criterion_satisfied: bool
    hypotheses: dict
    growth: GrowthReport
    details: dict

    def as_record(self) -> dict:
        return {
            "variant": self.variant,
            "criterion_satisfied": bool(self.criterion_satisfied),
            "hypotheses": dict(self.hypotheses),
            "classification": self.growth.classification,
            "f_r": self.growth.f_r,
            "f_double": self.growth.f_double,
            "details": dict(self.details),
        }


def _require_nonneg(fn, ts, label):
    vals = _sample_fn(fn, ts)
    vmin = float(vals.min())
    if vmin < -1e-12:
        raise ConfigInvalid(f"{label} must be nonnegative (sampled min {vmin:g})")
    return np.clip(vals, 0.0, None)


def _nondecreasing(vals) -> bool:
    tol = 1e-9 * np.maximum(1.0, np.abs(vals[:-1]))
    return bool(np.all(np.diff(vals) >= -tol))


def _integral_closure(phi, upper, grid):
    ts = np.linspace(0.0, upper, grid)
    pv = _require_nonneg(phi, ts, "phi")
    seg = 0.5 * (pv[1:] + pv[:-1]) * (ts[1] - ts[0])
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    return lambda u: np.interp(u, ts, cum)


def nonexplosion_check(spec: NonexplosionSpec) -> NonexplosionReport:
    """Report whether the sampled escape criterion is satisfied.

    criterion_satisfied needs the growth integral to trend divergent and
    every sampled hypothesis of the chosen variant to hold. Hypothesis
    failures are reported, not raised; sampled negativity of psi/phi/h is
    a configuration error and raises.
    """
    rgrid = np.linspace(1.0, 2.0 * spec.r_max, min(spec.grid, 2049))
    tgrid = np.linspace(0.0, spec.t_max, 129)
    hypotheses = {}
    details = {"r_max": spec.r_max, "grid": spec.grid}
    hfun = spec.h if spec.h is not None else (lambda u: np.ones_like(np.asarray(u, dtype=float)))
    hv = _require_nonneg(hfun, tgrid, "h")

    if spec.variant == VARIANT_DIRECT:
        _require_nonneg(spec.psi, rgrid, "psi")
        psi_eff = spec.psi
    elif spec.variant == VARIANT_INTEGRATED:
        psi_eff = _integral_closure(spec.phi, 2.0 * spec.r_max, spec.grid)
        details["psi"] = "running integral of phi from 0"
    else:
        pv = _require_nonneg(spec.phi, rgrid, "phi")
        sv = _require_nonneg(spec.psi, rgrid, "psi")
        hypotheses["h_nondecreasing"] = _nondecreasing(hv)
        hypotheses["phi_nondecreasing"] = _nondecreasing(pv)
        hypotheses["psi_nondecreasing"] = _nondecreasing(sv)
        margin = _comparison_margin(pv, sv, hv, spec.dim, rgrid)
        hypotheses["radial_comparison"] = margin >= -1e-9
        details["comparison_margin"] = margin
        psi_eff = spec.psi

    growth = grigoryan_integral(psi_eff, spec.r_max, spec.grid)
    hypotheses["growth_divergent"] = growth.divergent
    criterion = all(hypotheses.values())
    return NonexplosionReport(
        variant=spec.variant,
        criterion_satisfied=bool(criterion),
        hypotheses=hypotheses,
        growth=growth,
        details=details,
    )


def _comparison_margin(phi_vals, psi_vals, h_vals, dim, rgrid):
    """Worst margin of h(t) psi(rho) minus the radial comparison term."""
    a = np.sqrt(phi_vals / (dim - 1.0))
    z = a * rgrid
    safe = np.where(z > 1e-8, z, 1.0)
    lhs = np.where(z > 1e-8, (dim - 1.0) * a / np.tanh(safe), (dim - 1.0) / rgrid)
    rhs = np.outer(h_vals, psi_vals)
    return float((rhs - lhs[None, :]).min())


# ---------------------------------------------------------------------------
# shipped verifier matrix


@dataclass(frozen=True)
class MatrixEntry:
    """One shipped verifier configuration; run() returns its Verdict."""

    name: str
    op: str
    item: str
    base_seed: int
    runner: Callable = dc_field(repr=False, compare=False)

    def run(self, seed=None, threads=None, backend=None) -> Verdict:
        return self.runner(seed, threads, backend)


def _entry(name, op, item, base_mc, builder) -> MatrixEntry:
    def runner(seed=None, threads=None, backend=None):
        mc = base_mc
        if seed is not None:
            mc = replace(mc, seed=int(seed))
        if threads is not None:
            mc = replace(mc, threads=int(threads))
        if backend is not None:
            mc = replace(mc, backend=backend)
        return builder(mc)

    return MatrixEntry(name, op, item, base_mc.seed, runner)


def builtin_matrix() -> list:
    """Shipped verifier configurations, one Verdict each.

    Covers every verifier, orders p in {1, 2}, both coupling modes, and
    static as well as flowing metrics. Budgets are tuned so the whole
    matrix stays well inside a minute on the fallback engine.
    """
    entries = []
    sph = sphere_flow(2)
    x_off = np.array([math.cos(0.7), 0.0, math.sin(0.7)])

    # gradient decay
    def g_flat(mc):
        flow = euclidean_flow(2)
        f = Linear(flow, [0.6, -0.8])
        return verify_gradient_inequality(flow, f, 0.0, 0.3, [0.2, -0.1], p=1.0, K=0.0, mc=mc)

    entries.append(_entry(
        "gradient-flat-exact", "verify_gradient_inequality", "gradient-decay",
        MCConfig(n_paths=512, step=3e-3, seed=101), g_flat,
    ))

    def g_sphere(mc):
        f = AmbientCoordinate(sph, 2)
        return verify_gradient_inequality(sph, f, 0.0, 0.3, x_off, p=1.0, K=1.0, mc=mc)

    entries.append(_entry(
        "gradient-sphere", "verify_gradient_inequality", "gradient-decay",
        MCConfig(n_paths=1500, step=2.5e-3, seed=102), g_sphere,
    ))

    def g_torus(mc):
        flow = torus_uniform_exp_flow(2, 0.5)
        f = SinAxis(flow, axis=0)
        return verify_gradient_inequality(flow, f, 0.0, 0.3, [0.8, 2.5], p=2.0, K=0.5, mc=mc)

    entries.append(_entry(
        "gradient-torus-flow", "verify_gradient_inequality", "gradient-decay",
        MCConfig(n_paths=1500, step=2.5e-3, seed=103), g_torus,
    ))

    # entropy bound
    def e_flat(mc):
        flow = euclidean_flow(2)
        f = SinAxis(flow, axis=0, offset=2.0)
        return verify_entropy_bound(flow, f, 0.0, 0.25, [0.8, 0.3], p=2.0, K=0.0, mc=mc)

    entries.append(_entry(
        "entropy-flat", "verify_entropy_bound", "entropy",
        MCConfig(n_paths=2000, step=2e-3, seed=104), e_flat,
    ))

    def e_sphere(mc):
        f = AmbientCoordinate(sph, 2, offset=2.0)
        return verify_entropy_bound(sph, f, 0.0, 0.3, x_off, p=1.0, K=1.0, mc=mc)

    entries.append(_entry(
        "entropy-sphere", "verify_entropy_bound", "entropy",
        MCConfig(n_paths=2000, step=2.5e-3, seed=105), e_sphere,
    ))

    # reverse bound
    def r_flat(mc):
        flow = euclidean_flow(2)
        f = TruncatedExp(flow)
        return verify_reverse_bound(flow, f, 0.0, 0.3, [1.0, 0.0], p=1.0, K=0.0, mc=mc)

    entries.append(_entry(
        "reverse-flat-nested", "verify_reverse_bound", "reverse-gradient",
        MCConfig(n_paths=4000, step=5e-3, seed=106, n_outer=1200, n_inner=96, u_nodes=6), r_flat,
    ))

    def r_sphere(mc):
        f = AmbientCoordinate(sph, 2, offset=2.0)
        return verify_reverse_bound(sph, f, 0.0, 0.3, x_off, p=2.0, K=1.0, mc=mc)

    entries.append(_entry(
        "reverse-sphere", "verify_reverse_bound", "reverse-gradient",
        MCConfig(n_paths=2000, step=2.5e-3, seed=107, n_outer=2000, u_nodes=6), r_sphere,
    ))

    # Harnack bounds
    y_sph = np.array([math.cos(0.5), math.sin(0.5), 0.0])

    def h_sphere(mc):
        f = AmbientCoordinate(sph, 2, offset=1.0)
        return verify_harnack(sph, f, 0.0, 0.3, [1.0, 0.0, 0.0], y_sph, p=2.0, K=1.0, mc=mc)

    entries.append(_entry(
        "harnack-sphere", "verify_harnack", "harnack",
        MCConfig(n_paths=2000, step=2.5e-3, seed=108), h_sphere,
    ))

    def h_gauss(mc):
        flow = euclidean_flow(2)
        f = GaussianBump(flow, [0.0, 0.0], 1.0)
        return verify_harnack(flow, f, 0.0, 0.25, [0.3, -0.2], [-0.4, 0.5], p=2.0, K=0.0, mc=mc)

    entries.append(_entry(
        "harnack-flat-gaussian", "verify_harnack", "harnack",
        MCConfig(n_paths=2000, step=2e-3, seed=109), h_gauss,
    ))

    def lh_sphere(mc):
        f = AmbientCoordinate(sph, 2, offset=2.0)
        return verify_log_harnack(sph, f, 0.0, 0.3, [1.0, 0.0, 0.0], y_sph, K=1.0, mc=mc)

    entries.append(_entry(
        "log-harnack-sphere", "verify_log_harnack", "log-harnack",
        MCConfig(n_paths=2000, step=2.5e-3, seed=110), lh_sphere,
    ))

    # hyperboundedness
    def hy_forward(mc):
        f = Custom(lambda t, y: np.exp(y[:, 2]), label="exp_height")
        r = solve_q_relation(0.0, 0.4, 2.0, 1.0, q2=3.0)
        cfg = HyperboundConfig(0.0, r, 0.4, 2.0, 3.0, K=1.0)
        return verify_hyperbound(sph, f, cfg, [1.0, 0.0, 0.0], mc=mc)

    entries.append(_entry(
        "hyper-sphere-forward", "verify_hyperbound", "hyperbound-forward",
        MCConfig(n_paths=3000, step=4e-3, seed=111, n_outer=1000, n_inner=250), hy_forward,
    ))

    def hy_reverse(mc):
        flow = euclidean_flow(2)
        f = GaussianBump(flow, [0.0, 0.0], 0.7)
        q2 = solve_q_relation(0.0, 0.3, 0.5, 0.0, r=0.2)
        cfg = HyperboundConfig(0.0, 0.2, 0.3, 0.5, q2, K=0.0)
        return verify_hyperbound(flow, f, cfg, [0.5, 0.0], mc=mc)

    entries.append(_entry(
        "hyper-flat-reverse", "verify_hyperbound", "hyperbound-reverse",
        MCConfig(n_paths=3000, step=4e-3, seed=112, n_outer=1200, n_inner=256), hy_reverse,
    ))

    # contraction, parallel coupling
    def c_flat(mc):
        flow = euclidean_flow(2)
        return verify_contraction(flow, [0.0, 0.0], [1.0, 0.0], 0.0, 0.25, p=2.0, K=0.0, mc=mc)

    entries.append(_entry(
        "contract-flat-parallel", "verify_contraction", "contraction",
        MCConfig(n_paths=400, step=5e-3, seed=113), c_flat,
    ))

    def c_sphere(mc):
        flow = sphere_flow(2, scale=static_scale(2.0))
        y = [math.cos(0.6), math.sin(0.6), 0.0]
        return verify_contraction(flow, [1.0, 0.0, 0.0], y, 0.0, 0.4, p=1.0, K=0.5, mc=mc)

    entries.append(_entry(
        "contract-sphere-parallel", "verify_contraction", "contraction",
        MCConfig(n_paths=1500, step=2.5e-3, seed=114), c_sphere,
    ))

    def c_ricci(mc):
        flow = sphere_ricci_flow(2)
        y = [math.cos(0.8), math.sin(0.8), 0.0]
        return verify_contraction(flow, [1.0, 0.0, 0.0], y, 0.0, 0.2, p=1.0, mc=mc)

    entries.append(_entry(
        "contract-ricci-parallel", "verify_contraction", "contraction",
        MCConfig(n_paths=1500, step=2e-3, seed=115), c_ricci,
    ))

    def c_torus(mc):
        flow = torus_uniform_exp_flow(2, 0.5)
        return verify_contraction(
            flow, [math.pi - 0.4, math.pi], [math.pi + 0.4, math.pi],
            0.0, 0.4, p=2.0, K=0.5, mc=mc,
        )

    entries.append(_entry(
        "contract-torus-parallel", "verify_contraction", "contraction",
        MCConfig(n_paths=1200, step=2.5e-3, seed=116), c_torus,
    ))

    def c_hyper(mc):
        flow = hyperbolic_flow(2)
        y = [math.cosh(0.7), math.sinh(0.7), 0.0]
        return verify_contraction(flow, [1.0, 0.0, 0.0], y, 0.0, 0.25, p=2.0, K=-1.0, mc=mc)

    entries.append(_entry(
        "contract-hyperbolic-parallel", "verify_contraction", "contraction",
        MCConfig(n_paths=1200, step=2.5e-3, seed=117), c_hyper,
    ))

    # contraction, mirror coupling
    def c_mirror_flat(mc):
        flow = euclidean_flow(2)
        return verify_contraction(
            flow, [0.0, 0.0], [1.0, 0.0], 0.0, 0.25, p=1.0, K=0.0, mc=mc, mode=MIRROR
        )

    entries.append(_entry(
        "contract-flat-mirror", "verify_contraction", "contraction",
        MCConfig(n_paths=2000, step=2e-3, seed=118), c_mirror_flat,
    ))

    def c_mirror_torus(mc):
        flow = torus_uniform_exp_flow(2, 0.5)
        return verify_contraction(
            flow, [math.pi - 0.4, math.pi], [math.pi + 0.4, math.pi],
            0.0, 0.4, p=1.0, K=0.5, mc=mc, mode=MIRROR,
        )

    entries.append(_entry(
        "contract-torus-mirror", "verify_contraction", "contraction",
        MCConfig(n_paths=2000, step=2.5e-3, seed=119), c_mirror_torus,
    ))

    return entries
