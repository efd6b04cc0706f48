"""Model geometries whose metric evolves along a prescribed schedule.

A :class:`MetricFlow` bundles a fixed base manifold (flat space, round
sphere, hyperboloid or flat torus) with a time-dependent scale applied to
the base metric, plus an optional first-order drift field. All geodesic
calculus (distance, exponential and logarithm maps, parallel and mirror
transport) is closed-form on these models and is exposed in batched form:
point arguments accept shape ``(m,)`` or ``(n, m)``.

Coordinate conventions
----------------------
* euclidean: chart coordinates in R^d.
* sphere: unit vectors in R^(d+1); the metric is ``c(t)`` times the round
  one induced from the embedding.
* hyperbolic: hyperboloid sheet ``<x,x>_M = -1, x[0] > 0`` in Minkowski
  space R^(1,d) with signature (-,+,...,+); metric ``c(t)`` times the
  induced one.
* torus: chart coordinates in [0, 2*pi)^d with metric
  ``sum_i a_i(t) dx_i^2`` (per-axis scale factors, not squared).

Because the scale factors are spatially constant, the Levi-Civita
connection at each fixed time coincides with the one of the base metric,
so transports and geodesic traces are time-independent while lengths,
angles and curvature magnitudes are not.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    ConfigInvalid,
    CutLocusAmbiguity,
    DegenerateFrame,
    HorizonExceeded,
    OffManifold,
)

TWO_PI = 2.0 * math.pi

# time arguments must stay this far below the degeneration horizon
HORIZON_MARGIN = 1e-3

# cut-locus guard scale used by coupling regularization
CUT_MARGIN_FACTOR = 0.1

_POINT_TOL = 1e-8
_TANGENT_TOL = 1e-8


# ---------------------------------------------------------------------------
# scale schedules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScaleSchedule:
    """Scalar metric scale c(t) with closed-form slope.

    Supported forms: ``static`` (c0), ``linear`` (c0 + rate * t) and
    ``exp`` (c0 * exp(rate * t)).
    """

    form: str = "static"
    c0: float = 1.0
    rate: float = 0.0

    def __post_init__(self):
        if self.form not in ("static", "linear", "exp"):
            raise ConfigInvalid(f"unknown scale schedule form {self.form!r}")
        if self.c0 <= 0.0:
            raise ConfigInvalid("scale schedule requires c0 > 0")

    def value(self, t):
        if self.form == "static":
            return self.c0 * np.ones_like(np.asarray(t, dtype=float))
        if self.form == "linear":
            return self.c0 + self.rate * np.asarray(t, dtype=float)
        return self.c0 * np.exp(self.rate * np.asarray(t, dtype=float))

    def slope(self, t):
        if self.form == "static":
            return np.zeros_like(np.asarray(t, dtype=float))
        if self.form == "linear":
            return self.rate * np.ones_like(np.asarray(t, dtype=float))
        return self.rate * self.c0 * np.exp(self.rate * np.asarray(t, dtype=float))

    @property
    def horizon(self) -> float:
        """First time at which the scale hits zero (inf if never)."""
        if self.form == "linear" and self.rate < 0.0:
            return -self.c0 / self.rate
        return math.inf


def static_scale(c0: float = 1.0) -> ScaleSchedule:
    return ScaleSchedule("static", c0, 0.0)


def linear_scale(c0: float, rate: float) -> ScaleSchedule:
    return ScaleSchedule("linear", c0, rate)


def exp_scale(c0: float, rate: float) -> ScaleSchedule:
    return ScaleSchedule("exp", c0, rate)


# ---------------------------------------------------------------------------
# drift fields
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DriftField:
    """First-order drift completing the generator (metric Laplacian + drift).

    ``zero`` is valid on every flow. ``linear_radial`` is the Euclidean
    field Z(x) = lam * x. ``custom`` wraps user callables; both callables
    must be vectorized over a batch of points and the covariant-derivative
    callable must be linear in the direction argument.
    """

    kind: str = "zero"
    lam: float = 0.0
    value_fn: Optional[Callable] = None
    cov_deriv_fn: Optional[Callable] = None

    def __post_init__(self):
        if self.kind not in ("zero", "linear_radial", "custom"):
            raise ConfigInvalid(f"unknown drift kind {self.kind!r}")
        if self.kind == "custom" and self.value_fn is None:
            raise ConfigInvalid("custom drift requires value_fn")

    @property
    def is_zero(self) -> bool:
        return self.kind == "zero"

    def value(self, t, x: np.ndarray) -> np.ndarray:
        if self.kind == "zero":
            return np.zeros_like(x)
        if self.kind == "linear_radial":
            return self.lam * x
        return np.asarray(self.value_fn(t, x), dtype=float)

    def covariant_derivative(self, t, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Covariant derivative of the drift along v (same batch shape)."""
        if self.kind == "zero":
            return np.zeros_like(v)
        if self.kind == "linear_radial":
            return self.lam * v
        if self.cov_deriv_fn is None:
            raise ConfigInvalid("custom drift is missing cov_deriv_fn")
        return np.asarray(self.cov_deriv_fn(t, x, v), dtype=float)


def zero_drift() -> DriftField:
    return DriftField("zero")


def linear_radial_drift(lam: float) -> DriftField:
    return DriftField("linear_radial", lam=lam)


def custom_drift(value_fn, cov_deriv_fn=None) -> DriftField:
    return DriftField("custom", value_fn=value_fn, cov_deriv_fn=cov_deriv_fn)


@dataclass(frozen=True)
class CurvatureBound:
    """Lower bound rate K(t) for the damping operator of a flow.

    ``rate`` maps time to the guaranteed smallest eigenvalue of the
    damping matrix. For the builtin models the bound depends on time only
    (``time_only`` is True) and is attained, not merely valid.
    """

    rate: Callable
    time_only: bool = True
    note: str = ""

    def integral(self, s: float, t: float, n: int = 512) -> float:
        """Trapezoid integral of the rate over [s, t]."""
        ts = np.linspace(s, t, n + 1)
        return float(np.trapezoid(self.rate(ts), ts))


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _as_batch(x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim == 2:
        return arr, False
    raise ValueError("points must have shape (m,) or (n, m)")


def _restore(arr: np.ndarray, squeeze: bool):
    return arr[0] if squeeze else arr


def _wrap_angle(delta: np.ndarray) -> np.ndarray:
    """Map axis differences to the representative in [-pi, pi)."""
    return np.mod(delta + math.pi, TWO_PI) - math.pi


class MetricFlow:
    """A base manifold together with a metric scale schedule and a drift.

    Use the module-level constructors (:func:`euclidean_flow`,
    :func:`sphere_flow`, :func:`hyperbolic_flow`, :func:`torus_flow`,
    :func:`sphere_ricci_flow`) rather than instantiating directly.
    """

    def __init__(
        self,
        kind: str,
        dim: int,
        scale: Optional[ScaleSchedule] = None,
        axis_scales: Optional[Sequence[ScaleSchedule]] = None,
        drift: Optional[DriftField] = None,
    ):
        if kind not in ("euclidean", "sphere", "hyperbolic", "torus"):
            raise ConfigInvalid(f"unknown flow kind {kind!r}")
        if dim < 1:
            raise ConfigInvalid("dim must be >= 1")
        if kind == "sphere" and dim < 2:
            raise ConfigInvalid("sphere flow requires dim >= 2")
        self.kind = kind
        self.dim = int(dim)
        self.drift = drift if drift is not None else zero_drift()
        if self.drift.kind == "linear_radial" and kind != "euclidean":
            raise ConfigInvalid("linear_radial drift is defined on euclidean flows only")
        if kind == "torus":
            if axis_scales is None:
                axis_scales = tuple(static_scale() for _ in range(dim))
            axis_scales = tuple(axis_scales)
            if len(axis_scales) != dim:
                raise ConfigInvalid("torus flow needs one scale schedule per axis")
            self.axis_scales = axis_scales
            self.scale = None
        else:
            self.scale = scale if scale is not None else static_scale()
            self.axis_scales = None
        self.ambient_dim = dim + 1 if kind in ("sphere", "hyperbolic") else dim

    # -- schedules ---------------------------------------------------------

    @property
    def horizon(self) -> float:
        if self.kind == "torus":
            return min(s.horizon for s in self.axis_scales)
        return self.scale.horizon

    def check_time(self, t) -> None:
        """Reject times at or beyond the degeneration horizon."""
        tmax = float(np.max(np.asarray(t, dtype=float)))
        if tmax > self.horizon - HORIZON_MARGIN:
            raise HorizonExceeded(
                f"time {tmax} exceeds horizon {self.horizon} - {HORIZON_MARGIN}"
            )

    def c(self, t):
        """Scalar scale value (arrays broadcast). Torus: per-axis, shape (d,)."""
        if self.kind == "torus":
            return np.stack([s.value(t) for s in self.axis_scales], axis=-1)
        return self.scale.value(t)

    def c_slope(self, t):
        if self.kind == "torus":
            return np.stack([s.slope(t) for s in self.axis_scales], axis=-1)
        return self.scale.slope(t)

    # -- point/tangent validation ------------------------------------------

    def validate_point(self, x) -> None:
        xb, _ = _as_batch(x)
        if xb.shape[1] != self.ambient_dim:
            raise OffManifold(
                f"point has {xb.shape[1]} coordinates, expected {self.ambient_dim}"
            )
        if self.kind == "sphere":
            err = np.abs(np.einsum("ij,ij->i", xb, xb) - 1.0)
            if np.any(err > _POINT_TOL):
                raise OffManifold("sphere point is not a unit vector")
        elif self.kind == "hyperbolic":
            q = self._mdot(xb, xb)
            if np.any(np.abs(q + 1.0) > _POINT_TOL) or np.any(xb[:, 0] <= 0.0):
                raise OffManifold("point is not on the upper hyperboloid sheet")
        elif self.kind == "torus":
            if np.any(xb < -1e-12) or np.any(xb >= TWO_PI + 1e-12):
                raise OffManifold("torus point outside the fundamental chart")

    def validate_tangent(self, x, v) -> None:
        xb, _ = _as_batch(x)
        vb, _ = _as_batch(v)
        if self.kind == "sphere":
            err = np.abs(np.einsum("ij,ij->i", xb, vb))
            scale = 1.0 + np.linalg.norm(vb, axis=1)
            if np.any(err > _TANGENT_TOL * scale):
                raise OffManifold("vector is not tangent to the sphere")
        elif self.kind == "hyperbolic":
            err = np.abs(self._mdot(xb, vb))
            scale = 1.0 + np.linalg.norm(vb, axis=1)
            if np.any(err > _TANGENT_TOL * scale):
                raise OffManifold("vector is not tangent to the hyperboloid")

    @staticmethod
    def _mdot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
        out = np.einsum("...j,...j->...", a[..., 1:], b[..., 1:])
        return out - a[..., 0] * b[..., 0]

    # -- metric tensors ------------------------------------------------------

    def metric_at(self, t: float, x=None) -> np.ndarray:
        """Gram matrix of the ambient/chart coordinates at time t.

        For the embedded models the tensor acts on ambient vectors; its
        restriction to the tangent space is the metric. Spatially constant,
        so the point argument is optional.
        """
        self.check_time(t)
        if self.kind == "torus":
            return np.diag(np.asarray(self.c(t), dtype=float))
        cval = float(self.c(t))
        m = self.ambient_dim
        if self.kind == "hyperbolic":
            eta = np.eye(m)
            eta[0, 0] = -1.0
            return cval * eta
        return cval * np.eye(m)

    def metric_slope_at(self, t: float, x=None) -> np.ndarray:
        """Time derivative of :meth:`metric_at` (same coordinate convention)."""
        self.check_time(t)
        if self.kind == "torus":
            return np.diag(np.asarray(self.c_slope(t), dtype=float))
        sval = float(self.c_slope(t))
        m = self.ambient_dim
        if self.kind == "hyperbolic":
            eta = np.eye(m)
            eta[0, 0] = -1.0
            return sval * eta
        return sval * np.eye(m)

    def inner(self, t: float, x, v, w) -> np.ndarray:
        """g_t inner product of tangent vectors v, w at x (batched)."""
        vb, sq = _as_batch(v)
        wb, _ = _as_batch(w)
        if self.kind == "torus":
            a = np.asarray(self.c(t), dtype=float)
            out = np.einsum("ij,ij,j->i", vb, wb, a)
        elif self.kind == "hyperbolic":
            out = float(self.c(t)) * self._mdot(vb, wb)
        else:
            out = float(self.c(t)) * np.einsum("ij,ij->i", vb, wb)
        return _restore(out, sq)

    def norm(self, t: float, x, v) -> np.ndarray:
        return np.sqrt(np.maximum(self.inner(t, x, v, v), 0.0))

    # -- distances and geodesics ---------------------------------------------

    def distance(self, t: float, x, y):
        """Length of the minimal g_t geodesic between x and y."""
        self.check_time(t)
        xb, sq = _as_batch(x)
        yb, _ = _as_batch(y)
        if self.kind == "euclidean":
            rho = math.sqrt(float(self.c(t))) * np.linalg.norm(yb - xb, axis=1)
        elif self.kind == "sphere":
            dots = np.clip(np.einsum("ij,ij->i", xb, yb), -1.0, 1.0)
            rho = math.sqrt(float(self.c(t))) * np.arccos(dots)
        elif self.kind == "hyperbolic":
            m = np.maximum(-self._mdot(xb, yb), 1.0)
            rho = math.sqrt(float(self.c(t))) * np.arccosh(m)
        else:
            a = np.asarray(self.c(t), dtype=float)
            delta = _wrap_angle(yb - xb)
            rho = np.sqrt(np.einsum("ij,ij,j->i", delta, delta, a))
        return _restore(rho, sq)

    def cut_margin(self, t: float, x, y):
        """Distance gap protecting the minimal geodesic from ambiguity.

        Infinite on simply connected nonpositively curved models. On the
        sphere it is the length distance to the antipode; on the torus the
        gap between the shortest and second-shortest lattice representative.
        """
        self.check_time(t)
        xb, sq = _as_batch(x)
        yb, _ = _as_batch(y)
        if self.kind in ("euclidean", "hyperbolic"):
            out = np.full(xb.shape[0], np.inf)
            return _restore(out, sq)
        if self.kind == "sphere":
            dots = np.clip(np.einsum("ij,ij->i", xb, yb), -1.0, 1.0)
            theta = np.arccos(dots)
            out = math.sqrt(float(self.c(t))) * (math.pi - theta)
            return _restore(out, sq)
        a = np.asarray(self.c(t), dtype=float)
        delta = _wrap_angle(yb - xb)
        best_sq = np.einsum("ij,ij,j->i", delta, delta, a)
        # flipping one axis to the competing representative; others are longer
        flipped = np.abs(delta) - TWO_PI
        alt_sq = best_sq[:, None] - a[None, :] * delta**2 + a[None, :] * flipped**2
        second = np.sqrt(np.min(alt_sq, axis=1))
        out = second - np.sqrt(best_sq)
        return _restore(out, sq)

    def exp_map(self, t: float, x, v):
        """Point reached at parameter 1 along the g_t geodesic from x with velocity v."""
        self.check_time(t)
        xb, sq = _as_batch(x)
        vb, _ = _as_batch(v)
        if self.kind == "euclidean":
            return _restore(xb + vb, sq)
        if self.kind == "torus":
            return _restore(np.mod(xb + vb, TWO_PI), sq)
        if self.kind == "sphere":
            alpha = np.linalg.norm(vb, axis=1)  # round arclength traveled
            out = np.empty_like(xb)
            small = alpha < 1e-14
            safe = np.where(small, 1.0, alpha)
            vhat = vb / safe[:, None]
            ca, sa = np.cos(alpha)[:, None], np.sin(alpha)[:, None]
            out = ca * xb + sa * vhat
            out[small] = xb[small]
            out /= np.linalg.norm(out, axis=1, keepdims=True)
            return _restore(out, sq)
        alpha = np.sqrt(np.maximum(self._mdot(vb, vb), 0.0))
        small = alpha < 1e-14
        safe = np.where(small, 1.0, alpha)
        vhat = vb / safe[:, None]
        ca, sa = np.cosh(alpha)[:, None], np.sinh(alpha)[:, None]
        out = ca * xb + sa * vhat
        out[small] = xb[small]
        q = -self._mdot(out, out)
        out /= np.sqrt(np.maximum(q, 1e-300))[:, None]
        return _restore(out, sq)

    def log_map(self, t: float, x, y):
        """Initial velocity of the minimal g_t geodesic from x reaching y at parameter 1."""
        self.check_time(t)
        xb, sq = _as_batch(x)
        yb, _ = _as_batch(y)
        if self.kind == "euclidean":
            return _restore(yb - xb, sq)
        if self.kind == "torus":
            delta = _wrap_angle(yb - xb)
            if np.any(np.isclose(np.abs(delta), math.pi, atol=1e-12)):
                raise CutLocusAmbiguity("antipodal torus axis: two minimal representatives")
            return _restore(delta, sq)
        if self.kind == "sphere":
            dots = np.clip(np.einsum("ij,ij->i", xb, yb), -1.0, 1.0)
            if np.any(dots < -1.0 + 1e-12):
                raise CutLocusAmbiguity("antipodal sphere points: minimal geodesic not unique")
            theta = np.arccos(dots)
            perp = yb - dots[:, None] * xb
            nrm = np.linalg.norm(perp, axis=1)
            small = theta < 1e-14
            safe = np.where(small, 1.0, nrm)
            out = (theta / safe)[:, None] * perp
            out[small] = 0.0
            return _restore(out, sq)
        m = np.maximum(-self._mdot(xb, yb), 1.0)
        theta = np.arccosh(m)
        perp = yb - m[:, None] * xb
        nrm = np.sqrt(np.maximum(self._mdot(perp, perp), 0.0))
        small = theta < 1e-14
        safe = np.where(small, 1.0, nrm)
        out = (theta / safe)[:, None] * perp
        out[small] = 0.0
        return _restore(out, sq)

    def connecting_unit(self, t: float, x, y):
        """Unit (g_t) departure and arrival velocities of the minimal geodesic.

        Returns ``(rho, e_x, e_y)`` where e_x is the unit tangent at x
        pointing toward y and e_y the unit arrival tangent at y (pointing
        away from x). Undefined entries (rho == 0) are zero-filled.
        """
        xb, sq = _as_batch(x)
        yb, _ = _as_batch(y)
        rho = np.atleast_1d(self.distance(t, x, y))
        vx = _as_batch(self.log_map(t, x, y))[0]
        nx = self.norm(t, xb, vx)
        nx = np.where(nx < 1e-300, 1.0, np.atleast_1d(nx))
        e_x = vx / nx[:, None]
        vy = _as_batch(self.log_map(t, y, x))[0]
        ny = self.norm(t, yb, vy)
        ny = np.where(ny < 1e-300, 1.0, np.atleast_1d(ny))
        e_y = -vy / ny[:, None]
        zero = rho < 1e-300
        e_x[zero] = 0.0
        e_y[zero] = 0.0
        if sq:
            return float(rho[0]), e_x[0], e_y[0]
        return rho, e_x, e_y

    def geodesic(self, t: float, x, y):
        """Unit-speed minimal geodesic from x to y at metric time t."""
        self.check_time(t)
        return Geodesic(self, t, np.asarray(x, float), np.asarray(y, float))

    # -- transports -----------------------------------------------------------

    def parallel_transport(self, t: float, x, y, w):
        """Parallel transport of tangent w from x to y along the minimal geodesic."""
        self.check_time(t)
        xb, _ = _as_batch(x)
        yb, _ = _as_batch(y)
        wb, sq = _as_batch(w)
        if self.kind in ("euclidean", "torus"):
            return _restore(wb.copy(), sq)
        if self.kind == "sphere":
            dots = np.clip(np.einsum("ij,ij->i", xb, yb), -1.0, 1.0)
            if np.any(dots < -1.0 + 1e-12):
                raise CutLocusAmbiguity("antipodal sphere points: transport not unique")
            theta = np.arccos(dots)
            perp = yb - dots[:, None] * xb
            nrm = np.linalg.norm(perp, axis=1)
            small = theta < 1e-14
            safe = np.where(small, 1.0, nrm)
            e = perp / safe[:, None]
            coef = np.einsum("ij,ij->i", wb, e)
            out = wb + coef[:, None] * (
                (np.cos(theta) - 1.0)[:, None] * e - np.sin(theta)[:, None] * xb
            )
            out[small] = wb[small]
            return _restore(out, sq)
        m = np.maximum(-self._mdot(xb, yb), 1.0)
        theta = np.arccosh(m)
        perp = yb - m[:, None] * xb
        nrm = np.sqrt(np.maximum(self._mdot(perp, perp), 0.0))
        small = theta < 1e-14
        safe = np.where(small, 1.0, nrm)
        e = perp / safe[:, None]
        coef = self._mdot(wb, e)
        out = wb + coef[:, None] * (
            (np.cosh(theta) - 1.0)[:, None] * e + np.sinh(theta)[:, None] * xb
        )
        out[small] = wb[small]
        return _restore(out, sq)

    def mirror_transport(self, t: float, x, y, w):
        """Parallel transport followed by reflection across the connecting geodesic.

        Sends the departure direction at x to minus the arrival direction
        at y and fixes the orthogonal complement (after transport).
        """
        self.check_time(t)
        xb, _ = _as_batch(x)
        yb, _ = _as_batch(y)
        wb, sq = _as_batch(w)
        rho, e_x, e_y = self.connecting_unit(t, xb, yb)
        if np.any(np.atleast_1d(rho) < 1e-300):
            raise CutLocusAmbiguity("mirror transport undefined at coincident points")
        p = _as_batch(self.parallel_transport(t, xb, yb, wb))[0]
        coef = np.atleast_1d(self.inner(t, xb, wb, e_x))
        out = p - 2.0 * coef[:, None] * e_y
        return _restore(out, sq)

    # -- frames ---------------------------------------------------------------

    def gram_schmidt(self, t: float, x, cols: np.ndarray):
        """Orthonormalize frame columns against g_t (modified Gram-Schmidt).

        ``cols`` has shape (m, d) or (n, m, d). Returns the orthonormal
        frame and the largest pre-normalization Gram defect
        ``max |cols^T g cols - I|``.
        """
        self.check_time(t)
        u = np.asarray(cols, dtype=float)
        squeeze = u.ndim == 2
        if squeeze:
            u = u[None]
        u = u.copy()
        n, m, d = u.shape
        gram = self._frame_gram(t, u)
        defect = float(np.max(np.abs(gram - np.eye(d)))) if d else 0.0
        for a in range(d):
            for b in range(a):
                proj = self._col_inner(t, u[:, :, a], u[:, :, b])
                u[:, :, a] -= proj[:, None] * u[:, :, b]
            nrm = np.sqrt(np.maximum(self._col_inner(t, u[:, :, a], u[:, :, a]), 0.0))
            if np.any(nrm < 1e-12):
                raise DegenerateFrame("frame columns are numerically dependent")
            u[:, :, a] /= nrm[:, None]
        return (u[0] if squeeze else u), defect

    def _col_inner(self, t, v, w):
        if self.kind == "torus":
            a = np.asarray(self.c(t), dtype=float)
            return np.einsum("ij,ij,j->i", v, w, a)
        if self.kind == "hyperbolic":
            return float(self.c(t)) * self._mdot(v, w)
        return float(self.c(t)) * np.einsum("ij,ij->i", v, w)

    def _frame_gram(self, t, u):
        if self.kind == "torus":
            a = np.asarray(self.c(t), dtype=float)
            return np.einsum("nia,i,nib->nab", u, a, u)
        if self.kind == "hyperbolic":
            eta = np.ones(u.shape[1])
            eta[0] = -1.0
            return float(self.c(t)) * np.einsum("nia,i,nib->nab", u, eta, u)
        return float(self.c(t)) * np.einsum("nia,nib->nab", u, u)

    def frame_defect(self, t: float, x, u) -> float:
        ub = np.asarray(u, dtype=float)
        if ub.ndim == 2:
            ub = ub[None]
        gram = self._frame_gram(t, ub)
        return float(np.max(np.abs(gram - np.eye(ub.shape[2]))))

    def canonical_frame(self, t: float, x) -> np.ndarray:
        """Deterministic g_t-orthonormal frame at x built from coordinate axes."""
        self.check_time(t)
        xb, sq = _as_batch(x)
        m, d = self.ambient_dim, self.dim
        n = xb.shape[0]
        if self.kind in ("euclidean", "torus"):
            cols = np.broadcast_to(np.eye(m)[:, :d], (n, m, d)).copy()
        else:
            # project coordinate axes to the tangent space, then select d
            # independent ones greedily in norm order; the largest
            # projections can be collinear (hyperboloid points away from
            # the pole), so norm alone cannot pick the columns
            cand = np.broadcast_to(np.eye(m), (n, m, m)).copy()
            if self.kind == "sphere":
                proj = cand - np.einsum("nj,njk->nk", xb, cand)[:, None, :] * xb[:, :, None]
            else:
                eta = np.ones(m)
                eta[0] = -1.0
                mdots = np.einsum("nj,j,njk->nk", xb, eta, cand)
                proj = cand + mdots[:, None, :] * xb[:, :, None]
            cols = np.empty((n, m, d))
            for i in range(n):
                norms = np.linalg.norm(proj[i], axis=0)
                order = np.argsort(-norms, kind="stable")
                chosen: list[int] = []
                basis: list[np.ndarray] = []
                for j in order:
                    v = proj[i][:, j].copy()
                    for b in basis:
                        v -= (b @ v) * b
                    nv = np.linalg.norm(v)
                    if nv > 1e-10 * max(norms[j], 1.0):
                        basis.append(v / nv)
                        chosen.append(j)
                        if len(chosen) == d:
                            break
                if len(chosen) < d:
                    raise DegenerateFrame(
                        "coordinate axes do not span the tangent space here"
                    )
                cols[i] = proj[i][:, chosen]
        u, _ = self.gram_schmidt(t, xb, cols)
        return _restore(u, sq)

    def to_frame(self, t: float, x, u, w):
        """Coordinates of tangent w in the g_t-orthonormal frame u."""
        ub = np.asarray(u, dtype=float)
        wb, sq = _as_batch(w)
        if ub.ndim == 2:
            ub = np.broadcast_to(ub[None], (wb.shape[0],) + ub.shape)
        if self.kind == "torus":
            a = np.asarray(self.c(t), dtype=float)
            out = np.einsum("nia,i,ni->na", ub, a, wb)
        elif self.kind == "hyperbolic":
            eta = np.ones(ub.shape[1])
            eta[0] = -1.0
            out = float(self.c(t)) * np.einsum("nia,i,ni->na", ub, eta, wb)
        else:
            out = float(self.c(t)) * np.einsum("nia,ni->na", ub, wb)
        return _restore(out, sq)

    def from_frame(self, t: float, x, u, a):
        ub = np.asarray(u, dtype=float)
        ab, sq = _as_batch(a)
        if ub.ndim == 2:
            ub = np.broadcast_to(ub[None], (ab.shape[0],) + ub.shape)
        out = np.einsum("nia,na->ni", ub, ab)
        return _restore(out, sq)

    # -- curvature and damping --------------------------------------------------

    def sectional_curvature(self, t: float) -> float:
        """Constant sectional curvature of g_t (builtin models are space forms)."""
        self.check_time(t)
        if self.kind == "sphere":
            return 1.0 / float(self.c(t))
        if self.kind == "hyperbolic":
            return -1.0 / float(self.c(t))
        return 0.0

    def ricci_coefficient(self, t: float) -> float:
        """Ric_t = coeff * g_t on the builtin models."""
        return (self.dim - 1) * self.sectional_curvature(t)

    def damping_matrix(self, t: float, x, u) -> np.ndarray:
        """Symmetric matrix driving damped transport, in the frame u.

        Entries: Ricci term minus the symmetrized drift derivative minus
        half the metric time slope, each contracted against the frame
        columns. Shape (d, d) for a single frame, (n, d, d) batched.
        """
        self.check_time(t)
        ub = np.asarray(u, dtype=float)
        squeeze = ub.ndim == 2
        if squeeze:
            ub = ub[None]
        xb, _ = _as_batch(x)
        if xb.shape[0] == 1 and ub.shape[0] > 1:
            xb = np.broadcast_to(xb, (ub.shape[0], xb.shape[1]))
        n, m, d = ub.shape
        out = np.zeros((n, d, d))
        ric = self.ricci_coefficient(t)
        out += ric * np.eye(d)
        if self.kind == "torus":
            adot = np.asarray(self.c_slope(t), dtype=float)
            out -= 0.5 * np.einsum("nia,i,nib->nab", ub, adot, ub)
        else:
            cdot = float(self.c_slope(t))
            cval = float(self.c(t))
            out -= 0.5 * (cdot / cval) * np.eye(d)
        if not self.drift.is_zero:
            cols = np.moveaxis(ub, 2, 0)  # (d, n, m)
            dz = np.stack(
                [self.drift.covariant_derivative(t, xb, cols[a]) for a in range(d)],
                axis=1,
            )  # (n, d, m)
            pair = np.empty((n, d, d))
            for b in range(d):
                pair[:, :, b] = np.stack(
                    [
                        np.atleast_1d(self.inner(t, xb, dz[:, a, :], ub[:, :, b]))
                        for a in range(d)
                    ],
                    axis=1,
                )
            out -= 0.5 * (pair + np.swapaxes(pair, 1, 2))
        return out[0] if squeeze else out

    def damping_scalar(self, t) -> Optional[np.ndarray]:
        """Scalar k with damping matrix k(t) * I, or None when frame-dependent."""
        if not self.has_isotropic_damping:
            return None
        t = np.asarray(t, dtype=float)
        if self.kind == "torus":
            a0 = self.axis_scales[0]
            base = -0.5 * a0.slope(t) / a0.value(t)
        else:
            base = (
                self.ricci_coefficient_arr(t)
                - 0.5 * self.c_slope(t) / self.c(t)
            )
        if self.drift.kind == "linear_radial":
            base = base - self.drift.lam
        return base

    def ricci_coefficient_arr(self, t):
        if self.kind == "sphere":
            return (self.dim - 1) / self.scale.value(t)
        if self.kind == "hyperbolic":
            return -(self.dim - 1) / self.scale.value(t)
        return np.zeros_like(np.asarray(t, dtype=float))

    @property
    def has_isotropic_damping(self) -> bool:
        if self.drift.kind == "custom":
            return False
        if self.kind == "torus":
            first = self.axis_scales[0]
            return all(s == first for s in self.axis_scales)
        return True

    def curvature_bound(self) -> CurvatureBound:
        """Attained lower bound K(t) for the damping matrix eigenvalues."""
        if self.has_isotropic_damping:
            return CurvatureBound(
                rate=lambda t: np.asarray(self.damping_scalar(t), dtype=float),
                time_only=True,
                note="isotropic damping, bound attained",
            )
        if self.kind == "torus" and self.drift.is_zero:
            def rate(t):
                t = np.asarray(t, dtype=float)
                ratios = np.stack(
                    [s.slope(t) / s.value(t) for s in self.axis_scales], axis=-1
                )
                return -0.5 * np.max(ratios, axis=-1)

            return CurvatureBound(rate=rate, time_only=True, note="per-axis torus bound")
        raise ConfigInvalid("no closed-form curvature bound for custom drift")

    # -- generator stencil ------------------------------------------------------

    def apply_generator(self, field, t: float, x, h_fd: Optional[float] = None) -> float:
        """Second-order generator (metric Laplacian plus drift) applied to a field.

        Uses central second differences along the geodesics of a canonical
        orthonormal frame; exact Laplacian up to O(h_fd^2) stencil error.
        """
        self.check_time(t)
        x = np.asarray(x, dtype=float)
        self.validate_point(x)
        if h_fd is None:
            h_fd = 1e-4 * max(1.0, float(np.linalg.norm(x)))
        u = self.canonical_frame(t, x)
        d = self.dim
        f0 = float(np.atleast_1d(field.value(t, x[None]))[0])
        lap = 0.0
        grad_frame = np.zeros(d)
        for a in range(d):
            step = h_fd * u[:, a]
            try:
                xp = self.exp_map(t, x, step)
                xm = self.exp_map(t, x, -step)
            except (OffManifold, CutLocusAmbiguity) as exc:
                from .errors import StencilOutOfDomain

                raise StencilOutOfDomain(str(exc)) from exc
            fp = float(np.atleast_1d(field.value(t, xp[None]))[0])
            fm = float(np.atleast_1d(field.value(t, xm[None]))[0])
            lap += (fp - 2.0 * f0 + fm) / h_fd**2
            grad_frame[a] = (fp - fm) / (2.0 * h_fd)
        if self.drift.is_zero:
            return lap
        z = self.drift.value(t, x[None])[0]
        z_frame = np.atleast_1d(self.to_frame(t, x, u, z[None]))
        return lap + float(np.dot(np.ravel(z_frame), grad_frame))


class Geodesic:
    """Unit-speed minimal geodesic between two fixed points at one metric time."""

    def __init__(self, flow: MetricFlow, t: float, x: np.ndarray, y: np.ndarray):
        self.flow = flow
        self.t = float(t)
        self.x = x
        self.y = y
        rho, e_x, e_y = flow.connecting_unit(t, x, y)
        self.length = float(rho)
        if self.length <= 0.0:
            raise CutLocusAmbiguity("geodesic endpoints coincide")
        self.start_direction = e_x
        self.end_direction = e_y

    def point(self, s):
        """Point at arclength s in [0, length]."""
        s = np.asarray(s, dtype=float)
        flow = self.flow
        scalar = s.ndim == 0
        svec = np.atleast_1d(s)
        pts = np.stack(
            [
                np.asarray(flow.exp_map(self.t, self.x, si * self.start_direction))
                for si in svec
            ]
        )
        return pts[0] if scalar else pts

    def velocity(self, s):
        """Unit tangent at arclength s (transport of the start direction)."""
        s = np.asarray(s, dtype=float)
        scalar = s.ndim == 0
        svec = np.atleast_1d(s)
        out = []
        for si in svec:
            p = self.point(float(si))
            out.append(
                np.asarray(
                    self.flow.parallel_transport(self.t, self.x, p, self.start_direction)
                )
            )
        out = np.stack(out)
        return out[0] if scalar else out


# ---------------------------------------------------------------------------
# constructors
# ---------------------------------------------------------------------------


def euclidean_flow(dim: int, scale: Optional[ScaleSchedule] = None, drift=None) -> MetricFlow:
    return MetricFlow("euclidean", dim, scale=scale, drift=drift)


def sphere_flow(dim: int, scale: Optional[ScaleSchedule] = None, drift=None) -> MetricFlow:
    return MetricFlow("sphere", dim, scale=scale, drift=drift)


def sphere_ricci_flow(dim: int, c0: float = 1.0) -> MetricFlow:
    """Round sphere shrinking by its own Ricci curvature: c(t) = c0 - 2(d-1)t."""
    return MetricFlow("sphere", dim, scale=linear_scale(c0, -2.0 * (dim - 1)))

def hyperbolic_flow(dim: int, scale: Optional[ScaleSchedule] = None, drift=None) -> MetricFlow:
    return MetricFlow("hyperbolic", dim, scale=scale, drift=drift)


def torus_flow(dim: int, axis_scales: Optional[Sequence[ScaleSchedule]] = None, drift=None) -> MetricFlow:
    return MetricFlow("torus", dim, axis_scales=axis_scales, drift=drift)


def torus_uniform_exp_flow(dim: int, lam: float) -> MetricFlow:
    """Flat torus with every axis scale a(t) = exp(-2 lam t)."""
    return torus_flow(dim, [exp_scale(1.0, -2.0 * lam) for _ in range(dim)])
