"""Scalar observables with analytic gradients.

A field is a fixed function on the manifold; only its gradient depends on
the evaluation time, through the metric used to raise the differential.
``value`` and ``gradient`` are vectorized over a batch of points with
shape (n, m); ``gradient`` returns ambient/chart components of the
g_t-gradient (a tangent vector field).
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .errors import ConfigInvalid, MissingGradient, OffManifold
from .flows import MetricFlow, _wrap_angle


class ScalarField:
    """Base class; subclasses implement _value and (optionally) _gradient."""

    name = "field"

    def value(self, t: float, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return self._value(t, np.atleast_2d(y))

    def gradient(self, t: float, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        grad = self._gradient(t, np.atleast_2d(y))
        if grad is None:
            raise MissingGradient(f"field {self.name!r} has no analytic gradient")
        return grad

    @property
    def has_gradient(self) -> bool:
        return True

    def _gradient(self, t, y):
        return None

    def descriptor(self) -> dict:
        return {"name": self.name}


class AmbientCoordinate(ScalarField):
    """f(y) = offset + scale * y[axis] in ambient or chart coordinates."""

    name = "ambient_coordinate"

    def __init__(self, flow: MetricFlow, axis: int, offset: float = 0.0, scale: float = 1.0):
        if not 0 <= axis < flow.ambient_dim:
            raise OffManifold("coordinate axis out of range")
        self.flow = flow
        self.axis = int(axis)
        self.offset = float(offset)
        self.scale = float(scale)

    def _value(self, t, y):
        return self.offset + self.scale * y[:, self.axis]

    def _gradient(self, t, y):
        flow = self.flow
        m = flow.ambient_dim
        e = np.zeros(m)
        e[self.axis] = self.scale
        if flow.kind == "euclidean":
            return np.broadcast_to(e / float(flow.c(t)), y.shape).copy()
        if flow.kind == "torus":
            a = np.asarray(flow.c(t), dtype=float)
            return np.broadcast_to(e / a, y.shape).copy()
        cval = float(flow.c(t))
        if flow.kind == "sphere":
            tang = e[None, :] - y[:, self.axis, None] * self.scale * y
            return tang / cval
        # hyperbolic: raise with the Minkowski form, then project tangentially
        eta = np.ones(m)
        eta[0] = -1.0
        w = (e * eta)[None, :].repeat(y.shape[0], axis=0)
        coef = MetricFlow._mdot(w, y)
        return (w + coef[:, None] * y) / cval

    def descriptor(self):
        return {
            "name": self.name,
            "axis": self.axis,
            "offset": self.offset,
            "scale": self.scale,
        }


class Monomial(ScalarField):
    """f(y) = (y[axis])**power on euclidean flows."""

    name = "monomial"

    def __init__(self, flow: MetricFlow, axis: int = 0, power: int = 2):
        if flow.kind != "euclidean":
            raise OffManifold("monomial field is euclidean-only")
        self.flow = flow
        self.axis = int(axis)
        self.power = int(power)

    def _value(self, t, y):
        return y[:, self.axis] ** self.power

    def _gradient(self, t, y):
        out = np.zeros_like(y)
        out[:, self.axis] = self.power * y[:, self.axis] ** (self.power - 1)
        return out / float(self.flow.c(t))

    def descriptor(self):
        return {"name": self.name, "axis": self.axis, "power": self.power}


class Linear(ScalarField):
    """f(y) = offset + <coeffs, y> on euclidean flows."""

    name = "linear"

    def __init__(self, flow: MetricFlow, coeffs, offset: float = 0.0):
        if flow.kind != "euclidean":
            raise OffManifold("linear field is euclidean-only")
        self.flow = flow
        self.coeffs = np.asarray(coeffs, dtype=float)
        self.offset = float(offset)

    def _value(self, t, y):
        return self.offset + y @ self.coeffs

    def _gradient(self, t, y):
        return np.broadcast_to(self.coeffs / float(self.flow.c(t)), y.shape).copy()

    def descriptor(self):
        return {"name": self.name, "coeffs": [float(v) for v in self.coeffs], "offset": self.offset}


class SinAxis(ScalarField):
    """f(y) = offset + amplitude * sin(y[axis]) on torus and euclidean flows."""

    name = "sin_axis"

    def __init__(self, flow: MetricFlow, axis: int = 0, offset: float = 0.0, amplitude: float = 1.0):
        if flow.kind not in ("torus", "euclidean"):
            raise OffManifold("sin_axis field needs a flat chart")
        self.flow = flow
        self.axis = int(axis)
        self.offset = float(offset)
        self.amplitude = float(amplitude)

    def _value(self, t, y):
        return self.offset + self.amplitude * np.sin(y[:, self.axis])

    def _gradient(self, t, y):
        if self.flow.kind == "torus":
            scale = np.asarray(self.flow.c(t), dtype=float)[self.axis]
        else:
            scale = float(self.flow.c(t))
        out = np.zeros_like(y)
        out[:, self.axis] = self.amplitude * np.cos(y[:, self.axis]) / scale
        return out

    def descriptor(self):
        return {
            "name": self.name,
            "axis": self.axis,
            "offset": self.offset,
            "amplitude": self.amplitude,
        }


class GaussianBump(ScalarField):
    """f(y) = exp(-|y - center|^2 / (2 sigma^2)) on euclidean flows."""

    name = "gaussian_bump"

    def __init__(self, flow: MetricFlow, center, sigma: float = 1.0):
        if flow.kind != "euclidean":
            raise OffManifold("gaussian bump field is euclidean-only")
        self.flow = flow
        self.center = np.asarray(center, dtype=float)
        self.sigma = float(sigma)

    def _value(self, t, y):
        q = np.einsum("ij,ij->i", y - self.center, y - self.center)
        return np.exp(-q / (2.0 * self.sigma**2))

    def _gradient(self, t, y):
        vals = self._value(t, y)
        return (
            -(y - self.center)
            * (vals / self.sigma**2)[:, None]
            / float(self.flow.c(t))
        )

    def descriptor(self):
        return {"name": self.name, "center": [float(v) for v in self.center], "sigma": self.sigma}


class TruncatedExp(ScalarField):
    """exp of a C^1 clamp of y[axis]: linear below ``lo``, constant above ``hi``.

    Bounded and positive, with a bounded gradient, so it is safe inside
    inequality verifiers that require integrability.
    """

    name = "truncated_exp"

    def __init__(self, flow: MetricFlow, axis: int = 0, lo: float = 1.0, hi: float = 2.0):
        if flow.kind != "euclidean":
            raise OffManifold("truncated_exp field is euclidean-only")
        if hi <= lo:
            raise ValueError("need hi > lo")
        self.flow = flow
        self.axis = int(axis)
        self.lo = float(lo)
        self.hi = float(hi)

    def _clamp(self, v):
        lo, hi = self.lo, self.hi
        w = hi - lo
        s = np.clip((v - lo) / w, 0.0, 1.0)
        # C^1 ramp: identity slope at lo, zero slope at hi
        val = lo + w * (s - 0.5 * s**2)
        dval = np.where((v > lo) & (v < hi), 1.0 - s, np.where(v <= lo, 1.0, 0.0))
        return np.where(v <= lo, v, val), dval

    def _value(self, t, y):
        cv, _ = self._clamp(y[:, self.axis])
        return np.exp(cv)

    def _gradient(self, t, y):
        cv, dv = self._clamp(y[:, self.axis])
        out = np.zeros_like(y)
        out[:, self.axis] = np.exp(cv) * dv
        return out / float(self.flow.c(t))

    def descriptor(self):
        return {"name": self.name, "axis": self.axis, "lo": self.lo, "hi": self.hi}


def _cutoff(q: np.ndarray):
    """C^2 plateau cutoff: 1 on q <= 1/2, 0 on q >= 1, quintic in between."""
    s = np.clip((q - 0.5) * 2.0, 0.0, 1.0)
    chi = 1.0 - s**3 * (10.0 - 15.0 * s + 6.0 * s**2)
    dchi_dq = -2.0 * (30.0 * s**2 - 60.0 * s**3 + 30.0 * s**4)
    inside = (q > 0.5) & (q < 1.0)
    return chi, np.where(inside, dchi_dq, 0.0)


class NormalLinear(ScalarField):
    """Compactly supported field that is linear in normal coordinates at a point.

    f(y) = <log_ref(y), X>_s * cutoff(rho_s(ref, y) / r_c), with the log map,
    the pairing and the distance all taken in the time-s metric. Near the
    reference point the cutoff is identically 1, so the gradient at ref is
    X and the Hessian vanishes there.
    """

    name = "normal_linear"

    def __init__(self, flow: MetricFlow, s: float, x_ref, direction, r_c: float):
        self.flow = flow
        self.s = float(s)
        self.x_ref = np.asarray(x_ref, dtype=float)
        self.r_c = float(r_c)
        flow.validate_point(self.x_ref)
        X = np.asarray(direction, dtype=float)
        flow.validate_tangent(self.x_ref, X)
        nrm = float(flow.norm(s, self.x_ref, X))
        if nrm <= 0.0:
            raise ValueError("direction must be nonzero")
        self.direction = X / nrm
        margin = float(flow.cut_margin(s, self.x_ref, self.x_ref))
        if flow.kind == "sphere":
            margin = math.sqrt(float(flow.c(s))) * math.pi
        if flow.kind == "torus":
            a = np.asarray(flow.c(s), dtype=float)
            margin = math.pi * math.sqrt(float(np.min(a)))
        if not math.isinf(margin) and self.r_c >= margin:
            from .errors import RadiusTooLarge

            raise RadiusTooLarge("cutoff radius reaches the cut locus of the reference point")

    # closed forms of A(y) = <log_ref(y), X>_s and its ambient differential
    def _pieces(self, y):
        flow = self.flow
        s = self.s
        x, X = self.x_ref, self.direction
        if flow.kind == "euclidean":
            cs = float(flow.c(s))
            diff = y - x
            A = cs * diff @ X
            dA = np.broadcast_to(cs * X, y.shape)
            rho = math.sqrt(cs) * np.linalg.norm(diff, axis=1)
            nz = np.maximum(np.linalg.norm(diff, axis=1), 1e-300)
            drho = math.sqrt(cs) * diff / nz[:, None]
            return A, dA, rho, drho
        if flow.kind == "torus":
            a = np.asarray(flow.c(s), dtype=float)
            delta = _wrap_angle(y - x)
            A = np.einsum("ij,j,j->i", delta, a, X)
            dA = np.broadcast_to(a * X, y.shape)
            rho = np.sqrt(np.einsum("ij,ij,j->i", delta, delta, a))
            nz = np.maximum(rho, 1e-300)
            drho = (a[None, :] * delta) / nz[:, None]
            return A, dA, rho, drho
        if flow.kind == "sphere":
            cs = float(flow.c(s))
            q = np.clip(y @ x, -1.0, 1.0)
            theta = np.arccos(q)
            sin = np.sqrt(np.maximum(1.0 - q**2, 1e-300))
            mu = np.where(theta < 1e-8, 1.0 + theta**2 / 6.0, theta / sin)
            dmu = np.where(
                theta < 1e-8,
                theta / 3.0,
                (sin - theta * q) / sin**2,
            )
            yX = y @ X
            A = cs * mu * yX
            b_y = (x[None, :] - q[:, None] * y) / sin[:, None]
            X_tan = X[None, :] - yX[:, None] * y
            dA = cs * (dmu * yX)[:, None] * (-b_y) + cs * mu[:, None] * X_tan
            rho = math.sqrt(cs) * theta
            drho = -math.sqrt(cs) * b_y
            return A, dA, rho, drho
        # hyperbolic
        cs = float(flow.c(s))
        u = np.maximum(-MetricFlow._mdot(y, np.broadcast_to(x, y.shape)), 1.0)
        theta = np.arccosh(u)
        sinh = np.sqrt(np.maximum(u**2 - 1.0, 1e-300))
        mu = np.where(theta < 1e-8, 1.0 - theta**2 / 6.0, theta / sinh)
        dmu = np.where(theta < 1e-8, -theta / 3.0, (sinh - theta * u) / sinh**2)
        yX = MetricFlow._mdot(y, np.broadcast_to(X, y.shape))
        A = cs * mu * yX
        b_y = (x[None, :] - u[:, None] * y) / sinh[:, None]
        X_tan = X[None, :] + yX[:, None] * y
        dA = cs * (dmu * yX)[:, None] * (-b_y) + cs * mu[:, None] * X_tan
        rho = math.sqrt(cs) * theta
        drho = -math.sqrt(cs) * b_y
        return A, dA, rho, drho

    def _value(self, t, y):
        A, _, rho, _ = self._pieces(y)
        chi, _ = _cutoff(rho / self.r_c)
        return A * chi

    def _gradient(self, t, y):
        flow = self.flow
        A, dA, rho, drho = self._pieces(y)
        chi, dchi = _cutoff(rho / self.r_c)
        cov = chi[:, None] * dA + (A * dchi / self.r_c)[:, None] * drho
        if flow.kind == "torus":
            a = np.asarray(flow.c(t), dtype=float)
            return cov / a[None, :]
        return cov / float(flow.c(t))

    def descriptor(self):
        return {
            "name": self.name,
            "s": self.s,
            "x_ref": [float(v) for v in self.x_ref],
            "direction": [float(v) for v in self.direction],
            "r_c": self.r_c,
        }


class Custom(ScalarField):
    """Wrapper around user callables (vectorized over point batches)."""

    name = "custom"

    def __init__(self, value_fn, gradient_fn=None, label: str = "custom"):
        self._value_fn = value_fn
        self._gradient_fn = gradient_fn
        self.name = label

    def _value(self, t, y):
        return np.asarray(self._value_fn(t, y), dtype=float)

    @property
    def has_gradient(self) -> bool:
        return self._gradient_fn is not None

    def _gradient(self, t, y):
        if self._gradient_fn is None:
            return None
        return np.asarray(self._gradient_fn(t, y), dtype=float)


_BUILDERS = {
    "ambient_coordinate": AmbientCoordinate,
    "monomial": Monomial,
    "linear": Linear,
    "sin_axis": SinAxis,
    "gaussian_bump": GaussianBump,
    "truncated_exp": TruncatedExp,
    "normal_linear": NormalLinear,
}


def from_descriptor(flow: MetricFlow, desc: dict) -> ScalarField:
    """Rebuild a field from the dictionary its descriptor() emits."""
    if not isinstance(desc, dict) or "name" not in desc:
        raise ConfigInvalid("field descriptor needs a 'name' key")
    kind = desc["name"]
    builder = _BUILDERS.get(kind)
    if builder is None:
        raise ConfigInvalid(f"unknown field descriptor name {kind!r}")
    args = {k: v for k, v in desc.items() if k != "name"}
    try:
        return builder(flow, **args)
    except TypeError as exc:
        raise ConfigInvalid(f"bad parameters for field {kind!r}: {exc}") from None
