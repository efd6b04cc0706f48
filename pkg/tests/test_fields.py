"""Analytic field gradients against central-difference oracles."""

import math

import numpy as np
import pytest

from geomflow import (
    MissingGradient,
    RadiusTooLarge,
    euclidean_flow,
    exp_scale,
    hyperbolic_flow,
    linear_scale,
    sphere_flow,
    static_scale,
    torus_flow,
)
from geomflow.fields import (
    AmbientCoordinate,
    Custom,
    GaussianBump,
    Linear,
    Monomial,
    NormalLinear,
    SinAxis,
    TruncatedExp,
    _cutoff,
)

import oracles


def _check_gradient(flow, field, t, points, rtol=2e-5, atol=2e-7):
    """Frame-coordinate FD derivative vs analytic gradient at each point."""
    for x in points:
        x = np.asarray(x, dtype=float)
        fd, u = oracles.fd_gradient_frame(flow, field, t, x)
        grad = field.gradient(t, x[None])[0]
        analytic = np.atleast_1d(flow.to_frame(t, x, u, grad[None]))[0]
        analytic = np.ravel(analytic)
        np.testing.assert_allclose(analytic, fd, rtol=rtol, atol=atol)


def test_euclid_fields_gradients():
    flow = euclidean_flow(2, scale=exp_scale(1.0, 0.4))
    pts = [np.array([0.3, -0.7]), np.array([1.2, 0.5]), np.zeros(2)]
    _check_gradient(flow, Monomial(flow, axis=0, power=2), 0.3, pts)
    _check_gradient(flow, Linear(flow, [0.5, -1.25], offset=2.0), 0.3, pts)
    _check_gradient(flow, GaussianBump(flow, center=[0.5, 0.0], sigma=0.8), 0.3, pts)


def test_truncated_exp_gradient_and_clamp():
    flow = euclidean_flow(1)
    f = TruncatedExp(flow, axis=0, lo=1.0, hi=2.0)
    pts = [np.array([0.0]), np.array([1.3]), np.array([2.5]), np.array([-3.0])]
    _check_gradient(flow, f, 0.0, pts)
    # below lo the field is exp(x); above hi it is constant
    assert f.value(0.0, np.array([[0.5]]))[0] == pytest.approx(math.exp(0.5))
    v_hi = f.value(0.0, np.array([[2.0]]))[0]
    assert f.value(0.0, np.array([[5.0]]))[0] == pytest.approx(v_hi)
    assert f.gradient(0.0, np.array([[5.0]]))[0, 0] == 0.0


def test_sphere_coordinate_gradient():
    flow = sphere_flow(2, scale=linear_scale(1.0, 0.7))
    theta = 1.1
    pts = [
        np.array([math.sin(theta), 0.0, math.cos(theta)]),
        np.array([0.0, 1.0, 0.0]),
        np.array([0.3, -0.4, math.sqrt(1 - 0.25)]),
    ]
    _check_gradient(flow, AmbientCoordinate(flow, axis=2), 0.2, pts)
    _check_gradient(flow, AmbientCoordinate(flow, axis=0, offset=1.0, scale=-2.0), 0.2, pts)


def test_hyperbolic_coordinate_gradient():
    flow = hyperbolic_flow(2, scale=static_scale(2.0))
    sp = np.array([[0.4, -0.2], [0.0, 0.0], [1.0, 0.8]])
    pts = [np.concatenate([[math.sqrt(1 + p @ p)], p]) for p in sp]
    _check_gradient(flow, AmbientCoordinate(flow, axis=1), 0.0, pts)
    _check_gradient(flow, AmbientCoordinate(flow, axis=0), 0.0, pts)


def test_torus_sin_gradient():
    flow = torus_flow(2, [static_scale(2.0), exp_scale(1.0, -0.3)])
    pts = [np.array([0.3, 1.0]), np.array([4.0, 5.5])]
    _check_gradient(flow, SinAxis(flow, axis=0), 0.5, pts)
    _check_gradient(flow, SinAxis(flow, axis=1, offset=1.0, amplitude=-0.5), 0.5, pts)


def test_cutoff_shape():
    q = np.array([0.0, 0.25, 0.5, 0.75, 1.0, 1.5])
    chi, dchi = _cutoff(q)
    np.testing.assert_allclose(chi[:3], 1.0)
    assert chi[3] == pytest.approx(0.5)
    np.testing.assert_allclose(chi[4:], 0.0)
    assert dchi[0] == 0.0 and dchi[4] == 0.0
    # FD check of the derivative in the transition band
    eps = 1e-6
    for q0 in (0.6, 0.75, 0.9):
        c1, _ = _cutoff(np.array([q0 + eps]))
        c0, _ = _cutoff(np.array([q0 - eps]))
        _, d = _cutoff(np.array([q0]))
        assert d[0] == pytest.approx((c1[0] - c0[0]) / (2 * eps), rel=1e-5)


@pytest.mark.parametrize(
    "make_flow,x_ref",
    [
        (lambda: euclidean_flow(2, scale=static_scale(1.5)), np.array([0.2, -0.1])),
        (lambda: sphere_flow(2, scale=static_scale(1.2)), np.array([0.0, 0.0, 1.0])),
        (
            lambda: hyperbolic_flow(2),
            np.array([math.sqrt(1.16), 0.4, 0.0]),
        ),
        (
            lambda: torus_flow(2, [static_scale(1.0), static_scale(2.0)]),
            np.array([3.0, 3.0]),
        ),
    ],
)
def test_normal_linear_probe(make_flow, x_ref):
    flow = make_flow()
    s = 0.1
    u = flow.canonical_frame(s, x_ref)
    direction = u[:, 0] + 0.5 * u[:, 1]
    f = NormalLinear(flow, s, x_ref, direction, r_c=1.0)
    # unit direction: value along its own geodesic equals arclength (plateau)
    dirn = f.direction
    for r in (0.05, 0.2, 0.45):
        y = np.asarray(flow.exp_map(s, x_ref, r * dirn))
        assert f.value(s, y[None])[0] == pytest.approx(r, rel=1e-9)
    # gradient at the reference point is the unit direction
    g0 = f.gradient(s, x_ref[None])[0]
    np.testing.assert_allclose(g0, dirn, atol=1e-9)
    # vanishes outside the cutoff ball
    rng = np.random.default_rng(5)
    far_dir = u @ rng.normal(size=(2,))
    far_dir /= float(flow.norm(s, x_ref, far_dir))
    y_far = np.asarray(flow.exp_map(s, x_ref, 1.05 * far_dir))
    assert f.value(s, y_far[None])[0] == 0.0
    np.testing.assert_allclose(f.gradient(s, y_far[None])[0], 0.0, atol=1e-12)
    # FD cross-check at generic points, including the cutoff band
    pts = []
    for r, mix in ((0.3, 0.2), (0.6, 0.9), (0.85, -0.5)):
        w = u[:, 0] + mix * u[:, 1]
        w /= float(flow.norm(s, x_ref, w))
        pts.append(np.asarray(flow.exp_map(s, x_ref, r * w)))
    _check_gradient(flow, f, s, pts, rtol=5e-4, atol=5e-7)


def test_normal_linear_gradient_at_other_time():
    # same covector field, raised with a different metric scale
    flow = euclidean_flow(2, scale=linear_scale(1.0, 1.0))
    x_ref = np.zeros(2)
    f = NormalLinear(flow, 0.0, x_ref, np.array([1.0, 0.0]), r_c=2.0)
    y = np.array([[0.3, 0.1]])
    g0 = f.gradient(0.0, y)[0]
    g1 = f.gradient(1.0, y)[0]
    np.testing.assert_allclose(g1, g0 / 2.0, atol=1e-12)


def test_normal_linear_radius_guard():
    flow = sphere_flow(2)
    x = np.array([1.0, 0.0, 0.0])
    with pytest.raises(RadiusTooLarge):
        NormalLinear(flow, 0.0, x, np.array([0.0, 1.0, 0.0]), r_c=3.2)
    flow_t = torus_flow(2, [static_scale(0.25), static_scale(1.0)])
    with pytest.raises(RadiusTooLarge):
        NormalLinear(flow_t, 0.0, np.array([1.0, 1.0]), np.array([1.0, 0.0]), r_c=1.6)


def test_custom_field_wrapper():
    f = Custom(lambda t, y: y[:, 0] ** 3, label="cube")
    assert f.value(0.0, np.array([[2.0]]))[0] == 8.0
    assert not f.has_gradient
    with pytest.raises(MissingGradient):
        f.gradient(0.0, np.array([[2.0]]))
