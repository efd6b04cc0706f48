"""Geometry layer: closed forms against RK4/Jacobi oracles plus invariants."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geomflow import (
    ConfigInvalid,
    CutLocusAmbiguity,
    HorizonExceeded,
    OffManifold,
    euclidean_flow,
    exp_scale,
    hyperbolic_flow,
    linear_radial_drift,
    linear_scale,
    sphere_flow,
    sphere_ricci_flow,
    static_scale,
    torus_flow,
    torus_uniform_exp_flow,
    zero_drift,
)
from geomflow.fields import AmbientCoordinate, Monomial

import oracles

RNG = np.random.default_rng


# ---------------------------------------------------------------------------
# scale schedules and horizons
# ---------------------------------------------------------------------------


def test_schedule_values_and_slopes():
    lin = linear_scale(1.0, -2.0)
    assert lin.value(0.3) == pytest.approx(0.4)
    assert lin.slope(0.1) == pytest.approx(-2.0)
    assert lin.horizon == pytest.approx(0.5)
    ex = exp_scale(2.0, 0.7)
    assert ex.value(1.0) == pytest.approx(2.0 * math.exp(0.7))
    assert ex.slope(1.0) == pytest.approx(1.4 * math.exp(0.7))
    assert ex.horizon == math.inf


def test_horizon_rejected():
    flow = sphere_ricci_flow(2)  # c = 1 - 2t, horizon 0.5
    with pytest.raises(HorizonExceeded):
        flow.check_time(0.4999)
    flow.check_time(0.49)


def test_bad_config_rejected():
    with pytest.raises(ConfigInvalid):
        linear_scale(-1.0, 0.0)
    with pytest.raises(ConfigInvalid):
        torus_flow(2, [static_scale()])
    with pytest.raises(ConfigInvalid):
        sphere_flow(2, drift=linear_radial_drift(0.5))


def test_point_validation():
    s2 = sphere_flow(2)
    with pytest.raises(OffManifold):
        s2.validate_point(np.array([1.0, 1.0, 0.0]))
    h2 = hyperbolic_flow(2)
    with pytest.raises(OffManifold):
        h2.validate_point(np.array([-1.0, 0.0, 0.0]))  # wrong sheet
    h2.validate_point(np.array([1.0, 0.0, 0.0]))


# ---------------------------------------------------------------------------
# exponential map and transport against the RK4 oracle
# ---------------------------------------------------------------------------

SPHERE_X0 = np.array([1.0, 0.0, 0.0])
SPHERE_V = np.array([0.0, 0.7, 0.2])
SPHERE_W = np.array([0.0, -0.2, 0.9])
# frozen RK4 references (unit sphere, parameter 1)
SPHERE_EXP_REF = np.array([0.74649934, 0.63978472, 0.18279564])
SPHERE_PT_REF = np.array([-0.03655913, -0.21339249, 0.89617357])

HYP_X0 = np.array([1.0, 0.0, 0.0])
HYP_V = np.array([0.0, 0.8, -0.3])
HYP_W = np.array([0.0, 0.1, 0.6])
HYP_EXP_REF = np.array([1.38775157, 0.90094838, -0.33785564])
HYP_PT_REF = np.array([-0.11261855, 0.05750668, 0.615935])


def test_sphere_exp_against_rk4():
    flow = sphere_flow(2)
    got = flow.exp_map(0.0, SPHERE_X0, SPHERE_V)
    ref, _ = oracles.sphere_geodesic_transport(SPHERE_X0, SPHERE_V, SPHERE_W)
    np.testing.assert_allclose(got, ref, atol=1e-10)
    np.testing.assert_allclose(got, SPHERE_EXP_REF, atol=1e-7)


def test_sphere_transport_against_rk4():
    flow = sphere_flow(2)
    y = flow.exp_map(0.0, SPHERE_X0, SPHERE_V)
    got = flow.parallel_transport(0.0, SPHERE_X0, y, SPHERE_W)
    _, ref = oracles.sphere_geodesic_transport(SPHERE_X0, SPHERE_V, SPHERE_W)
    np.testing.assert_allclose(got, ref, atol=1e-10)
    np.testing.assert_allclose(got, SPHERE_PT_REF, atol=1e-7)


def test_hyperbolic_exp_against_rk4():
    flow = hyperbolic_flow(2)
    got = flow.exp_map(0.0, HYP_X0, HYP_V)
    ref, _ = oracles.hyperboloid_geodesic_transport(HYP_X0, HYP_V, HYP_W)
    np.testing.assert_allclose(got, ref, atol=1e-10)
    np.testing.assert_allclose(got, HYP_EXP_REF, atol=1e-7)


def test_hyperbolic_transport_against_rk4():
    flow = hyperbolic_flow(2)
    y = flow.exp_map(0.0, HYP_X0, HYP_V)
    got = flow.parallel_transport(0.0, HYP_X0, y, HYP_W)
    _, ref = oracles.hyperboloid_geodesic_transport(HYP_X0, HYP_V, HYP_W)
    np.testing.assert_allclose(got, ref, atol=1e-10)
    np.testing.assert_allclose(got, HYP_PT_REF, atol=1e-6)


def test_scaled_exp_is_reparametrized_unit_exp():
    # scaling the metric changes arclength, not the traced curve
    flow = sphere_flow(2, scale=static_scale(4.0))
    unit = sphere_flow(2)
    v = np.array([0.0, 0.5, -0.1])
    got = flow.exp_map(0.0, SPHERE_X0, v)
    # same ambient velocity => same curve point (exp depends on v only)
    np.testing.assert_allclose(got, unit.exp_map(0.0, SPHERE_X0, v), atol=1e-14)
    # but unit g-speed corresponds to euclid speed 1/2
    u = flow.canonical_frame(0.0, SPHERE_X0)
    assert np.linalg.norm(u[:, 0]) == pytest.approx(0.5)


# ---------------------------------------------------------------------------
# curvature via Jacobi-field growth
# ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "make,c0,expected_sign",
    [
        (lambda: sphere_flow(2, scale=static_scale(2.0)), 2.0, 1.0),
        (lambda: hyperbolic_flow(2, scale=static_scale(1.5)), 1.5, -1.0),
        (lambda: euclidean_flow(2, scale=static_scale(3.0)), 3.0, 0.0),
    ],
)
def test_jacobi_growth_matches_constant_curvature(make, c0, expected_sign):
    flow = make()
    kappa = expected_sign / c0
    assert flow.sectional_curvature(0.0) == pytest.approx(kappa)
    x = _base_point(flow)
    sep = oracles.jacobi_separation(flow, 0.0, x, s=1.0)
    assert sep == pytest.approx(oracles.model_jacobi(kappa, 1.0), rel=1e-5)


def test_ricci_flow_curvature_grows():
    flow = sphere_ricci_flow(2)
    # c = 1 - 2t: curvature 1/c increases toward the horizon
    assert flow.sectional_curvature(0.0) == pytest.approx(1.0)
    assert flow.sectional_curvature(0.25) == pytest.approx(2.0)
    x = _base_point(flow)
    sep = oracles.jacobi_separation(flow, 0.25, x, s=0.8)
    assert sep == pytest.approx(oracles.model_jacobi(2.0, 0.8), rel=1e-5)


def _base_point(flow):
    if flow.kind in ("sphere", "hyperbolic"):
        x = np.zeros(flow.ambient_dim)
        x[0] = 1.0
        return x
    if flow.kind == "torus":
        return np.full(flow.dim, math.pi)
    return np.zeros(flow.dim)


# ---------------------------------------------------------------------------
# distances, logs, cut margins
# ---------------------------------------------------------------------------


def test_torus_distance_wraps():
    flow = torus_flow(2, [static_scale(1.0), static_scale(4.0)])
    x = np.array([0.1, 0.2])
    y = np.array([2.0 * math.pi - 0.1, 0.2])
    assert flow.distance(0.0, x, y) == pytest.approx(0.2)
    # second axis weight 4 doubles its length contribution
    z = np.array([0.1, 0.7])
    assert flow.distance(0.0, x, z) == pytest.approx(1.0)


def test_torus_log_and_cut():
    flow = torus_flow(1, [static_scale(1.0)])
    x = np.array([0.0])
    y = np.array([3.0])
    v = flow.log_map(0.0, x, y)
    assert v[0] == pytest.approx(3.0)
    y2 = np.array([3.5])
    v2 = flow.log_map(0.0, x, y2)
    assert v2[0] == pytest.approx(3.5 - 2.0 * math.pi)
    with pytest.raises(CutLocusAmbiguity):
        flow.log_map(0.0, x, np.array([math.pi]))


def test_sphere_cut_margin():
    flow = sphere_flow(2, scale=static_scale(4.0))
    x = np.array([1.0, 0.0, 0.0])
    y = np.array([0.0, 1.0, 0.0])
    assert flow.cut_margin(0.0, x, y) == pytest.approx(2.0 * (math.pi - math.pi / 2))
    with pytest.raises(CutLocusAmbiguity):
        flow.log_map(0.0, x, -x)


def test_torus_cut_margin():
    flow = torus_flow(2, [static_scale(1.0), static_scale(1.0)])
    x = np.array([0.0, 0.0])
    y = np.array([1.0, 0.0])
    # competing representative flips axis 1: length 2 pi - 1
    assert flow.cut_margin(0.0, x, y) == pytest.approx((2.0 * math.pi - 1.0) - 1.0)


def test_log_exp_roundtrip_batch():
    flow = sphere_flow(2)
    rng = RNG(7)
    x = np.array([0.0, 0.0, 1.0])
    vs = rng.normal(size=(20, 3))
    vs -= np.outer(vs @ x, x)
    vs *= (0.8 * math.pi / np.linalg.norm(vs, axis=1))[:, None] * rng.uniform(
        0.05, 1.0, size=(20, 1)
    )
    ys = flow.exp_map(0.0, np.repeat(x[None], 20, axis=0), vs)
    back = flow.log_map(0.0, np.repeat(x[None], 20, axis=0), ys)
    np.testing.assert_allclose(back, vs, atol=1e-9)


# ---------------------------------------------------------------------------
# hypothesis invariants
# ---------------------------------------------------------------------------


def _random_flow_point_tangents(seed):
    rng = RNG(seed)
    case = seed % 4
    t = 0.05
    if case == 0:
        flow = euclidean_flow(3, scale=exp_scale(1.0, 0.3))
        x = rng.normal(size=3)
    elif case == 1:
        flow = sphere_flow(2, scale=linear_scale(1.0, 0.5))
        x = rng.normal(size=3)
        x /= np.linalg.norm(x)
    elif case == 2:
        flow = hyperbolic_flow(2, scale=exp_scale(2.0, -0.2))
        sp = 0.8 * rng.normal(size=2)
        x = np.concatenate([[math.sqrt(1.0 + sp @ sp)], sp])
    else:
        flow = torus_flow(2, [exp_scale(1.0, -0.4), static_scale(2.0)])
        x = rng.uniform(0, 2 * math.pi, size=2)
    w = rng.normal(size=flow.ambient_dim)
    if flow.kind == "sphere":
        w -= (w @ x) * x
    elif flow.kind == "hyperbolic":
        eta = np.array([-1.0, 1.0, 1.0])
        w += np.sum(eta * w * x) * x
    return flow, t, x, w


@given(seed=st.integers(0, 2**31 - 1))
@settings(max_examples=60, deadline=None)
def test_transport_is_isometry(seed):
    flow, t, x, w = _random_flow_point_tangents(seed)
    rng = RNG(seed + 1)
    v = rng.normal(size=flow.ambient_dim) * 0.3
    if flow.kind == "sphere":
        v -= (v @ x) * x
    elif flow.kind == "hyperbolic":
        eta = np.array([-1.0, 1.0, 1.0])
        v += np.sum(eta * v * x) * x
    y = flow.exp_map(t, x, v)
    moved = flow.parallel_transport(t, x, y, w)
    assert float(flow.norm(t, y, moved)) == pytest.approx(
        float(flow.norm(t, x, w)), rel=1e-9, abs=1e-12
    )


@given(seed=st.integers(0, 2**31 - 1))
@settings(max_examples=60, deadline=None)
def test_mirror_is_involution_and_isometry(seed):
    flow, t, x, w = _random_flow_point_tangents(seed)
    rng = RNG(seed + 2)
    v = rng.normal(size=flow.ambient_dim) * 0.3
    if flow.kind == "sphere":
        v -= (v @ x) * x
    elif flow.kind == "hyperbolic":
        eta = np.array([-1.0, 1.0, 1.0])
        v += np.sum(eta * v * x) * x
    if np.linalg.norm(v) < 1e-3:
        return
    y = flow.exp_map(t, x, v)
    if float(flow.distance(t, x, y)) < 1e-6:
        return
    m = flow.mirror_transport(t, x, y, w)
    assert float(flow.norm(t, y, m)) == pytest.approx(
        float(flow.norm(t, x, w)), rel=1e-9, abs=1e-12
    )
    back = flow.mirror_transport(t, y, x, m)
    np.testing.assert_allclose(back, w, atol=1e-9)


@given(seed=st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_mirror_flips_connecting_direction(seed):
    flow, t, x, _ = _random_flow_point_tangents(seed)
    rng = RNG(seed + 3)
    v = rng.normal(size=flow.ambient_dim) * 0.4
    if flow.kind == "sphere":
        v -= (v @ x) * x
    elif flow.kind == "hyperbolic":
        eta = np.array([-1.0, 1.0, 1.0])
        v += np.sum(eta * v * x) * x
    if np.linalg.norm(v) < 1e-3:
        return
    y = flow.exp_map(t, x, v)
    rho, e_x, e_y = flow.connecting_unit(t, x, y)
    if rho < 1e-6:
        return
    m = flow.mirror_transport(t, x, y, e_x)
    np.testing.assert_allclose(m, -e_y, atol=1e-8)
    p = flow.parallel_transport(t, x, y, e_x)
    np.testing.assert_allclose(p, e_y, atol=1e-8)


@given(seed=st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_gram_schmidt_idempotent(seed):
    flow, t, x, _ = _random_flow_point_tangents(seed)
    u = flow.canonical_frame(t, x)
    u2, defect = flow.gram_schmidt(t, x, u)
    assert defect < 1e-8
    np.testing.assert_allclose(u2, u, atol=1e-10)
    assert flow.frame_defect(t, x, u2) < 1e-12


def test_to_from_frame_roundtrip():
    flow = torus_flow(2, [static_scale(2.0), static_scale(0.5)])
    x = np.array([1.0, 2.0])
    u = flow.canonical_frame(0.0, x)
    w = np.array([0.3, -0.8])
    coords = flow.to_frame(0.0, x, u, w)
    np.testing.assert_allclose(flow.from_frame(0.0, x, u, coords), w, atol=1e-14)


def test_canonical_frame_off_pole_hyperboloid():
    # on the x0-x1 geodesic two coordinate-axis projections are collinear,
    # so the column selection must skip the dependent candidate
    flow = hyperbolic_flow(2, static_scale(1.0), zero_drift())
    for r in (0.3, 0.8, 2.0):
        y = np.array([math.cosh(r), math.sinh(r), 0.0])
        u = flow.canonical_frame(0.0, y)
        assert flow.frame_defect(0.0, y, u) < 1e-12


# ---------------------------------------------------------------------------
# damping
# ---------------------------------------------------------------------------


def test_damping_scalar_values():
    # frozen closed forms: ricci coefficient minus half conformal slope
    assert sphere_flow(2).damping_scalar(0.0) == pytest.approx(1.0)
    assert hyperbolic_flow(2).damping_scalar(0.3) == pytest.approx(-1.0)
    assert sphere_ricci_flow(2).damping_scalar(0.1) == pytest.approx(2.5)  # 1/0.8 + 1/0.8
    assert torus_uniform_exp_flow(2, 0.3).damping_scalar(1.0) == pytest.approx(0.3)
    fl = euclidean_flow(2, scale=exp_scale(1.0, -0.4))
    assert fl.damping_scalar(0.7) == pytest.approx(0.2)
    drifted = euclidean_flow(2, drift=linear_radial_drift(0.5))
    assert drifted.damping_scalar(0.0) == pytest.approx(-0.5)


def test_damping_matrix_matches_scalar():
    flow = sphere_ricci_flow(2)
    x = np.array([0.0, 1.0, 0.0])
    u = flow.canonical_frame(0.2, x)
    mat = flow.damping_matrix(0.2, x, u)
    k = float(flow.damping_scalar(0.2))
    np.testing.assert_allclose(mat, k * np.eye(2), atol=1e-10)


def test_damping_matrix_anisotropic_torus():
    flow = torus_flow(2, [exp_scale(1.0, -0.2), exp_scale(1.0, 0.4)])
    assert not flow.has_isotropic_damping
    assert flow.damping_scalar(0.1) is None
    x = np.array([1.0, 1.0])
    u = flow.canonical_frame(0.3, x)
    mat = flow.damping_matrix(0.3, x, u)
    np.testing.assert_allclose(mat, np.diag([0.1, -0.2]), atol=1e-12)
    bound = flow.curvature_bound()
    assert float(bound.rate(0.3)) == pytest.approx(-0.2)
    w = np.linalg.eigvalsh(mat)
    assert w[0] >= float(bound.rate(0.3)) - 1e-12


def test_damping_matrix_custom_drift_symmetrized():
    # drift with asymmetric Jacobian: value (y, 0), so dZ(e1) = 0, dZ(e2) = e1
    from geomflow import custom_drift

    def val(t, x):
        out = np.zeros_like(x)
        out[:, 0] = x[:, 1]
        return out

    def cov(t, x, v):
        out = np.zeros_like(v)
        out[:, 0] = v[:, 1]
        return out

    flow = euclidean_flow(2, drift=custom_drift(val, cov))
    x = np.zeros(2)
    u = np.eye(2)
    mat = flow.damping_matrix(0.0, x, u)
    np.testing.assert_allclose(mat, -0.5 * np.array([[0.0, 1.0], [1.0, 0.0]]), atol=1e-12)


def test_curvature_bound_integral():
    flow = sphere_ricci_flow(2)
    # integral of 2/(1-2u) over [0, t] = -ln(1-2t)
    got = flow.curvature_bound().integral(0.0, 0.2, n=4000)
    assert got == pytest.approx(-math.log(0.6), rel=1e-7)


# ---------------------------------------------------------------------------
# generator stencil
# ---------------------------------------------------------------------------


def test_generator_on_sphere_height():
    flow = sphere_flow(2)
    f = AmbientCoordinate(flow, axis=2)
    theta = math.pi / 3
    x = np.array([math.sin(theta), 0.0, math.cos(theta)])
    # Laplacian of the height coordinate on the unit round sphere is -2 z
    got = flow.apply_generator(f, 0.0, x)
    assert got == pytest.approx(-2.0 * math.cos(theta), rel=1e-5)
    assert got == pytest.approx(-1.0, rel=1e-5)


def test_generator_scaling():
    flow = sphere_flow(2, scale=static_scale(4.0))
    f = AmbientCoordinate(flow, axis=2)
    x = np.array([0.0, 0.0, 1.0])
    hi = sphere_flow(2).apply_generator(f, 0.0, x)
    lo = flow.apply_generator(f, 0.0, x)
    assert lo == pytest.approx(hi / 4.0, rel=1e-4)


def test_generator_euclid_with_drift():
    flow = euclidean_flow(1, drift=linear_radial_drift(0.5))
    f = Monomial(flow, power=2)
    x = np.array([1.5])
    # laplacian 2 plus drift term 0.5 * x * 2x
    assert flow.apply_generator(f, 0.0, x) == pytest.approx(2.0 + 2.25, rel=1e-5)


def test_generator_torus_sine():
    from geomflow.fields import SinAxis

    flow = torus_flow(2, [static_scale(2.0), static_scale(1.0)])
    f = SinAxis(flow, axis=0)
    x = np.array([math.pi / 2, 1.0])
    assert flow.apply_generator(f, 0.0, x) == pytest.approx(-0.5, rel=1e-5)
