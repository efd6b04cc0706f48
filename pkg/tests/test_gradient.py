"""Derivative estimators, generator residuals, and small-time recovery."""

import math

import numpy as np
import pytest

from geomflow import flows, fields, gradient
from geomflow.errors import ConfigInvalid, MissingGradient, SignalBelowNoise


# ---------------------------------------------------------------------------
# semigroup
# ---------------------------------------------------------------------------


def test_semigroup_sphere_eigenfunction_decay():
    # height function on the static round sphere decays at rate 2/c
    flow = flows.sphere_flow(2)
    f = fields.AmbientCoordinate(flow, axis=2)
    pole = np.array([0.0, 0.0, 1.0])
    t = 0.25
    est = gradient.semigroup(flow, f, 0.0, t, pole, n_paths=8000, n_steps=100, seed=5)
    assert abs(est.mean - math.exp(-2.0 * t)) < 4.0 * est.stderr + 3e-3


def test_semigroup_batch_groups_and_crn():
    from geomflow.rng import NoiseStream

    flow = flows.euclidean_flow(1)
    f = fields.Monomial(flow, axis=0, power=2)
    starts = np.array([[0.0], [1.0]])
    means, errs = gradient.semigroup_batch(
        flow, f, 0.0, 0.3, starts, n_inner=4000, n_steps=30,
        stream=NoiseStream(3, "batch"),
    )
    # flat heat flow adds 2 t to the square
    assert abs(means[0] - 0.6) < 4.0 * errs[0]
    assert abs(means[1] - 1.6) < 4.0 * errs[1]
    # shared noise makes the difference nearly deterministic
    m2, _ = gradient.semigroup_batch(
        flow, f, 0.0, 0.3, starts, n_inner=4000, n_steps=30,
        stream=NoiseStream(3, "batch"), share_noise=True,
    )
    # (x+1)^2 - x^2 averages to 2 x_bar + 1 under identical increments
    assert abs((m2[1] - m2[0]) - 1.0) < 0.05


# ---------------------------------------------------------------------------
# pathwise estimator
# ---------------------------------------------------------------------------


def test_pathwise_exact_for_flat_linear_field():
    flow = flows.euclidean_flow(2)
    a = np.array([0.3, -1.2])
    f = fields.Linear(flow, a)
    est = gradient.bismut_pathwise(
        flow, f, 0.0, 0.5, np.zeros(2), n_paths=64, n_steps=20, seed=1
    )
    # flat transport is exact, every path contributes the same vector
    np.testing.assert_allclose(est.coords.mean, a, atol=1e-12)
    np.testing.assert_allclose(est.ambient, a, atol=1e-12)
    assert est.norm == pytest.approx(np.linalg.norm(a))


def test_pathwise_exact_for_radial_drift():
    # Z = lambda x makes the derivative grow like exp(lambda t), with zero
    # sampling variance for a linear field
    lam = 0.8
    flow = flows.euclidean_flow(1, drift=flows.linear_radial_drift(lam))
    f = fields.Linear(flow, [1.0])
    t = 0.5
    est = gradient.bismut_pathwise(
        flow, f, 0.0, t, np.zeros(1), n_paths=32, n_steps=50, seed=2
    )
    assert est.coords.mean[0] == pytest.approx(math.exp(lam * t), rel=1e-12)
    assert est.coords.stderr[0] == pytest.approx(0.0, abs=1e-13)


def test_pathwise_requires_gradient():
    flow = flows.euclidean_flow(1)
    f = fields.Custom(lambda t, x: np.atleast_2d(x)[:, 0] ** 3)
    with pytest.raises(MissingGradient):
        gradient.bismut_pathwise(flow, f, 0.0, 0.2, np.zeros(1), 16, 8)


# ---------------------------------------------------------------------------
# integrated estimator
# ---------------------------------------------------------------------------


def test_integrated_flat_quadratic():
    flow = flows.euclidean_flow(1)
    f = fields.Monomial(flow, axis=0, power=2)
    x0 = np.array([1.0])
    est = gradient.bismut_integrated(
        flow, f, 0.0, 0.4, x0, n_paths=30000, n_steps=50, seed=7
    )
    # derivative of the flat heat evolution of x^2 is 2 x0
    assert abs(est.coords.mean[0] - 2.0) < 4.0 * est.coords.stderr[0]


def test_integrated_custom_profile_still_unbiased():
    flow = flows.euclidean_flow(1)
    f = fields.Monomial(flow, axis=0, power=2)
    t = 0.4
    profile = gradient.custom_profile(lambda r: 2.0 * r / t**2)
    est = gradient.bismut_integrated(
        flow, f, 0.0, t, np.array([1.0]), n_paths=30000, n_steps=50,
        seed=8, profile=profile,
    )
    assert abs(est.coords.mean[0] - 2.0) < 4.0 * est.coords.stderr[0]


def test_profile_validation():
    with pytest.raises(ConfigInvalid):
        gradient.HProfile("quadratic")
    with pytest.raises(ConfigInvalid):
        gradient.HProfile("custom")


def test_integrated_and_pathwise_agree_on_shrinking_sphere():
    # round sphere with c(t) = 1 - 2t: eigen-decay gives the analytic
    # derivative (1 - 2t) times the initial unit gradient of the height
    flow = flows.sphere_ricci_flow(2)
    f = fields.AmbientCoordinate(flow, axis=2)
    x = np.array([1.0, 0.0, 0.0])
    t = 0.2
    u0 = flow.canonical_frame(0.0, x)
    gref = np.atleast_2d(flow.to_frame(0.0, x, u0, f.gradient(0.0, x[None])))[0]
    target = (1.0 - 2.0 * t) * gref
    pw = gradient.bismut_pathwise(
        flow, f, 0.0, t, x, n_paths=20000, n_steps=200, seed=11, u0=u0
    )
    ig = gradient.bismut_integrated(
        flow, f, 0.0, t, x, n_paths=20000, n_steps=200, seed=12, u0=u0
    )
    for est in (pw, ig):
        err = np.asarray(est.coords.stderr)
        assert np.all(np.abs(np.asarray(est.coords.mean) - target) < 4.0 * err + 4e-3)


def test_integrated_and_pathwise_agree_on_torus():
    lam = 0.4
    flow = flows.torus_uniform_exp_flow(2, lam)
    f = fields.SinAxis(flow, axis=0)
    x = np.array([1.0, 2.0])
    pw = gradient.bismut_pathwise(
        flow, f, 0.0, 0.3, x, n_paths=15000, n_steps=60, seed=41
    )
    ig = gradient.bismut_integrated(
        flow, f, 0.0, 0.3, x, n_paths=15000, n_steps=60, seed=42
    )
    diff = np.asarray(pw.coords.mean) - np.asarray(ig.coords.mean)
    band = np.hypot(np.asarray(pw.coords.stderr), np.asarray(ig.coords.stderr))
    assert np.all(np.abs(diff) < 4.0 * band + 1e-3)


def test_zero_gradient_field_estimates_zero():
    flow = flows.sphere_flow(2)
    f = fields.Custom(lambda t, x: np.full(np.atleast_2d(x).shape[0], 2.5))
    est = gradient.bismut_integrated(
        flow, f, 0.0, 0.25, np.array([0.0, 0.0, 1.0]), n_paths=8000,
        n_steps=50, seed=43,
    )
    err = np.asarray(est.coords.stderr)
    assert np.all(np.abs(np.asarray(est.coords.mean)) < 3.0 * err + 1e-12)


def test_gradient_contraction_bound():
    # derivative norm is dominated by the damped average of the field's
    # gradient norm
    from geomflow import damped

    flow = flows.sphere_flow(2)
    f = fields.AmbientCoordinate(flow, axis=2)
    x = np.array([1.0, 0.0, 0.0])
    t = 0.3
    est = gradient.bismut_pathwise(flow, f, 0.0, t, x, n_paths=12000, n_steps=80, seed=44)
    lhs = est.norm
    gnorm = fields.Custom(
        lambda tt, y: np.linalg.norm(f.gradient(tt, np.atleast_2d(y)), axis=1)
    )
    rhs_factor = damped.decay_factor(flow, 0.0, t)
    rhs = gradient.semigroup(flow, gnorm, 0.0, t, x, n_paths=12000, n_steps=80, seed=45)
    sigma = float(np.max(np.asarray(est.coords.stderr))) + rhs_factor * rhs.stderr
    assert lhs <= rhs_factor * rhs.mean + 3.0 * sigma


# ---------------------------------------------------------------------------
# local estimator
# ---------------------------------------------------------------------------


def test_local_flat_linear_unbiased():
    flow = flows.euclidean_flow(1)
    f = fields.Linear(flow, [1.0])
    est = gradient.bismut_local(
        flow, f, 0.0, 0.1, np.zeros(1), radius=1.2,
        n_paths=6000, n_steps=80, seed=3,
    )
    assert abs(est.coords.mean[0] - 1.0) < 4.0 * est.coords.stderr[0]


def test_local_handles_exits_through_continuation():
    flow = flows.euclidean_flow(1)
    f = fields.Linear(flow, [1.0])
    est = gradient.bismut_local(
        flow, f, 0.0, 0.1, np.zeros(1), radius=0.55,
        n_paths=6000, n_steps=80, seed=4, n_inner=64,
    )
    assert est.detail["exited"] > 0
    assert abs(est.coords.mean[0] - 1.0) < 5.0 * est.coords.stderr[0]


def test_local_matches_integrated_on_sphere():
    flow = flows.sphere_flow(2)
    f = fields.AmbientCoordinate(flow, axis=2)
    x = np.array([1.0, 0.0, 0.0])
    t = 0.15
    loc = gradient.bismut_local(
        flow, f, 0.0, t, x, radius=1.0, n_paths=15000, n_steps=120, seed=21
    )
    ig = gradient.bismut_integrated(
        flow, f, 0.0, t, x, n_paths=15000, n_steps=120, seed=22
    )
    diff = np.asarray(loc.coords.mean) - np.asarray(ig.coords.mean)
    band = np.hypot(np.asarray(loc.coords.stderr), np.asarray(ig.coords.stderr))
    assert np.all(np.abs(diff) < 5.0 * band + 1e-3)


# ---------------------------------------------------------------------------
# generator stencil and residuals
# ---------------------------------------------------------------------------


def test_generator_values_sphere_eigenfunction():
    flow = flows.sphere_flow(2, scale=flows.static_scale(2.0))
    f = fields.AmbientCoordinate(flow, axis=2)
    rng = np.random.default_rng(0)
    v = rng.normal(size=(5, 3))
    xs = v / np.linalg.norm(v, axis=1, keepdims=True)
    vals = gradient.generator_values(flow, f, 0.0, xs)
    # the coordinate is an eigenfunction with eigenvalue -2 / c
    expected = -2.0 * f.value(0.0, xs) / 2.0
    np.testing.assert_allclose(vals, expected, rtol=0.0, atol=5e-6)


def test_generator_values_flat_with_drift():
    lam = 0.7
    flow = flows.euclidean_flow(2, drift=flows.linear_radial_drift(lam))
    f = fields.Monomial(flow, axis=0, power=2)
    xs = np.array([[1.0, -0.5], [0.3, 2.0]])
    vals = gradient.generator_values(flow, f, 0.0, xs)
    expected = 2.0 + lam * 2.0 * xs[:, 0] ** 2
    np.testing.assert_allclose(vals, expected, rtol=1e-6, atol=1e-6)


def test_kolmogorov_forward_flat_drift():
    lam = 0.5
    flow = flows.euclidean_flow(1, drift=flows.linear_radial_drift(lam))
    f = fields.Monomial(flow, axis=0, power=2)
    rep = gradient.kolmogorov_forward(
        flow, f, 0.0, 0.5, np.array([1.0]), n_paths=6000, n_steps=100,
        delta=0.02, seed=9,
    )
    assert rep.direction == "forward"
    tol = 4.0 * rep.residual.stderr + 0.02 * rep.scale
    assert abs(rep.residual.mean) < tol
    assert rep.as_dict()["relative"] < 0.5


def test_kolmogorov_backward_flat():
    flow = flows.euclidean_flow(1)
    f = fields.Monomial(flow, axis=0, power=2)
    rep = gradient.kolmogorov_backward(
        flow, f, 0.1, 0.5, np.array([1.0]), n_paths=20000, n_steps=80,
        delta=0.05, h_fd=0.25, seed=13,
    )
    assert rep.direction == "backward"
    assert abs(rep.residual.mean) < 4.0 * rep.residual.stderr + 0.1
    # the two sides individually have size 2, the residual must be smaller
    assert rep.scale > 1.0


# ---------------------------------------------------------------------------
# recovery
# ---------------------------------------------------------------------------


def test_recover_grad_static_sphere():
    flow = flows.sphere_flow(2)
    x = np.array([0.0, 0.0, 1.0])
    res = gradient.recover_curvature_grad(
        flow, 0.0, x, [1.0, 0.0, 0.0], t1=0.02, n_paths=60000, n_steps=40, seed=17
    )
    # static sphere damping form on a unit direction is (d - 1)/c = 1
    assert res.target == pytest.approx(1.0)
    assert res.signal_ok
    assert res.rel_error < 0.2


def test_recover_grad_shrinking_torus():
    lam = 0.5
    flow = flows.torus_uniform_exp_flow(2, lam)
    x = np.array([math.pi, math.pi])
    res = gradient.recover_curvature_grad(
        flow, 0.0, x, [1.0, 0.0], t1=0.02, n_paths=60000, n_steps=40, seed=18
    )
    assert res.target == pytest.approx(lam)
    assert res.signal_ok
    assert res.rel_error < 0.2


def test_recover_grad_flat_zero():
    flow = flows.euclidean_flow(2)
    res = gradient.recover_curvature_grad(
        flow, 0.0, np.zeros(2), [1.0, 0.0], t1=0.02, n_paths=20000, n_steps=20,
        seed=19,
    )
    assert res.target == 0.0
    assert abs(res.estimate.mean) < 4.0 * res.estimate.stderr + 5e-3


def test_recover_grad_richardson_consistency():
    flow = flows.sphere_flow(2)
    x = np.array([0.0, 0.0, 1.0])
    a = gradient.recover_curvature_grad(
        flow, 0.0, x, [0.0, 1.0, 0.0], t1=0.02, n_paths=30000, n_steps=20, seed=29
    )
    b = gradient.recover_curvature_grad(
        flow, 0.0, x, [0.0, 1.0, 0.0], t1=0.01, n_paths=30000, n_steps=20, seed=31
    )
    band = math.hypot(a.estimate.stderr, b.estimate.stderr)
    assert abs(a.estimate.mean - b.estimate.mean) < 4.0 * band + 0.05


def test_recover_variance_flat_drift():
    # Z = lambda x has damping form -lambda in every direction
    lam = 0.6
    flow = flows.euclidean_flow(2, drift=flows.linear_radial_drift(lam))
    res = gradient.recover_curvature_variance(
        flow, 0.0, np.zeros(2), [1.0, 0.0], t1=0.08, n_paths=100000,
        n_steps=40, seed=20,
    )
    assert res.target == pytest.approx(-lam)
    assert abs(res.estimate.mean - res.target) < 4.0 * res.estimate.stderr + 0.1
    assert res.shift_drift is not None


def test_recover_variance_static_sphere():
    flow = flows.sphere_flow(2)
    x = np.array([0.0, 0.0, 1.0])
    res = gradient.recover_curvature_variance(
        flow, 0.0, x, [1.0, 0.0, 0.0], t1=0.05, n_paths=120000, n_steps=40,
        seed=21,
    )
    assert res.target == pytest.approx(1.0)
    assert abs(res.estimate.mean - 1.0) < 4.0 * res.estimate.stderr + 0.1


def test_recover_entropy_shrinking_torus():
    lam = 0.5
    flow = flows.torus_uniform_exp_flow(2, lam)
    x = np.array([math.pi, math.pi])
    res = gradient.recover_curvature_entropy(
        flow, 0.0, x, [0.0, 1.0], t1=0.05, n_paths=120000, n_steps=40, seed=22
    )
    assert res.target == pytest.approx(lam)
    assert abs(res.estimate.mean - lam) < 4.0 * res.estimate.stderr + 0.1


def test_recover_signal_flag():
    # zero curvature: the recovered value sits inside its own noise band
    flow = flows.euclidean_flow(2)
    res = gradient.recover_curvature_variance(
        flow, 0.0, np.zeros(2), [1.0, 0.0], t1=0.02, n_paths=4000, n_steps=10,
        seed=23,
    )
    assert not res.signal_ok
    with pytest.raises(SignalBelowNoise):
        res.require_signal()


def test_variance_family_requires_p_above_one():
    flow = flows.euclidean_flow(1)
    with pytest.raises(ConfigInvalid):
        gradient.recover_curvature_variance(
            flow, 0.0, np.zeros(1), [1.0], p=1.0
        )
