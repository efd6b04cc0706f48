"""Damped transport: decay factors, semiflow property, norm certificates."""

import math

import numpy as np
import pytest
from scipy import integrate

from geomflow import (
    euclidean_flow,
    exp_scale,
    hyperbolic_flow,
    linear_radial_drift,
    sphere_flow,
    sphere_ricci_flow,
    static_scale,
    torus_flow,
    torus_uniform_exp_flow,
)
from geomflow import _engine_py, damped
from geomflow.rng import NoiseStream


def test_transport_factor_grid_matches_closed_form():
    flow = sphere_ricci_flow(2)  # rate 2/(1-2t), integral -ln(1-2t)
    q = damped.transport_factor_grid(flow, 0.0, 1e-3, 200)
    ts = 1e-3 * np.arange(201)
    np.testing.assert_allclose(q, 1.0 - 2.0 * ts, rtol=2e-6)


def test_decay_factor_values():
    assert damped.decay_factor(sphere_flow(2), 0.0, 0.3) == pytest.approx(
        math.exp(-0.3), rel=1e-8
    )
    assert damped.decay_factor(sphere_ricci_flow(2), 0.0, 0.2) == pytest.approx(
        0.6, rel=1e-7
    )
    assert damped.decay_factor(torus_uniform_exp_flow(2, 0.4), 0.1, 0.5) == pytest.approx(
        math.exp(-0.4 * 0.4), rel=1e-8
    )


def test_decay_double_integral_against_quad():
    flow = sphere_ricci_flow(2)
    s, t = 0.0, 0.2

    def inner(u):
        val, _ = integrate.quad(lambda r: 2.0 / (1.0 - 2.0 * r), u, t)
        return math.exp(-2.0 * val)

    ref, _ = integrate.quad(inner, s, t)
    got = damped.decay_double_integral(flow, s, t, n=2000)
    assert got == pytest.approx(ref, rel=1e-5)


def test_evolve_transport_semiflow_isotropic():
    flow = sphere_ricci_flow(2)
    h = 1e-3
    t_all = np.arange(0, 201) * h
    q_all = damped.evolve_transport(flow, t_all)
    q_first = damped.evolve_transport(flow, t_all[:101])
    q_second = damped.evolve_transport(flow, t_all[100:])
    np.testing.assert_allclose(q_second @ q_first, q_all, atol=1e-12)


def test_evolve_transport_matrix_route_semiflow():
    flow = torus_flow(2, [exp_scale(1.0, -0.6), exp_scale(1.0, 0.8)])
    x0 = np.array([math.pi, math.pi])
    u0 = flow.canonical_frame(0.0, x0)
    steps, h = 100, 2e-3
    normals, _ = NoiseStream(3, "semiflow").block(0, 4, steps, 2)
    rec = _engine_py.run_record(flow, 0.0, h, steps, x0, u0, math.sqrt(h) * normals)
    t_all = rec["t"]
    q_all = damped.evolve_transport_along(flow, t_all, rec["x"], rec["u"])
    mid = steps // 2
    q_a = damped.evolve_transport_along(flow, t_all[: mid + 1], rec["x"][:, : mid + 1], rec["u"][:, : mid + 1])
    q_b = damped.evolve_transport_along(flow, t_all[mid:], rec["x"][:, mid:], rec["u"][:, mid:])
    np.testing.assert_allclose(np.einsum("nij,njk->nik", q_b, q_a), q_all, atol=1e-12)


def test_transport_norm_isotropic_equals_scalar():
    flow = torus_uniform_exp_flow(2, 0.25)
    tgrid = np.linspace(0.0, 0.4, 161)
    q = damped.evolve_transport(flow, tgrid)
    # damping scalar is 0.25, so the norm is exp(-0.1)
    assert damped.transport_norm(q) == pytest.approx(math.exp(-0.1), rel=1e-8)


def test_certificate_static_sphere():
    rep = damped.q_norm_certificate(sphere_flow(2), 0.0, 0.2, 2000, 1000, seed=5)
    assert rep.holds
    assert rep.bound == pytest.approx(math.exp(-0.2), rel=1e-9)
    assert rep.violation <= 1e-6
    assert rep.detail["scalar_vs_matrix"] < 1e-9


def test_certificate_ricci_sphere():
    rep = damped.q_norm_certificate(sphere_ricci_flow(2), 0.0, 0.2, 2000, 1000, seed=6)
    assert rep.holds
    assert rep.bound == pytest.approx(0.6, rel=1e-8)
    assert rep.violation <= 1e-6


def test_certificate_anisotropic_torus_evolves_paths():
    flow = torus_flow(2, [exp_scale(1.0, -0.5), exp_scale(1.0, 0.3)])
    rep = damped.q_norm_certificate(flow, 0.0, 0.2, 200, 64, seed=7)
    assert rep.n_evolved == 64
    assert rep.holds
    # worst axis: rate -0.15, transport norm grows like exp(0.03)
    assert rep.max_norm == pytest.approx(math.exp(0.5 * 0.3 * 0.2), rel=1e-2)


def test_damping_eigen_range():
    flow = euclidean_flow(2, drift=linear_radial_drift(0.7))
    lo, hi = damped.damping_eigen_range(flow, 0.0, np.zeros(2), np.eye(2))
    assert lo == pytest.approx(-0.7)
    assert hi == pytest.approx(-0.7)


def test_certificate_hyperbolic_negative_rate():
    # negative curvature: transport norm grows, bound reflects that
    rep = damped.q_norm_certificate(hyperbolic_flow(2), 0.0, 0.1, 500, 100, seed=8)
    assert rep.holds
    assert rep.bound == pytest.approx(math.exp(0.1), rel=1e-8)
