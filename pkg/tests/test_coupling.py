"""Coupled-pair simulation: meeting laws, contraction, index form, drift."""

import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geomflow import (
    ConfigInvalid,
    CutLocusAmbiguity,
    DegenerateInterval,
    HorizonExceeded,
    InsufficientSamples,
    NoMinimizer,
    euclidean_flow,
    hyperbolic_flow,
    linear_radial_drift,
    sphere_flow,
    sphere_ricci_flow,
    static_scale,
    torus_uniform_exp_flow,
    zero_drift,
)
from geomflow import _engine_py, coupling, damped, frame_sde, montecarlo
from geomflow.coupling import (
    NOT_COUPLED,
    RadialPull,
    couple_step,
    empirical_rho_drift,
    index_form,
    rho_drift_bound,
    simulate_coupling,
    start_pair,
    wasserstein_upper,
)
from geomflow.rng import NoiseStream

import oracles

SQRT2 = math.sqrt(2.0)


def _standalone_terminals(flow, s, t, x0, n_paths, n_steps, seed):
    # one-marginal reference ensemble, independent noise stream
    state = frame_sde.initial_state(flow, s, x0)
    h = (t - s) / n_steps
    normals, _ = NoiseStream(seed, "standalone").block(0, n_paths, n_steps, flow.dim)
    out = _engine_py.run_terminal(flow, s, h, n_steps, state.x, state.u, math.sqrt(h) * normals)
    return out["x"]


def _sphere_pair(rho0):
    return np.array([1.0, 0.0, 0.0]), np.array([math.cos(rho0), math.sin(rho0), 0.0])


# ---------------------------------------------------------------------------
# single steps
# ---------------------------------------------------------------------------


def test_mirror_step_reflects_the_increment_exactly():
    flow = euclidean_flow(2)
    pair = start_pair(flow, 0.0, np.zeros(2), np.array([2.0, 0.0]), "mirror")
    stepped = couple_step(flow, pair, np.array([0.3, 0.0]), np.zeros(2), 1e-2)
    # first marginal moves sqrt(2)*0.3 toward the partner, partner moves opposite
    assert stepped.x == pytest.approx([SQRT2 * 0.3, 0.0], abs=1e-14)
    assert stepped.y == pytest.approx([2.0 - SQRT2 * 0.3, 0.0], abs=1e-14)
    assert stepped.distance(flow) - 2.0 == pytest.approx(-2.0 * SQRT2 * 0.3, abs=1e-12)
    assert not stepped.coupled


def test_parallel_steps_keep_flat_distance_rigid():
    flow = euclidean_flow(2)
    pair = start_pair(flow, 0.0, np.zeros(2), np.array([2.0, 0.0]), "parallel")
    rng = np.random.default_rng(1)
    for _ in range(25):
        pair = couple_step(
            flow, pair, 0.1 * rng.standard_normal(2), 0.1 * rng.standard_normal(2), 1e-2
        )
    assert pair.distance(flow) == pytest.approx(2.0, abs=1e-12)
    assert not pair.coupled


def test_zero_increment_keeps_static_sphere_pair_fixed():
    flow = sphere_flow(2)
    x, y = _sphere_pair(math.pi / 2)
    pair = start_pair(flow, 0.0, x, y, "parallel")
    stepped = couple_step(flow, pair, np.zeros(2), np.zeros(2), 1e-2)
    assert stepped.x == pytest.approx(x, abs=1e-14)
    assert stepped.y == pytest.approx(y, abs=1e-14)
    assert stepped.distance(flow) == pytest.approx(math.pi / 2, abs=1e-12)


def test_step_declares_met_below_grid_threshold():
    # delta_couple defaults to 10 sqrt(h); a pair inside it freezes together
    flow = euclidean_flow(2)
    pair = start_pair(flow, 0.0, np.zeros(2), np.array([0.05, 0.0]), "parallel")
    stepped = couple_step(flow, pair, np.array([0.01, -0.02]), np.zeros(2), 1e-2)
    assert stepped.coupled
    assert stepped.x == pytest.approx(stepped.y, abs=0.0)
    after = couple_step(flow, stepped, np.array([0.03, 0.01]), np.zeros(2), 1e-2)
    assert after.coupled
    assert after.x == pytest.approx(after.y, abs=0.0)
    assert after.distance(flow) == 0.0


def test_mirrored_frames_stay_orthonormal():
    flow = sphere_flow(2)
    x, y = _sphere_pair(1.2)
    pair = start_pair(flow, 0.0, x, y, "mirror")
    rng = np.random.default_rng(7)
    for _ in range(30):
        pair = couple_step(
            flow, pair, 0.05 * rng.standard_normal(2), 0.05 * rng.standard_normal(2), 2e-3
        )
    assert flow.frame_defect(pair.t, pair.x, pair.u) < 1e-10
    assert flow.frame_defect(pair.t, pair.y, pair.v) < 1e-10


def test_step_past_horizon_rejected():
    flow = sphere_ricci_flow(2)
    x, y = _sphere_pair(0.8)
    pair = start_pair(flow, 0.45, x, y, "parallel")
    with pytest.raises(HorizonExceeded):
        couple_step(flow, pair, np.zeros(2), np.zeros(2), 0.1)


@given(seed=st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_parallel_flat_rigidity_is_seed_independent(seed):
    flow = euclidean_flow(2)
    ens = simulate_coupling(
        flow, np.zeros(2), np.array([1.3, -0.4]), 0.0, 0.02, "parallel",
        step=1e-3, n_paths=4, seed=seed,
    )
    rho0 = float(flow.distance(0.0, np.zeros(2), np.array([1.3, -0.4])))
    assert np.max(np.abs(ens.rho_record - rho0)) < 1e-10
    assert np.all(ens.t0_index == -1)


# ---------------------------------------------------------------------------
# ensembles: meeting law, contraction, marginals
# ---------------------------------------------------------------------------


def test_mirror_meeting_times_match_reflection_law():
    flow = euclidean_flow(2)
    ens = simulate_coupling(
        flow, np.zeros(2), np.array([1.0, 0.0]), 0.0, 0.25, "mirror",
        step=1e-3, n_paths=20000, seed=3,
    )
    for t_q in (0.1, 0.25):
        target = oracles.mirror_meeting_probability(1.0, t_q)
        frac = ens.coupled_fraction(t_q)
        stderr = math.sqrt(target * (1.0 - target) / ens.n_paths)
        assert abs(frac - target) < 3.0 * stderr


def test_meeting_law_stable_under_step_refinement():
    # the bridge-draw detection should not drift as the grid refines
    flow = euclidean_flow(2)
    fracs = []
    for step in (2e-3, 1e-3):
        ens = simulate_coupling(
            flow, np.zeros(2), np.array([0.8, 0.0]), 0.0, 0.15, "mirror",
            step=step, n_paths=8000, seed=5,
        )
        fracs.append(ens.coupled_fraction())
    target = oracles.mirror_meeting_probability(0.8, 0.15)
    stderr = math.sqrt(target * (1.0 - target) / 8000)
    assert abs(fracs[0] - target) < 3.0 * stderr
    assert abs(fracs[1] - target) < 3.0 * stderr


def test_ricci_sphere_parallel_contraction_factor():
    flow = sphere_ricci_flow(2)
    rho0 = 0.8
    x, y = _sphere_pair(rho0)
    ens = simulate_coupling(flow, x, y, 0.0, 0.2, "parallel", step=1e-3, n_paths=8000, seed=7)
    est = montecarlo.estimate_mean(ens.rho_end)
    assert est.mean <= rho0 * 0.6 + 3.0 * est.stderr


@pytest.mark.parametrize("p", [1.0, 2.0])
@pytest.mark.parametrize(
    "make,xy,span",
    [
        (lambda: euclidean_flow(2), (np.zeros(2), np.array([1.0, 0.0])), (0.0, 0.2)),
        (
            lambda: sphere_flow(2, scale=static_scale(2.0)),
            _sphere_pair(0.8),
            (0.0, 0.2),
        ),
        (lambda: sphere_ricci_flow(2), _sphere_pair(0.8), (0.0, 0.15)),
        (
            lambda: torus_uniform_exp_flow(2, 0.5),
            (np.array([math.pi, math.pi]), np.array([math.pi + 1.0, math.pi])),
            (0.0, 0.2),
        ),
        (
            lambda: hyperbolic_flow(2, static_scale(1.0), zero_drift()),
            (
                np.array([1.0, 0.0, 0.0]),
                np.array([math.cosh(0.8), math.sinh(0.8), 0.0]),
            ),
            (0.0, 0.2),
        ),
    ],
)
def test_parallel_coupling_satisfies_damping_contraction(make, xy, span, p):
    # transported pairs must contract at least at the damping-bound rate
    flow = make()
    x, y = xy
    s, t = span
    rho0 = float(flow.distance(s, x, y))
    bound = rho0 * damped.decay_factor(flow, s, t)
    est = wasserstein_upper(flow, x, y, s, t, p=p, mode="parallel", n_paths=2000, step=2e-3, seed=11)
    assert est.mean <= bound + 3.0 * est.stderr + 1e-9


def test_both_marginal_laws_preserved_flat_mirror():
    flow = euclidean_flow(2)
    x0, y0 = np.zeros(2), np.array([1.0, 0.0])
    ens = simulate_coupling(flow, x0, y0, 0.0, 0.3, "mirror", step=5e-3, n_paths=3000, seed=11)
    ref_x = _standalone_terminals(flow, 0.0, 0.3, x0, 3000, 60, 101)
    ref_y = _standalone_terminals(flow, 0.0, 0.3, y0, 3000, 60, 102)
    assert montecarlo.energy_distance_pvalue(ens.x_end, ref_x) > 0.01
    assert montecarlo.energy_distance_pvalue(ens.y_end, ref_y) > 0.01


def test_both_marginal_laws_preserved_sphere_mirror():
    flow = sphere_flow(2)
    x0, y0 = _sphere_pair(math.pi / 2)
    ens = simulate_coupling(flow, x0, y0, 0.0, 0.2, "mirror", step=5e-3, n_paths=3000, seed=13)
    ref_x = _standalone_terminals(flow, 0.0, 0.2, x0, 3000, 40, 103)
    ref_y = _standalone_terminals(flow, 0.0, 0.2, y0, 3000, 40, 104)
    assert montecarlo.energy_distance_pvalue(ens.x_end, ref_x) > 0.01
    assert montecarlo.energy_distance_pvalue(ens.y_end, ref_y) > 0.01
    # starting points sit far from the cut locus: the regularization band
    # should almost never trigger, and its use must be reported
    assert ens.reg_fraction < 0.01


# ---------------------------------------------------------------------------
# index form and drift bounds
# ---------------------------------------------------------------------------


def test_index_form_flat_is_zero():
    flow = euclidean_flow(2)
    assert index_form(flow, 0.0, np.zeros(2), np.array([1.5, 0.0])) == pytest.approx(0.0, abs=1e-12)


def test_index_form_matches_sphere_closed_form():
    # boundary-pinned profile on the unit sphere at rho = pi/2 integrates to -2
    flow = sphere_flow(2)
    x, y = _sphere_pair(math.pi / 2)
    val = index_form(flow, 0.0, x, y, n_quad=64)
    assert val == pytest.approx(-2.0, abs=1e-9)
    assert val == pytest.approx(oracles.pinned_profile_index_fd(1.0, math.pi / 2), abs=1e-6)


def test_index_form_matches_hyperbolic_closed_form():
    flow = hyperbolic_flow(2, static_scale(1.0), zero_drift())
    x = np.array([1.0, 0.0, 0.0])
    y = np.array([math.cosh(1.0), math.sinh(1.0), 0.0])
    val = index_form(flow, 0.0, x, y, n_quad=64)
    assert val == pytest.approx(2.0 * math.tanh(0.5), abs=1e-9)
    assert val == pytest.approx(oracles.pinned_profile_index_fd(-1.0, 1.0), abs=1e-6)


@pytest.mark.parametrize("n_quad", [64, 128])
def test_index_form_boundary_solver_cross_checks(n_quad):
    cases = [
        (sphere_flow(2), _sphere_pair(math.pi / 2)),
        (sphere_flow(2, scale=static_scale(2.0)), _sphere_pair(1.1)),
        (
            hyperbolic_flow(2, static_scale(1.0), zero_drift()),
            (np.array([1.0, 0.0, 0.0]), np.array([math.cosh(1.0), math.sinh(1.0), 0.0])),
        ),
    ]
    for flow, (x, y) in cases:
        a = index_form(flow, 0.0, x, y, n_quad=n_quad, solver="profile")
        b = index_form(flow, 0.0, x, y, n_quad=n_quad, solver="bvp")
        assert abs(a - b) < 1e-6


def test_index_form_drift_terms_flat_radial():
    # outward drift Z = lam x stretches the pair at rate lam * rho
    lam = 0.7
    flow = euclidean_flow(2, drift=linear_radial_drift(lam))
    x, y = np.array([0.2, -0.1]), np.array([1.1, 0.4])
    rho = float(flow.distance(0.0, x, y))
    assert index_form(flow, 0.0, x, y) == pytest.approx(lam * rho, abs=1e-12)


def test_index_form_error_paths():
    flow = sphere_flow(2)
    x = np.array([1.0, 0.0, 0.0])
    with pytest.raises(NoMinimizer):
        index_form(flow, 0.0, x, x.copy())
    with pytest.raises(CutLocusAmbiguity):
        index_form(flow, 0.0, x, -x)
    with pytest.raises(ConfigInvalid):
        index_form(flow, 0.0, x, np.array([0.0, 1.0, 0.0]), solver="nope")


def test_rho_drift_bound_examples():
    # static flat: no curvature, no slope, no drift
    flat = euclidean_flow(2)
    assert rho_drift_bound(flat, 0.0, np.zeros(2), np.array([1.0, 0.0])) == pytest.approx(0.0, abs=1e-12)

    # static unit sphere at rho = pi/2: only the index form contributes
    sph = sphere_flow(2)
    x, y = _sphere_pair(math.pi / 2)
    assert rho_drift_bound(sph, 0.0, x, y) == pytest.approx(-2.0, abs=1e-9)

    # shrinking sphere adds the metric-slope term -rho on top
    ric = sphere_ricci_flow(2)
    gap = rho_drift_bound(ric, 0.0, x, y) - index_form(ric, 0.0, x, y)
    assert gap == pytest.approx(-math.pi / 2, abs=1e-12)

    # uniformly shrinking torus: slope term is -lam * rho, curvature zero
    tor = torus_uniform_exp_flow(2, 0.5)
    xt, yt = np.array([0.3, 0.8]), np.array([1.1, 2.0])
    rho_t = float(tor.distance(0.0, xt, yt))
    assert rho_drift_bound(tor, 0.0, xt, yt) == pytest.approx(-0.5 * rho_t, abs=1e-12)

    # contractive extra drift contributes exactly its strength
    pulled = rho_drift_bound(flat, 0.0, np.zeros(2), np.array([2.0, 0.0]), extra_drift=RadialPull(1.0))
    assert pulled == pytest.approx(-1.0, abs=1e-12)


def test_empirical_drift_flat_mirror_is_centered():
    flow = euclidean_flow(2)
    ens = simulate_coupling(
        flow, np.zeros(2), np.array([2.0, 0.0]), 0.0, 0.05, "mirror",
        step=1e-3, n_paths=4000, seed=17,
    )
    est = empirical_rho_drift(ens, (0.0, 0.03))
    assert abs(est.mean) < 3.0 * est.stderr


def test_empirical_drift_sphere_mirror_respects_bound():
    flow = sphere_flow(2)
    x, y = _sphere_pair(math.pi / 2)
    ens = simulate_coupling(flow, x, y, 0.0, 0.012, "mirror", step=1e-3, n_paths=6000, seed=19)
    est = empirical_rho_drift(ens, (0.0, 0.01))
    bound = rho_drift_bound(flow, 0.0, x, y)
    assert est.mean <= bound + 3.0 * est.stderr
    assert est.mean < -1.0  # clearly contracting, not merely consistent with 0


def test_empirical_drift_sees_extra_pull():
    flow = euclidean_flow(2)
    ens = simulate_coupling(
        flow, np.zeros(2), np.array([2.0, 0.0]), 0.0, 0.04, "mirror",
        extra_drift=RadialPull(1.0), step=1e-3, n_paths=4000, seed=23,
    )
    est = empirical_rho_drift(ens, (0.0, 0.03))
    assert abs(est.mean + 1.0) < 3.0 * est.stderr


def test_empirical_drift_insufficient_samples():
    flow = euclidean_flow(2)
    ens = simulate_coupling(
        flow, np.zeros(2), np.array([0.05, 0.0]), 0.0, 0.1, "mirror",
        step=1e-3, n_paths=32, seed=29,
    )
    # nearly every pair meets almost immediately at this separation
    with pytest.raises(InsufficientSamples):
        empirical_rho_drift(ens, (0.0, 0.1))
    ens2 = simulate_coupling(
        flow, np.zeros(2), np.array([2.0, 0.0]), 0.0, 0.02, "mirror",
        step=1e-3, n_paths=64, seed=31,
    )
    with pytest.raises(InsufficientSamples):
        empirical_rho_drift(ens2, (0.0012, 0.0018))  # no record nodes inside


# ---------------------------------------------------------------------------
# transport-distance bounds
# ---------------------------------------------------------------------------


def test_wasserstein_upper_trivial_cases():
    flow = euclidean_flow(2)
    same = wasserstein_upper(flow, np.zeros(2), np.zeros(2), 0.0, 0.1)
    assert same.mean == 0.0 and same.stderr == 0.0
    rigid = wasserstein_upper(
        flow, np.zeros(2), np.array([1.0, 0.0]), 0.0, 0.1, p=1.0,
        mode="parallel", n_paths=1000, step=1e-3, seed=29,
    )
    assert rigid.mean == pytest.approx(1.0, abs=1e-12)
    assert rigid.stderr < 1e-12


def test_wasserstein_upper_ricci_sphere():
    flow = sphere_ricci_flow(2)
    rho0 = 0.8
    x, y = _sphere_pair(rho0)
    est = wasserstein_upper(flow, x, y, 0.0, 0.2, p=1.0, mode="parallel", n_paths=4000, step=1e-3, seed=37)
    assert est.mean <= rho0 * 0.6 + 3.0 * est.stderr


def test_wasserstein_rejects_bad_order():
    flow = euclidean_flow(2)
    with pytest.raises(ConfigInvalid):
        wasserstein_upper(flow, np.zeros(2), np.array([1.0, 0.0]), 0.0, 0.1, p=0.5)


# ---------------------------------------------------------------------------
# records, CSV, validation, determinism
# ---------------------------------------------------------------------------


def test_path_views_and_sentinel():
    flow = euclidean_flow(2)
    ens = simulate_coupling(
        flow, np.zeros(2), np.array([0.3, 0.0]), 0.0, 0.1, "mirror",
        step=1e-3, n_paths=40, seed=41,
    )
    seen = list(ens.paths(max_paths=10))
    assert len(seen) == 10
    for path in seen:
        assert path.times.shape == path.rho.shape
        assert np.all(path.rho >= 0.0)
        if path.coupled:
            after = path.times >= path.coupled_time - 1e-12
            assert np.all(path.rho[after] == 0.0)
        else:
            assert path.coupled_time == NOT_COUPLED


def test_csv_dump_layout_and_flags():
    flow = euclidean_flow(2)
    ens = simulate_coupling(
        flow, np.zeros(2), np.array([0.3, 0.0]), 0.0, 0.1, "mirror",
        step=2e-3, n_paths=12, seed=43,
    )
    buf = io.StringIO()
    ens.to_csv(buf)
    lines = buf.getvalue().strip().splitlines()
    assert lines[0] == "path_id,k,t,rho,coupled_flag,regularized_flag"
    n_nodes = ens.record_nodes.shape[0]
    assert len(lines) - 1 == 12 * n_nodes
    for i in range(12):
        rows = [line.split(",") for line in lines[1 + i * n_nodes : 1 + (i + 1) * n_nodes]]
        flags = np.asarray([int(r[4]) for r in rows])
        rhos = np.asarray([float(r[3]) for r in rows])
        assert np.all(np.diff(flags) >= 0)  # met stays met
        assert np.all(rhos[flags == 1] == 0.0)
        assert set(int(r[5]) for r in rows) <= {0, 1}
    buf2 = io.StringIO()
    ens.to_csv(buf2, max_paths=3)
    assert len(buf2.getvalue().strip().splitlines()) - 1 == 3 * n_nodes


def test_simulation_validation_errors():
    flow = euclidean_flow(2)
    x, y = np.zeros(2), np.array([1.0, 0.0])
    with pytest.raises(ConfigInvalid):
        simulate_coupling(flow, x, x.copy(), 0.0, 0.1, "mirror", n_paths=8)
    with pytest.raises(DegenerateInterval):
        simulate_coupling(flow, x, y, 0.2, 0.1, "mirror", n_paths=8)
    with pytest.raises(ConfigInvalid):
        simulate_coupling(flow, x, y, 0.0, 0.1, "sideways", n_paths=8)
    with pytest.raises(HorizonExceeded):
        simulate_coupling(sphere_ricci_flow(2), *_sphere_pair(0.5), 0.0, 0.51, "parallel", n_paths=8)
    with pytest.raises(ConfigInvalid):
        RadialPull(math.inf)
    ens = simulate_coupling(flow, x, y, 0.0, 0.05, "mirror", n_paths=8, rho_stride=0)
    with pytest.raises(ConfigInvalid):
        ens.to_csv(io.StringIO())


def test_ensembles_deterministic_across_threads_and_backend():
    flow = sphere_flow(2)
    x, y = _sphere_pair(1.0)
    kwargs = dict(step=2e-3, n_paths=500, seed=47)
    a = simulate_coupling(flow, x, y, 0.0, 0.1, "mirror", threads=1, **kwargs)
    b = simulate_coupling(flow, x, y, 0.0, 0.1, "mirror", threads=4, **kwargs)
    c = simulate_coupling(flow, x, y, 0.0, 0.1, "mirror", backend_name="python", **kwargs)
    assert np.array_equal(a.rho_end, b.rho_end)
    assert np.array_equal(a.t0_index, b.t0_index)
    assert np.array_equal(a.x_end, b.x_end)
    assert np.array_equal(a.rho_end, c.rho_end)
