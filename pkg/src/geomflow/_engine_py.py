"""Vectorized path engine (pure numpy backend).

All functions advance a batch of paths through the frame-valued Euler
scheme: frame-coordinate increment, geodesic move, parallel transport of
the frame, vertical correction for the moving metric, then exact
re-orthonormalization against the post-step metric. The compiled backend
implements the same contracts; keep the step math structurally identical.

Noise convention: dB has shape (n, N, d) with N(0, h) entries. The square
root of two enters here, not in the noise.
"""

from __future__ import annotations

import math

import numpy as np

from .flows import TWO_PI, CUT_MARGIN_FACTOR, MetricFlow, _wrap_angle

SQRT2 = math.sqrt(2.0)

_KIND_CODE = {"euclidean": 0, "sphere": 1, "hyperbolic": 2, "torus": 3}


# ---------------------------------------------------------------------------
# grids
# ---------------------------------------------------------------------------


def scale_grids(flow: MetricFlow, s: float, h: float, n_steps: int) -> dict:
    """Evaluate the metric scale and slope on the step grid (and midpoints)."""
    tgrid = s + h * np.arange(n_steps + 1)
    tmid = tgrid[:-1] + 0.5 * h
    flow.check_time(float(tgrid[-1]))
    out = {"t": tgrid}
    if flow.kind == "torus":
        out["a"] = np.stack([sc.value(tgrid) for sc in flow.axis_scales], axis=1)
        out["adot"] = np.stack([sc.slope(tgrid) for sc in flow.axis_scales], axis=1)
    else:
        out["c"] = flow.scale.value(tgrid)
        out["cdot"] = flow.scale.slope(tgrid)
    ds = flow.damping_scalar(tmid)
    out["damping_mid"] = None if ds is None else np.asarray(ds, dtype=float)
    return out


def damping_grid(flow: MetricFlow, s: float, h: float, n_steps: int) -> np.ndarray:
    """Deterministic damped-transport norms q_k = ||Q_{s,t_k}|| on the grid.

    Valid when the damping matrix is isotropic (builtin flows without
    custom drift); the per-step factor uses the midpoint rate so the
    product matches the trapezoid integral of the rate at second order.
    """
    grids = scale_grids(flow, s, h, n_steps)
    mid = grids["damping_mid"]
    if mid is None:
        raise ValueError("damping_grid requires an isotropic damping matrix")
    q = np.empty(n_steps + 1)
    q[0] = 1.0
    np.cumprod(np.exp(-mid * h), out=q[1:])
    return q


# ---------------------------------------------------------------------------
# per-kind step pieces
# ---------------------------------------------------------------------------


def _drift_coords(flow, t, x, u, cval):
    """Frame coordinates of the drift field at (t, x); None when zero."""
    if flow.drift.is_zero:
        return None
    z = flow.drift.value(t, x)
    return _to_frame(flow.kind, u, z, cval)


def _to_frame(kind, u, w, cval):
    if kind == 3:  # torus, cval is (d_ambient,) axis scales
        return np.einsum("nia,i,ni->na", u, cval, w)
    if kind == 2:
        eta = np.ones(u.shape[1])
        eta[0] = -1.0
        return cval * np.einsum("nia,i,ni->na", u, eta, w)
    return cval * np.einsum("nia,ni->na", u, w)


def _gram(kind, u, cval):
    if kind == 3:
        return np.einsum("nia,i,nib->nab", u, cval, u)
    if kind == 2:
        eta = np.ones(u.shape[1])
        eta[0] = -1.0
        return cval * np.einsum("nia,i,nib->nab", u, eta, u)
    return cval * np.einsum("nia,nib->nab", u, u)


def _gs_inplace(kind, u, cval):
    """Weighted modified Gram-Schmidt on frame columns, in place."""
    d = u.shape[2]
    if kind == 3:
        weight = cval

        def ip(a, b):
            return np.einsum("ni,i,ni->n", a, weight, b)

    elif kind == 2:
        eta = np.ones(u.shape[1])
        eta[0] = -1.0

        def ip(a, b):
            return cval * np.einsum("ni,i,ni->n", a, eta, b)

    else:

        def ip(a, b):
            return cval * np.einsum("ni,ni->n", a, b)

    for a in range(d):
        col = u[:, :, a]
        for b in range(a):
            col -= ip(col, u[:, :, b])[:, None] * u[:, :, b]
        col /= np.sqrt(np.maximum(ip(col, col), 1e-300))[:, None]


def _move_and_transport(kind, x, u, v):
    """Geodesic move along ambient/chart velocity v; frame transported."""
    if kind == 0:
        return x + v, u
    if kind == 3:
        return np.mod(x + v, TWO_PI), u
    if kind == 1:
        alpha = np.linalg.norm(v, axis=1)
        safe = np.maximum(alpha, 1e-300)
        vhat = v / safe[:, None]
        ca, sa = np.cos(alpha), np.sin(alpha)
        x1 = ca[:, None] * x + sa[:, None] * vhat
        small = alpha < 1e-14
        x1[small] = x[small]
        x1 /= np.linalg.norm(x1, axis=1, keepdims=True)
        coef = np.einsum("nia,ni->na", u, vhat)
        u1 = u + coef[:, None, :] * (
            (ca - 1.0)[:, None, None] * vhat[:, :, None] - sa[:, None, None] * x[:, :, None]
        )
        u1[small] = u[small]
        return x1, u1
    # hyperbolic
    eta = np.ones(x.shape[1])
    eta[0] = -1.0
    msq = np.einsum("ni,i,ni->n", v, eta, v)
    alpha = np.sqrt(np.maximum(msq, 0.0))
    safe = np.maximum(alpha, 1e-300)
    vhat = v / safe[:, None]
    ca, sa = np.cosh(alpha), np.sinh(alpha)
    x1 = ca[:, None] * x + sa[:, None] * vhat
    small = alpha < 1e-14
    x1[small] = x[small]
    q = -np.einsum("ni,i,ni->n", x1, eta, x1)
    x1 /= np.sqrt(np.maximum(q, 1e-300))[:, None]
    coef = np.einsum("nia,i,ni->na", u, eta, vhat)
    u1 = u + coef[:, None, :] * (
        (ca - 1.0)[:, None, None] * vhat[:, :, None] + sa[:, None, None] * x[:, :, None]
    )
    u1[small] = u[small]
    return x1, u1


def _vertical(kind, u, grids, k, h):
    """Apply u <- u (I - G h / 2) with G the lifted metric slope at node k."""
    if kind == 3:
        a = grids["a"][k]
        adot = grids["adot"][k]
        g = np.einsum("nia,i,nib->nab", u, adot, u)
        return u - 0.5 * h * np.einsum("nic,ncb->nib", u, g)
    c = grids["c"][k]
    cdot = grids["cdot"][k]
    return u * (1.0 - 0.5 * h * (cdot / c))


def _step(flow, kind, grids, k, h, x, u, dB, extra_drift=None, want_defect=False):
    """One full horizontal step at node k. Mutates nothing; returns (x1, u1, defect)."""
    t_k = grids["t"][k]
    cval_k = grids["a"][k] if kind == 3 else grids["c"][k]
    xi = SQRT2 * dB
    zc = _drift_coords(flow, t_k, x, u, cval_k)
    if zc is not None:
        xi = xi + h * zc
    if extra_drift is not None:
        xi = xi + h * extra_drift
    v = np.einsum("nia,na->ni", u, xi)
    x1, u1 = _move_and_transport(kind, x, u, v)
    u1 = _vertical(kind, u1, grids, k, h)
    cval_k1 = grids["a"][k + 1] if kind == 3 else grids["c"][k + 1]
    defect = 0.0
    if want_defect:
        gram = _gram(kind, u1, cval_k1)
        eye = np.eye(u1.shape[2])
        defect = float(np.max(np.abs(gram - eye)))
    _gs_inplace(kind, u1, cval_k1)
    return x1, u1, defect


def _dist_to_ref(kind, x, ref, cval):
    if kind == 0:
        return math.sqrt(float(cval)) * np.linalg.norm(x - ref, axis=1)
    if kind == 1:
        dots = np.clip(x @ ref, -1.0, 1.0)
        return math.sqrt(float(cval)) * np.arccos(dots)
    if kind == 2:
        eta = np.ones(x.shape[1])
        eta[0] = -1.0
        m = np.maximum(-np.einsum("ni,i,i->n", x, eta, ref), 1.0)
        return math.sqrt(float(cval)) * np.arccosh(m)
    delta = _wrap_angle(x - ref)
    return np.sqrt(np.einsum("ni,i,ni->n", delta, cval, delta))


def _tile(arr, n):
    arr = np.asarray(arr, dtype=float)
    if arr.ndim == 1:
        return np.repeat(arr[None, :], n, axis=0)
    return arr.copy()


def _tile_frame(u, n):
    u = np.asarray(u, dtype=float)
    if u.ndim == 2:
        return np.broadcast_to(u, (n,) + u.shape).copy()
    return u.copy()


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------


def run_terminal(
    flow: MetricFlow,
    s: float,
    h: float,
    n_steps: int,
    x0,
    u0,
    dB: np.ndarray,
    weights=None,
    radii=None,
    want_defect: bool = False,
):
    """Advance a batch to time s + n_steps * h.

    weights: optional (n_steps,) array; accumulates integ += weights[k] * dB_k
    (used for the stochastic-integral derivative estimator with the
    deterministic damping norms folded in).
    radii: optional increasing list; records the first node index at which
    the distance to the start point reaches each radius (-1 = never).
    """
    n = dB.shape[0]
    kind = _KIND_CODE[flow.kind]
    grids = scale_grids(flow, s, h, n_steps)
    x = _tile(x0, n)
    u = _tile_frame(u0, n)
    integ = np.zeros((n, dB.shape[2])) if weights is not None else None
    exit_idx = None
    ref = None
    if radii is not None and len(radii):
        radii = np.asarray(radii, dtype=float)
        exit_idx = -np.ones((n, len(radii)), dtype=np.int64)
        ref = np.asarray(x0, dtype=float).reshape(-1)
    defect_max = 0.0
    for k in range(n_steps):
        if integ is not None and weights[k] != 0.0:
            integ += weights[k] * dB[:, k, :]
        x, u, dft = _step(flow, kind, grids, k, h, x, u, dB[:, k, :], want_defect=want_defect)
        defect_max = max(defect_max, dft)
        if exit_idx is not None:
            cval = grids["a"][k + 1] if kind == 3 else grids["c"][k + 1]
            dist = _dist_to_ref(kind, x, ref, cval)
            for j, r in enumerate(radii):
                hit = (exit_idx[:, j] < 0) & (dist >= r)
                exit_idx[hit, j] = k + 1
    out = {"x": x, "u": u, "defect_max": defect_max}
    if integ is not None:
        out["integ"] = integ
    if exit_idx is not None:
        out["exit_idx"] = exit_idx
    return out


def run_record(flow: MetricFlow, s: float, h: float, n_steps: int, x0, u0, dB: np.ndarray):
    """Like run_terminal but stores every node (small batches only)."""
    n = dB.shape[0]
    kind = _KIND_CODE[flow.kind]
    grids = scale_grids(flow, s, h, n_steps)
    x = _tile(x0, n)
    u = _tile_frame(u0, n)
    xs = np.empty((n, n_steps + 1) + x.shape[1:])
    us = np.empty((n, n_steps + 1) + u.shape[1:])
    defects = np.zeros(n_steps + 1)
    xs[:, 0] = x
    us[:, 0] = u
    for k in range(n_steps):
        x, u, dft = _step(flow, kind, grids, k, h, x, u, dB[:, k, :], want_defect=True)
        xs[:, k + 1] = x
        us[:, k + 1] = u
        defects[k + 1] = dft
    return {"t": grids["t"], "x": xs, "u": us, "defect": defects}


def run_local(
    flow: MetricFlow,
    s: float,
    h: float,
    n_steps: int,
    x0,
    u0,
    dB: np.ndarray,
    qgrid: np.ndarray,
    radius: float,
    t_total: float,
):
    """Localized derivative run with the inverse-square time-changed profile.

    The profile weight at node k is fc^{-2} / t_total with
    fc = cos(pi * rho / (2 radius)), rho the current distance to the start
    point; accumulation stops once the accumulated clock sum reaches
    t_total, and a path freezing index is recorded if it leaves the radius
    ball beforehand (rare, handled by nested continuation by the caller).
    """
    n = dB.shape[0]
    kind = _KIND_CODE[flow.kind]
    grids = scale_grids(flow, s, h, n_steps)
    x = _tile(x0, n)
    u = _tile_frame(u0, n)
    ref = np.asarray(x0, dtype=float).reshape(-1)
    integ = np.zeros((n, dB.shape[2]))
    clock = np.zeros(n)
    alive = np.ones(n, dtype=bool)  # not exited
    exit_idx = -np.ones(n, dtype=np.int64)
    x_frozen = x.copy()
    rho_cap = radius * (1.0 - 1e-3)
    for k in range(n_steps):
        cval = grids["a"][k] if kind == 3 else grids["c"][k]
        rho = _dist_to_ref(kind, x, ref, cval)
        newly_out = alive & (rho >= radius)
        if np.any(newly_out):
            exit_idx[newly_out] = k
            x_frozen[newly_out] = x[newly_out]
            alive[newly_out] = False
        active = alive & (clock < t_total)
        if np.any(active):
            fc = np.cos(0.5 * math.pi * np.minimum(rho, rho_cap) / radius)
            fc2inv = 1.0 / np.maximum(fc * fc, 1e-300)
            dclock = fc2inv * h
            # trim the final increment so the profile integral is exactly 1
            frac = np.minimum(1.0, (t_total - clock) / dclock)
            w = np.where(active, fc2inv / t_total * frac, 0.0)
            integ += (w * qgrid[k])[:, None] * dB[:, k, :]
            clock = np.where(active, clock + dclock * frac, clock)
        moving = alive
        xs, us, _ = _step(flow, kind, grids, k, h, x, u, dB[:, k, :])
        x = np.where(moving[:, None], xs, x)
        u = np.where(moving[:, None, None], us, u)
    x_frozen[alive] = x[alive]
    return {
        "x": x_frozen,
        "u": u,
        "integ": integ,
        "exit_idx": exit_idx,
        "clock": clock,
    }


def run_coupled(
    flow: MetricFlow,
    s: float,
    h: float,
    n_steps: int,
    x0,
    u0,
    y0,
    v0,
    dB: np.ndarray,
    dBp: np.ndarray,
    unif: np.ndarray,
    mode: str,
    pull_kappa: float = 0.0,
    delta_couple: float = 0.0,
    rho_stride: int = 0,
):
    """Advance a coupled pair of marginals.

    mode 'parallel' transports the first marginal's noise along the
    connecting geodesic; 'mirror' additionally reflects it. Near the cut
    locus (margin below CUT_MARGIN_FACTOR * length scale) the second
    marginal uses the independent increments dBp instead (regularized
    step). The first time the pair distance drops to zero (detected by a
    sign-crossing proxy plus a diffusive bridge draw in mirror mode, by
    the delta_couple threshold otherwise) the pair is declared coupled and
    moves as one afterwards.

    Returns terminal states, coupling node indices (-1 = never),
    regularized step counts and, when rho_stride > 0, the distance record
    at every rho_stride-th node.
    """
    n = dB.shape[0]
    d = dB.shape[2]
    kind = _KIND_CODE[flow.kind]
    mirror = mode == "mirror"
    grids = scale_grids(flow, s, h, n_steps)
    x = _tile(x0, n)
    u = _tile_frame(u0, n)
    y = _tile(y0, n)
    v = _tile_frame(v0, n)
    coupled_idx = -np.ones(n, dtype=np.int64)
    reg_count = np.zeros(n, dtype=np.int64)
    record = None
    rec_nodes = None
    if rho_stride > 0:
        rec_nodes = list(range(0, n_steps + 1, rho_stride))
        if rec_nodes[-1] != n_steps:
            rec_nodes.append(n_steps)
        record = np.zeros((n, len(rec_nodes)))
        reg_record = np.zeros((n, len(rec_nodes)), dtype=np.int8)
        reg_since = np.zeros(n, dtype=bool)
        rec_pos = {node: i for i, node in enumerate(rec_nodes)}
    cvals = grids["a"] if kind == 3 else grids["c"]

    def pair_distance(k):
        cval = cvals[k]
        if kind == 0:
            return math.sqrt(float(cval)) * np.linalg.norm(y - x, axis=1)
        if kind == 1:
            dots = np.clip(np.einsum("ni,ni->n", x, y), -1.0, 1.0)
            return math.sqrt(float(cval)) * np.arccos(dots)
        if kind == 2:
            eta = np.ones(x.shape[1])
            eta[0] = -1.0
            m = np.maximum(-np.einsum("ni,i,ni->n", x, eta, y), 1.0)
            return math.sqrt(float(cval)) * np.arccosh(m)
        delta = _wrap_angle(y - x)
        return np.sqrt(np.einsum("ni,i,ni->n", delta, cval, delta))

    rho = pair_distance(0)
    if record is not None:
        record[:, 0] = rho
    for k in range(n_steps):
        t_k = grids["t"][k]
        cval = cvals[k]
        free = coupled_idx < 0
        # connecting geodesic data for free pairs (vectorized over all, masked later)
        rho_k = rho
        e_x, e_y, margin = _connecting(kind, x, y, cval)
        # map the first marginal's noise to the second marginal
        w = SQRT2 * np.einsum("nia,na->ni", u, dB[:, k, :])
        w_t = _transport_pair(kind, x, y, w, e_x, e_y, cval, mirror)
        xi2 = _to_frame(kind, v, w_t, cval) / SQRT2  # in dB units
        # regularization near the cut locus
        if kind in (1, 3):
            scale_len = math.sqrt(float(np.min(cval)))
            reg = free & (margin < CUT_MARGIN_FACTOR * scale_len)
        else:
            reg = np.zeros(n, dtype=bool)
        if np.any(reg):
            xi2[reg] = dBp[reg, k, :]
            reg_count[reg] += 1
        if record is not None:
            reg_since |= reg
        # mirror-mode signed proxy for sub-grid zero crossing
        if mirror:
            zc = np.einsum("na,na->n", _to_frame(kind, u, e_x, cval), dB[:, k, :])
            stilde = rho_k - 2.0 * SQRT2 * zc
        # extra drift pulling the second marginal toward the first
        extra = None
        if pull_kappa != 0.0:
            extra = _to_frame(kind, v, -pull_kappa * e_y, cval)
        # step both marginals
        x1, u1, _ = _step(flow, kind, grids, k, h, x, u, dB[:, k, :])
        y1, v1, _ = _step(flow, kind, grids, k, h, y, v, xi2, extra_drift=extra)
        # frozen (already coupled) pairs follow the first marginal exactly
        y1 = np.where(free[:, None], y1, x1)
        v1 = np.where(free[:, None, None], v1, u1)
        x, u, y, v = x1, u1, y1, v1
        rho = pair_distance(k + 1)
        rho = np.where(free, rho, 0.0)
        # coupling detection
        if mirror:
            crossed = stilde <= 0.0
            pos = ~crossed & (~reg)
            pcross = np.exp(-np.clip(rho_k * np.maximum(stilde, 0.0) / (4.0 * h), 0.0, 700.0))
            bridge = pos & (unif[:, k] < pcross)
            hit = free & (crossed | bridge)
            if delta_couple > 0.0:
                hit |= free & (rho <= delta_couple)
        else:
            hit = free & (rho <= delta_couple)
        if np.any(hit):
            coupled_idx[hit] = k + 1
            y[hit] = x[hit]
            v[hit] = u[hit]
            rho[hit] = 0.0
        if record is not None and (k + 1) in rec_pos:
            record[:, rec_pos[k + 1]] = rho
            reg_record[:, rec_pos[k + 1]] = reg_since
            reg_since[:] = False
    out = {
        "x": x,
        "u": u,
        "y": y,
        "v": v,
        "rho": rho,
        "coupled_idx": coupled_idx,
        "reg_count": reg_count,
    }
    if record is not None:
        out["rho_record"] = record
        out["rho_nodes"] = np.asarray(rec_nodes, dtype=np.int64)
        out["reg_record"] = reg_record
    return out


def _connecting(kind, x, y, cval):
    """Unit departure/arrival directions and cut margin for point pairs."""
    n = x.shape[0]
    if kind == 0:
        diff = y - x
        nrm = np.maximum(np.linalg.norm(diff, axis=1), 1e-300)
        e = diff / nrm[:, None]
        e_unit = e / math.sqrt(float(cval))
        return e_unit, e_unit, np.full(n, np.inf)
    if kind == 1:
        dots = np.clip(np.einsum("ni,ni->n", x, y), -1.0, 1.0)
        theta = np.arccos(dots)
        sin = np.sqrt(np.maximum(1.0 - dots**2, 1e-300))
        e = (y - dots[:, None] * x) / sin[:, None]
        e_arr = -(x - dots[:, None] * y) / sin[:, None]
        root_c = math.sqrt(float(cval))
        margin = root_c * (math.pi - theta)
        return e / root_c, e_arr / root_c, margin
    if kind == 2:
        eta = np.ones(x.shape[1])
        eta[0] = -1.0
        m = np.maximum(-np.einsum("ni,i,ni->n", x, eta, y), 1.0)
        sinh = np.sqrt(np.maximum(m**2 - 1.0, 1e-300))
        e = (y - m[:, None] * x) / sinh[:, None]
        e_arr = (m[:, None] * y - x) / sinh[:, None]
        root_c = math.sqrt(float(cval))
        return e / root_c, e_arr / root_c, np.full(n, np.inf)
    delta = _wrap_angle(y - x)
    rho = np.sqrt(np.maximum(np.einsum("ni,i,ni->n", delta, cval, delta), 1e-300))
    e = delta / rho[:, None]
    best_sq = rho**2
    flipped = np.abs(delta) - TWO_PI
    alt_sq = best_sq[:, None] - cval[None, :] * delta**2 + cval[None, :] * flipped**2
    margin = np.sqrt(np.maximum(np.min(alt_sq, axis=1), 0.0)) - rho
    return e, e, margin


def _transport_pair(kind, x, y, w, e_x, e_y, cval, mirror):
    """Parallel (or mirror) transport of ambient vectors w from x to y."""
    if kind == 0:
        out = w.copy()
        if mirror:
            coef = float(cval) * np.einsum("ni,ni->n", w, e_x)
            out -= 2.0 * coef[:, None] * e_y
        return out
    if kind == 3:
        out = w.copy()
        if mirror:
            coef = np.einsum("ni,i,ni->n", w, cval, e_x)
            out -= 2.0 * coef[:, None] * e_y
        return out
    if kind == 1:
        dots = np.clip(np.einsum("ni,ni->n", x, y), -1.0, 1.0)
        theta = np.arccos(dots)
        sin = np.sqrt(np.maximum(1.0 - dots**2, 1e-300))
        e = (y - dots[:, None] * x) / sin[:, None]  # euclidean-unit version of e_x
        coef_e = np.einsum("ni,ni->n", w, e)
        out = w + coef_e[:, None] * (
            (np.cos(theta) - 1.0)[:, None] * e - np.sin(theta)[:, None] * x
        )
        small = theta < 1e-14
        out[small] = w[small]
        if mirror:
            coef = float(cval) * np.einsum("ni,ni->n", w, e_x)
            out -= 2.0 * coef[:, None] * e_y
        return out
    eta = np.ones(x.shape[1])
    eta[0] = -1.0
    m = np.maximum(-np.einsum("ni,i,ni->n", x, eta, y), 1.0)
    theta = np.arccosh(m)
    sinh = np.sqrt(np.maximum(m**2 - 1.0, 1e-300))
    e = (y - m[:, None] * x) / sinh[:, None]
    coef_e = np.einsum("ni,i,ni->n", w, eta, e)
    out = w + coef_e[:, None] * (
        (np.cosh(theta) - 1.0)[:, None] * e + np.sinh(theta)[:, None] * x
    )
    small = theta < 1e-14
    out[small] = w[small]
    if mirror:
        coef = float(cval) * np.einsum("ni,i,ni->n", w, eta, e_x)
        out -= 2.0 * coef[:, None] * e_y
    return out
