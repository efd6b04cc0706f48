"""Experiment dispatch and report emission.

run_experiment maps a validated config onto the library operations and
collects result records plus diagnostics; emit_report writes the bundle
as JSON with stable key order, CSV tables, and dependency-free SVG line
plots. Identical configs produce byte-identical JSON apart from the
timestamp field. Individual verifier failures inside a verify run are
recorded as error entries instead of aborting the bundle.
"""

from __future__ import annotations

import dataclasses
import datetime
import json
import math
import os
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from . import backend, frame_sde, montecarlo
from .config import ExperimentConfig, emit_config
from .errors import ConfigInvalid, GeomflowError
from .fields import from_descriptor
from .gradient import bismut_integrated, bismut_pathwise
from .coupling import simulate_coupling
from .inequalities import NonexplosionSpec, builtin_matrix, nonexplosion_check
from .gradient import (
    recover_curvature_entropy,
    recover_curvature_grad,
    recover_curvature_variance,
)
from .rng import NoiseStream

REPORT_VERSION = 1


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


@dataclass
class ReportBundle:
    """Everything one experiment produced, ready for emission."""

    experiment: ExperimentConfig
    results: list = dc_field(default_factory=list)
    diagnostics: list = dc_field(default_factory=list)
    artifacts: dict = dc_field(default_factory=dict)
    version: int = REPORT_VERSION

    @property
    def config(self) -> dict:
        return _jsonable(dataclasses.asdict(self.experiment))

    @property
    def all_computed(self) -> bool:
        return all(r.get("kind") != "error" for r in self.results)

    def as_payload(self, timestamp: Optional[str] = None) -> dict:
        if timestamp is None:
            timestamp = datetime.datetime.now(datetime.timezone.utc).isoformat()
        return {
            "version": self.version,
            "timestamp": timestamp,
            "config": self.config,
            "results": _jsonable(self.results),
            "diagnostics": _jsonable(self.diagnostics),
        }


def _threads_from_env() -> Optional[int]:
    raw = os.environ.get("GEOMFLOW_THREADS", "").strip()
    if not raw:
        return None
    try:
        val = int(raw)
    except ValueError:
        raise ConfigInvalid(f"GEOMFLOW_THREADS must be an integer, got {raw!r}") from None
    return val if val > 0 else None


def _rate_expression(expr: str):
    """Tiny rate grammar for config files: const:v, power:c,k, poly:a0,a1,..."""
    head, _, rest = str(expr).partition(":")
    head = head.strip()
    try:
        if head == "const":
            v = float(rest)
            return lambda sv: v + 0.0 * np.asarray(sv, dtype=float)
        if head == "power":
            c, k = (float(p) for p in rest.split(","))
            return lambda sv: c * np.asarray(sv, dtype=float) ** k
        if head == "poly":
            coeffs = [float(p) for p in rest.split(",")]
            return lambda sv: np.polynomial.polynomial.polyval(
                np.asarray(sv, dtype=float), coeffs
            )
    except ValueError:
        raise ConfigInvalid(f"malformed rate expression {expr!r}") from None
    raise ConfigInvalid(
        f"unknown rate expression {expr!r} (use const:v, power:c,k or poly:a0,a1,...)"
    )


# ---------------------------------------------------------------------------
# task runners


def _estimate_record(name: str, est: montecarlo.Estimate) -> dict:
    return {
        "kind": "estimate",
        "name": name,
        "mean": _jsonable(np.atleast_1d(est.mean).tolist() if np.ndim(est.mean) else float(est.mean)),
        "stderr": _jsonable(np.atleast_1d(est.stderr).tolist() if np.ndim(est.stderr) else float(est.stderr)),
        "n": int(est.n),
    }


def _run_simulate(cfg: ExperimentConfig, flow, threads):
    task, mc = cfg.task, cfg.mc
    x0 = np.asarray(task.x, dtype=float)
    s, t = task.s, float(task.t)
    n_steps = max(1, round((t - s) / mc.step))
    h = (t - s) / n_steps
    state = frame_sde.initial_state(flow, s, x0, None)
    eng, eng_name = backend.engine_for(flow, None)
    stream = NoiseStream(mc.seed, "simulate")
    m = state.x.shape[0]
    rooth = math.sqrt(h)

    def chunk(lo, hi):
        normals, _ = stream.block(lo, hi, n_steps, flow.dim)
        out = eng.run_terminal(
            flow, s, h, n_steps, state.x, state.u, rooth * normals, want_defect=True
        )
        cols = np.empty((hi - lo, m + 1))
        cols[:, :m] = out["x"]
        cols[:, m] = out["defect_max"]  # chunk max, broadcast; global max taken below
        return cols

    cols = montecarlo.map_paths(chunk, mc.n_paths, m + 1, threads=threads)
    xs = cols[:, :m]
    mean = montecarlo.estimate_mean(xs)
    var_rows = []
    for j in range(m):
        col = xs[:, j]
        var_rows.append(montecarlo.block_estimate(col, lambda b: float(np.var(b))))
    results = [
        _estimate_record("terminal_mean", mean),
        {
            "kind": "estimate",
            "name": "terminal_variance",
            "mean": [float(e.mean) for e in var_rows],
            "stderr": [float(e.stderr) for e in var_rows],
            "n": int(mc.n_paths),
        },
    ]
    diagnostics = [
        {"name": "engine", "value": eng_name},
        {"name": "n_steps", "value": n_steps},
        {"name": "frame_defect_max", "value": float(cols[:, m].max())},
    ]
    return results, diagnostics, {}


def _run_gradient(cfg: ExperimentConfig, flow, threads):
    task, mc = cfg.task, cfg.mc
    fieldf = from_descriptor(flow, task.field)
    s, t = task.s, float(task.t)
    n_steps = max(1, round((t - s) / mc.step))
    methods = ("pathwise", "integrated") if task.method == "both" else (task.method,)
    results, diagnostics = [], []
    ests = {}
    for meth in methods:
        fn = bismut_pathwise if meth == "pathwise" else bismut_integrated
        est = fn(
            flow, fieldf, s, t, task.x,
            n_paths=mc.n_paths, n_steps=n_steps, seed=mc.seed, threads=threads,
        )
        ests[meth] = est
        results.append({"kind": "gradient", "name": meth, **_jsonable(est.as_dict()), "norm": est.norm})
    if len(ests) == 2:
        a, b = ests["pathwise"], ests["integrated"]
        diff = np.atleast_1d(a.coords.mean) - np.atleast_1d(b.coords.mean)
        width = np.hypot(np.atleast_1d(a.coords.stderr), np.atleast_1d(b.coords.stderr))
        z = float(np.max(np.abs(diff) / np.maximum(width, 1e-300)))
        diagnostics.append({"name": "estimator_agreement_z", "value": z})
    diagnostics.append({"name": "n_steps", "value": n_steps})
    return results, diagnostics, {}


def _run_couple(cfg: ExperimentConfig, flow, threads):
    task, mc = cfg.task, cfg.mc
    ens = simulate_coupling(
        flow, task.x, task.y, task.s, float(task.t),
        mode=task.mode, step=mc.step, n_paths=mc.n_paths, seed=mc.seed, threads=threads,
    )
    results = [
        _estimate_record("rho_terminal", montecarlo.estimate_mean(ens.rho_end)),
        _estimate_record(
            "coupled_indicator",
            montecarlo.estimate_mean((ens.t0_times <= ens.t + 1e-12).astype(float)),
        ),
    ]
    diagnostics = [
        {"name": "mode", "value": ens.mode},
        {"name": "n_steps", "value": int(ens.n_steps)},
        {"name": "delta_couple", "value": float(ens.delta_couple)},
        {"name": "regularized_fraction", "value": float(ens.reg_fraction)},
    ]
    artifacts = {}
    if ens.rho_record is not None:
        keep = min(ens.n_paths, 50)
        artifacts["rho_paths"] = {
            "times": ens.record_times.tolist(),
            "rho": ens.rho_record[:keep].tolist(),
        }
        artifacts["rho_ensemble"] = ens
    return results, diagnostics, artifacts


def _run_verify(cfg: ExperimentConfig, flow, threads):
    task, mc = cfg.task, cfg.mc
    matrix = {e.name: e for e in builtin_matrix()}
    if task.entries:
        missing = [n for n in task.entries if n not in matrix]
        if missing:
            raise ConfigInvalid(f"task.entries names not in the shipped matrix: {missing}")
        selected = [matrix[n] for n in task.entries]
    else:
        selected = list(matrix.values())
    results, diagnostics = [], []
    for entry in selected:
        seed = None if mc.seed == 0 else entry.base_seed + mc.seed
        try:
            v = entry.run(seed=seed, threads=threads)
        except GeomflowError as exc:
            results.append({
                "kind": "error",
                "entry": entry.name,
                "name": entry.op,
                "error": type(exc).__name__,
                "message": str(exc),
            })
            continue
        results.append({"kind": "verdict", "entry": entry.name, **v.as_record()})
        if v.diagnostics:
            diagnostics.append({"entry": entry.name, **_jsonable(v.diagnostics)})
    return results, diagnostics, {}


def _run_recover(cfg: ExperimentConfig, flow, threads):
    task, mc = cfg.task, cfg.mc
    fns = {
        "grad": recover_curvature_grad,
        "variance": recover_curvature_variance,
        "entropy": recover_curvature_entropy,
    }
    fn = fns[task.method]
    kwargs = dict(
        t1=task.t1, n_paths=mc.n_paths, seed=mc.seed, threads=threads,
    )
    if task.method in ("grad", "variance"):
        kwargs["p"] = task.p
    res = fn(flow, task.s, task.x, task.direction, **kwargs)
    results = [{"kind": "recovery", "name": f"recover_{task.method}", **_jsonable(res.as_dict())}]
    diagnostics = [{"name": "signal_ok", "value": bool(res.signal_ok)}]
    return results, diagnostics, {}


def _run_nonexplosion(cfg: ExperimentConfig, flow, threads):
    task = cfg.task
    spec = NonexplosionSpec(
        variant=task.variant,
        psi=_rate_expression(task.psi) if task.psi is not None else None,
        phi=_rate_expression(task.phi) if task.phi is not None else None,
        h=_rate_expression(task.h) if task.h is not None else None,
        dim=task.dim,
        r_max=task.r_max,
    )
    rep = nonexplosion_check(spec)
    results = [{"kind": "criterion", "name": "nonexplosion", **_jsonable(rep.as_record())}]
    diagnostics = [
        {"name": "double_ratio", "value": float(rep.growth.double_ratio)},
        {"name": "window_ratio", "value": float(rep.growth.window_ratio)},
    ]
    artifacts = {"growth": {"radii": rep.growth.radii.tolist(), "values": rep.growth.values.tolist()}}
    return results, diagnostics, artifacts


_RUNNERS = {
    "simulate": _run_simulate,
    "gradient": _run_gradient,
    "couple": _run_couple,
    "verify": _run_verify,
    "recover": _run_recover,
    "nonexplosion": _run_nonexplosion,
}


def run_experiment(cfg: ExperimentConfig) -> ReportBundle:
    """Validate, dispatch, and collect; MC-level failures become records."""
    flow = cfg.validate()
    threads = _threads_from_env()
    results, diagnostics, artifacts = _RUNNERS[cfg.task.name](cfg, flow, threads)
    return ReportBundle(
        experiment=cfg,
        results=results,
        diagnostics=diagnostics,
        artifacts=artifacts,
    )


# ---------------------------------------------------------------------------
# emission


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2")


def _ticks(lo: float, hi: float, count: int = 5):
    if hi <= lo:
        hi = lo + 1.0
    return [lo + (hi - lo) * i / (count - 1) for i in range(count)]


def svg_line_plot(series, title: str, xlabel: str, ylabel: str,
                  width: int = 720, height: int = 460) -> str:
    """Plain SVG polyline chart; series is a list of (xs, ys) pairs."""
    ml, mr, mt, mb = 72, 24, 44, 56
    pw, ph = width - ml - mr, height - mt - mb
    xs_all = np.concatenate([np.asarray(s[0], dtype=float) for s in series])
    ys_all = np.concatenate([np.asarray(s[1], dtype=float) for s in series])
    x0, x1 = float(xs_all.min()), float(xs_all.max())
    y0, y1 = float(ys_all.min()), float(ys_all.max())
    if x1 <= x0:
        x1 = x0 + 1.0
    if y1 <= y0:
        y1 = y0 + 1.0
    ypad = 0.05 * (y1 - y0)
    y0, y1 = y0 - ypad, y1 + ypad

    def px(x):
        return ml + pw * (x - x0) / (x1 - x0)

    def py(y):
        return mt + ph * (1.0 - (y - y0) / (y1 - y0))

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
        f'<text x="{width / 2:.1f}" y="24" text-anchor="middle" font-size="15">{title}</text>',
    ]
    out.append(
        f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="#333333"/>'
    )
    out.append(f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="#333333"/>')
    for tx in _ticks(x0, x1):
        out.append(
            f'<line x1="{px(tx):.2f}" y1="{mt + ph}" x2="{px(tx):.2f}" y2="{mt + ph + 5}" stroke="#333333"/>'
        )
        out.append(
            f'<text x="{px(tx):.2f}" y="{mt + ph + 20}" text-anchor="middle">{tx:.4g}</text>'
        )
    for ty in _ticks(y0, y1):
        out.append(
            f'<line x1="{ml - 5}" y1="{py(ty):.2f}" x2="{ml}" y2="{py(ty):.2f}" stroke="#333333"/>'
        )
        out.append(
            f'<text x="{ml - 9}" y="{py(ty):.2f}" text-anchor="end" dominant-baseline="middle">{ty:.4g}</text>'
        )
    out.append(
        f'<text x="{ml + pw / 2:.1f}" y="{height - 12}" text-anchor="middle">{xlabel}</text>'
    )
    out.append(
        f'<text x="20" y="{mt + ph / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 20 {mt + ph / 2:.1f})">{ylabel}</text>'
    )
    opacity = "1.0" if len(series) <= 3 else "0.55"
    for i, (sx, sy) in enumerate(series):
        sx = np.asarray(sx, dtype=float)
        sy = np.asarray(sy, dtype=float)
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(sx, sy))
        color = _PALETTE[i % len(_PALETTE)]
        out.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" '
            f'stroke-width="1.4" stroke-opacity="{opacity}"/>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _write(path: str, text: str, written: list) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    written.append(path)


def _csv_escape(val) -> str:
    s = repr(val) if isinstance(val, float) else str(val)
    if "," in s or '"' in s or "\n" in s:
        s = '"' + s.replace('"', '""') + '"'
    return s


def _rows_to_csv(header, rows) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_csv_escape(v) for v in row))
    return "\n".join(lines) + "\n"


def emit_report(bundle: ReportBundle, formats=None, out_dir=None, timestamp=None) -> list:
    """Write the bundle; returns the list of file paths created."""
    cfg = bundle.experiment
    if formats is None:
        formats = cfg.output.formats
    for f in formats:
        if f not in ("json", "csv", "svg"):
            raise ConfigInvalid(f"unknown report format {f!r}")
    if out_dir is None:
        out_dir = cfg.output.directory
    os.makedirs(out_dir, exist_ok=True)
    written = []

    # the exact config for replay, in parseable form
    _write(os.path.join(out_dir, "config.toml"), emit_config(cfg), written)

    if "json" in formats:
        payload = bundle.as_payload(timestamp=timestamp)
        _write(
            os.path.join(out_dir, "report.json"),
            json.dumps(payload, indent=2, sort_keys=True) + "\n",
            written,
        )

    if "csv" in formats:
        verdicts = [r for r in bundle.results if r.get("kind") == "verdict"]
        if verdicts:
            rows = [
                (
                    r["entry"], r["name"], r["paper_item"],
                    r["lhs"]["mean"], r["lhs"]["stderr"],
                    r["rhs"]["mean"], r["rhs"]["stderr"],
                    r["slack"], r["stderr"], str(bool(r["holds"])).lower(), r["seed"],
                )
                for r in verdicts
            ]
            _write(
                os.path.join(out_dir, "verdicts.csv"),
                _rows_to_csv(
                    ("entry", "op", "item", "lhs_mean", "lhs_stderr",
                     "rhs_mean", "rhs_stderr", "slack", "stderr", "holds", "seed"),
                    rows,
                ),
                written,
            )
        est_rows = []
        for r in bundle.results:
            if r.get("kind") not in ("estimate", "gradient", "recovery"):
                continue
            if r["kind"] == "estimate":
                means = r["mean"] if isinstance(r["mean"], list) else [r["mean"]]
                errs = r["stderr"] if isinstance(r["stderr"], list) else [r["stderr"]]
                for i, (mv, ev) in enumerate(zip(means, errs)):
                    label = r["name"] if len(means) == 1 else f"{r['name']}[{i}]"
                    est_rows.append((label, mv, ev, r["n"]))
            elif r["kind"] == "gradient":
                for i, (mv, ev) in enumerate(zip(r["coords"], r["stderr"])):
                    est_rows.append((f"{r['name']}[{i}]", mv, ev, r["n_paths"]))
            else:
                est_rows.append((r["name"], r["estimate"], r["stderr"], ""))
        if est_rows:
            _write(
                os.path.join(out_dir, "estimates.csv"),
                _rows_to_csv(("name", "mean", "stderr", "n"), est_rows),
                written,
            )
        growth = bundle.artifacts.get("growth")
        if growth is not None:
            rows = [
                (f"{r:.12g}", f"{v:.12g}")
                for r, v in zip(growth["radii"], growth["values"])
            ]
            _write(os.path.join(out_dir, "growth.csv"), _rows_to_csv(("R", "F"), rows), written)
        ens = bundle.artifacts.get("rho_ensemble")
        if ens is not None:
            path = os.path.join(out_dir, "rho_paths.csv")
            ens.to_csv(path, max_paths=50)
            written.append(path)

    if "svg" in formats:
        rho = bundle.artifacts.get("rho_paths")
        if rho is not None:
            times = np.asarray(rho["times"], dtype=float)
            series = [(times, np.asarray(row, dtype=float)) for row in rho["rho"][:50]]
            _write(
                os.path.join(out_dir, "rho_paths.svg"),
                svg_line_plot(series, "coupled pair distance", "t", "rho"),
                written,
            )
        growth = bundle.artifacts.get("growth")
        if growth is not None:
            series = [(np.asarray(growth["radii"]), np.asarray(growth["values"]))]
            _write(
                os.path.join(out_dir, "growth.svg"),
                svg_line_plot(series, "escape-test growth table", "R", "F(R)"),
                written,
            )
    return written
