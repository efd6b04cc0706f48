"""Experiment configuration: one versioned TOML file, strict keys.

parse_config reads and validates a file; emit_config writes a canonical
text form whose re-parse compares equal, so configs can be echoed into
reports and replayed bit-for-bit. Unknown keys anywhere are rejected:
a stale or misspelled file fails loudly instead of silently drifting.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field as dc_field, replace
from typing import Optional

import tomli

from .errors import ConfigInvalid, HorizonExceeded
from .flows import (
    MetricFlow,
    ScaleSchedule,
    euclidean_flow,
    hyperbolic_flow,
    linear_radial_drift,
    sphere_flow,
    sphere_ricci_flow,
    torus_flow,
)

SCHEMA_VERSION = 1

TASKS = ("simulate", "gradient", "couple", "verify", "recover", "nonexplosion")
FORMATS = ("json", "csv", "svg")

_FLOW_KINDS = ("euclidean", "sphere", "hyperbolic", "torus", "sphere_ricci")


def _float_tuple(val, where):
    try:
        return tuple(float(v) for v in val)
    except (TypeError, ValueError):
        raise ConfigInvalid(f"{where} must be a list of numbers") from None


@dataclass(frozen=True)
class DriftSpec:
    """Named drift family; 'none' or an inward radial pull."""

    form: str = "none"
    lam: float = 0.0

    def __post_init__(self):
        if self.form not in ("none", "radial"):
            raise ConfigInvalid(f"flow.drift.form must be 'none' or 'radial', got {self.form!r}")

    def build(self):
        if self.form == "none":
            return None
        return linear_radial_drift(self.lam)


@dataclass(frozen=True)
class FlowSpec:
    kind: str = "euclidean"
    dim: int = 2
    scale: Optional[ScaleSchedule] = None
    axis_scales: tuple = ()
    c0: float = 1.0
    drift: DriftSpec = dc_field(default_factory=DriftSpec)

    def __post_init__(self):
        if self.kind not in _FLOW_KINDS:
            raise ConfigInvalid(f"flow.kind must be one of {_FLOW_KINDS}, got {self.kind!r}")
        if self.dim < 1:
            raise ConfigInvalid("flow.dim must be at least 1")
        object.__setattr__(self, "axis_scales", tuple(self.axis_scales))
        if self.axis_scales and self.kind != "torus":
            raise ConfigInvalid("flow.axis_scales only applies to the torus kind")
        if self.kind == "torus" and self.axis_scales and len(self.axis_scales) != self.dim:
            raise ConfigInvalid("flow.axis_scales needs one schedule per axis")

    def build(self) -> MetricFlow:
        drift = self.drift.build()
        if self.kind == "euclidean":
            return euclidean_flow(self.dim, scale=self.scale, drift=drift)
        if self.kind == "sphere":
            return sphere_flow(self.dim, scale=self.scale, drift=drift)
        if self.kind == "hyperbolic":
            return hyperbolic_flow(self.dim, scale=self.scale, drift=drift)
        if self.kind == "torus":
            axis = list(self.axis_scales) if self.axis_scales else None
            return torus_flow(self.dim, axis_scales=axis, drift=drift)
        if self.drift.form != "none" or self.scale is not None:
            raise ConfigInvalid("sphere_ricci fixes its own scale and carries no drift")
        return sphere_ricci_flow(self.dim, c0=self.c0)


@dataclass(frozen=True)
class TaskSpec:
    name: str = "simulate"
    field: Optional[dict] = None
    x: Optional[tuple] = None
    y: Optional[tuple] = None
    direction: Optional[tuple] = None
    s: float = 0.0
    t: Optional[float] = None
    times: tuple = ()
    p: float = 2.0
    q1: Optional[float] = None
    q2: Optional[float] = None
    r: Optional[float] = None
    K: Optional[float] = None
    mode: str = "parallel"
    method: str = "pathwise"
    entries: tuple = ()
    variant: str = "direct"
    psi: Optional[str] = None
    phi: Optional[str] = None
    h: Optional[str] = None
    dim: int = 2
    r_max: float = 10.0
    t1: float = 0.02

    def __post_init__(self):
        if self.name not in TASKS:
            raise ConfigInvalid(f"task.name must be one of {TASKS}, got {self.name!r}")
        for key in ("x", "y", "direction"):
            val = getattr(self, key)
            if val is not None:
                object.__setattr__(self, key, _float_tuple(val, f"task.{key}"))
        object.__setattr__(self, "times", _float_tuple(self.times, "task.times"))
        object.__setattr__(self, "entries", tuple(str(e) for e in self.entries))


@dataclass(frozen=True)
class MCSpec:
    n_paths: int = 2000
    step: float = 2e-3
    seed: int = 0
    n_outer: int = 2000
    n_inner: int = 500
    u_nodes: int = 8

    def __post_init__(self):
        if self.n_paths < 100:
            raise ConfigInvalid("mc.n_paths must be at least 100")
        if self.step <= 0.0:
            raise ConfigInvalid("mc.step must be positive")
        if self.n_outer < 4 or self.n_inner < 4:
            raise ConfigInvalid("mc.n_outer and mc.n_inner must be at least 4")
        if self.u_nodes < 3:
            raise ConfigInvalid("mc.u_nodes must be at least 3")


@dataclass(frozen=True)
class OutputSpec:
    directory: str = "."
    formats: tuple = ("json",)

    def __post_init__(self):
        object.__setattr__(self, "formats", tuple(str(f) for f in self.formats))
        for f in self.formats:
            if f not in FORMATS:
                raise ConfigInvalid(f"output.formats entries must be from {FORMATS}, got {f!r}")
        if not self.formats:
            raise ConfigInvalid("output.formats must name at least one format")


@dataclass(frozen=True)
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    flow: FlowSpec = dc_field(default_factory=FlowSpec)
    task: TaskSpec = dc_field(default_factory=TaskSpec)
    mc: MCSpec = dc_field(default_factory=MCSpec)
    output: OutputSpec = dc_field(default_factory=OutputSpec)

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigInvalid(
                f"schema_version {self.schema_version} is not supported (expected {SCHEMA_VERSION})"
            )

    def validate(self) -> MetricFlow:
        """Cross-field checks; returns the built flow for reuse."""
        flow = self.flow.build()
        horizon_times = [t for t in self.task.times]
        if self.task.t is not None:
            horizon_times.append(self.task.t)
        for t in horizon_times:
            if self.task.s is not None and t <= self.task.s:
                raise ConfigInvalid(f"task time {t} must exceed task.s = {self.task.s}")
            try:
                flow.check_time(t)
            except HorizonExceeded as exc:
                raise ConfigInvalid(f"task time {t} is outside the flow horizon: {exc}") from None
        task = self.task
        needs_x = task.name in ("simulate", "gradient", "couple", "recover")
        if needs_x and task.x is None:
            raise ConfigInvalid(f"task.x is required for the {task.name} task")
        if task.name in ("simulate", "gradient", "couple") and task.t is None:
            raise ConfigInvalid(f"task.t is required for the {task.name} task")
        if task.name == "couple" and task.y is None:
            raise ConfigInvalid("task.y is required for the couple task")
        if task.name == "gradient" and task.field is None:
            raise ConfigInvalid("task.field is required for the gradient task")
        if task.name == "gradient" and task.method not in ("pathwise", "integrated", "both"):
            raise ConfigInvalid("task.method for gradient must be pathwise, integrated or both")
        if task.name == "recover" and task.direction is None:
            raise ConfigInvalid("task.direction is required for the recover task")
        if task.name == "recover" and task.method not in ("grad", "variance", "entropy"):
            raise ConfigInvalid("task.method for recover must be grad, variance or entropy")
        if task.name == "couple" and task.mode not in ("parallel", "mirror"):
            raise ConfigInvalid("task.mode must be parallel or mirror")
        if task.name == "nonexplosion":
            if task.variant not in ("direct", "integrated", "comparison"):
                raise ConfigInvalid("task.variant must be direct, integrated or comparison")
            if task.variant == "direct" and task.psi is None:
                raise ConfigInvalid("task.psi is required for the direct variant")
            if task.variant == "integrated" and task.phi is None:
                raise ConfigInvalid("task.phi is required for the integrated variant")
            if task.variant == "comparison" and (task.psi is None or task.phi is None):
                raise ConfigInvalid("task.psi and task.phi are required for the comparison variant")
        return flow


# ---------------------------------------------------------------------------
# parsing


def _take(table: dict, allowed: dict, section: str) -> dict:
    """Pull known keys out of a TOML table, rejecting everything else."""
    out = {}
    for key in table:
        if key not in allowed:
            raise ConfigInvalid(f"unknown key {key!r} in [{section}]")
    for key, conv in allowed.items():
        if key in table:
            try:
                out[key] = conv(table[key]) if conv is not None else table[key]
            except (TypeError, ValueError):
                raise ConfigInvalid(f"bad value for {section}.{key}") from None
    return out


def _as_scale(val, where) -> ScaleSchedule:
    if not isinstance(val, dict):
        raise ConfigInvalid(f"{where} must be a table with form/c0/rate")
    kw = _take(val, {"form": str, "c0": float, "rate": float}, where)
    return ScaleSchedule(**kw)


def _as_drift(val) -> DriftSpec:
    if not isinstance(val, dict):
        raise ConfigInvalid("flow.drift must be a table with form/lam")
    kw = _take(val, {"form": str, "lam": float}, "flow.drift")
    return DriftSpec(**kw)


def _parse_flow(table: dict) -> FlowSpec:
    allowed = {
        "kind": str,
        "dim": int,
        "scale": None,
        "axis_scales": None,
        "c0": float,
        "drift": None,
    }
    kw = _take(table, allowed, "flow")
    if "scale" in kw:
        kw["scale"] = _as_scale(kw["scale"], "flow.scale")
    if "axis_scales" in kw:
        raw = kw["axis_scales"]
        if not isinstance(raw, list):
            raise ConfigInvalid("flow.axis_scales must be an array of tables")
        kw["axis_scales"] = tuple(
            _as_scale(v, f"flow.axis_scales[{i}]") for i, v in enumerate(raw)
        )
    if "drift" in kw:
        kw["drift"] = _as_drift(kw["drift"])
    return FlowSpec(**kw)


def _parse_task(table: dict) -> TaskSpec:
    allowed = {
        "name": str,
        "field": None,
        "x": None,
        "y": None,
        "direction": None,
        "s": float,
        "t": float,
        "times": None,
        "p": float,
        "q1": float,
        "q2": float,
        "r": float,
        "K": float,
        "mode": str,
        "method": str,
        "entries": None,
        "variant": str,
        "psi": str,
        "phi": str,
        "h": str,
        "dim": int,
        "r_max": float,
        "t1": float,
    }
    kw = _take(table, allowed, "task")
    if "field" in kw and not isinstance(kw["field"], dict):
        raise ConfigInvalid("task.field must be a table (a field descriptor)")
    return TaskSpec(**kw)


def parse_config(src) -> ExperimentConfig:
    """Read a config from a path, a TOML string, or a binary file object.

    A string without newlines is treated as a path; multi-line strings are
    parsed as TOML text directly.
    """
    try:
        if hasattr(src, "read"):
            data = tomli.load(src)
        elif isinstance(src, os.PathLike) or (isinstance(src, str) and "\n" not in src):
            if not os.path.exists(src):
                raise ConfigInvalid(f"config file not found: {src}")
            with open(src, "rb") as fh:
                data = tomli.load(fh)
        elif isinstance(src, str):
            data = tomli.loads(src)
        else:
            raise ConfigInvalid("config source must be a path, TOML text, or a binary file")
    except tomli.TOMLDecodeError as exc:
        raise ConfigInvalid(f"config is not valid TOML: {exc}") from None

    top_allowed = {"schema_version", "flow", "task", "mc", "output"}
    for key in data:
        if key not in top_allowed:
            raise ConfigInvalid(f"unknown top-level key {key!r}")
    if "schema_version" not in data:
        raise ConfigInvalid("schema_version is required at the top level")

    flow = _parse_flow(data.get("flow", {}))
    task = _parse_task(data.get("task", {}))
    mc_kw = _take(
        data.get("mc", {}),
        {"n_paths": int, "step": float, "seed": int, "n_outer": int, "n_inner": int, "u_nodes": int},
        "mc",
    )
    out_kw = _take(data.get("output", {}), {"directory": str, "formats": None}, "output")
    return ExperimentConfig(
        schema_version=int(data["schema_version"]),
        flow=flow,
        task=task,
        mc=MCSpec(**mc_kw),
        output=OutputSpec(**out_kw),
    )


# ---------------------------------------------------------------------------
# emission


def _fmt_value(val) -> str:
    if isinstance(val, bool):
        return "true" if val else "false"
    if isinstance(val, int):
        return str(val)
    if isinstance(val, float):
        return repr(val)
    if isinstance(val, str):
        body = val.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{body}"'
    if isinstance(val, (list, tuple)):
        return "[" + ", ".join(_fmt_value(v) for v in val) + "]"
    if isinstance(val, dict):
        inner = ", ".join(f"{k} = {_fmt_value(v)}" for k, v in val.items())
        return "{ " + inner + " }"
    if isinstance(val, ScaleSchedule):
        return _fmt_value({"form": val.form, "c0": val.c0, "rate": val.rate})
    raise ConfigInvalid(f"cannot serialize config value of type {type(val).__name__}")


def _emit_section(name: str, pairs) -> list:
    lines = [f"[{name}]"]
    for key, val in pairs:
        if val is None:
            continue
        lines.append(f"{key} = {_fmt_value(val)}")
    lines.append("")
    return lines


def emit_config(cfg: ExperimentConfig) -> str:
    """Canonical TOML text; parse_config(emit_config(cfg)) == cfg."""
    lines = [f"schema_version = {cfg.schema_version}", ""]

    flow = cfg.flow
    flow_pairs = [("kind", flow.kind), ("dim", flow.dim)]
    if flow.scale is not None:
        flow_pairs.append(("scale", flow.scale))
    if flow.axis_scales:
        flow_pairs.append(("axis_scales", list(flow.axis_scales)))
    if flow.kind == "sphere_ricci":
        flow_pairs.append(("c0", flow.c0))
    if flow.drift.form != "none":
        flow_pairs.append(("drift", {"form": flow.drift.form, "lam": flow.drift.lam}))
    lines += _emit_section("flow", flow_pairs)

    task = cfg.task
    defaults = TaskSpec(name=task.name)
    task_pairs = [("name", task.name)]
    for key in (
        "field", "x", "y", "direction", "s", "t", "times", "p", "q1", "q2", "r",
        "K", "mode", "method", "entries", "variant", "psi", "phi", "h", "dim",
        "r_max", "t1",
    ):
        val = getattr(task, key)
        if val is None or val == getattr(defaults, key):
            continue
        task_pairs.append((key, list(val) if isinstance(val, tuple) else val))
    lines += _emit_section("task", task_pairs)

    mc = cfg.mc
    lines += _emit_section("mc", [
        ("n_paths", mc.n_paths), ("step", mc.step), ("seed", mc.seed),
        ("n_outer", mc.n_outer), ("n_inner", mc.n_inner), ("u_nodes", mc.u_nodes),
    ])
    out = cfg.output
    lines += _emit_section("output", [
        ("directory", out.directory), ("formats", list(out.formats)),
    ])
    return "\n".join(lines)


def write_config(cfg: ExperimentConfig, dest) -> None:
    text = emit_config(cfg)
    if hasattr(dest, "write"):
        dest.write(text)
        return
    with open(dest, "w", encoding="utf-8") as fh:
        fh.write(text)


def with_overrides(cfg: ExperimentConfig, seed=None, out_dir=None, formats=None) -> ExperimentConfig:
    """CLI-style overrides applied on top of a parsed config."""
    if seed is not None:
        cfg = replace(cfg, mc=replace(cfg.mc, seed=int(seed)))
    if out_dir is not None:
        cfg = replace(cfg, output=replace(cfg.output, directory=str(out_dir)))
    if formats is not None:
        cfg = replace(cfg, output=replace(cfg.output, formats=tuple(formats)))
    return cfg
