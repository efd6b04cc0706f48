"""Engine backend selection.

The compiled extension covers the hot path loops for the builtin flow
kinds and builtin drifts. Anything it cannot express (custom drift
callables) routes to the pure numpy engine. GEOMFLOW_BACKEND=auto|compiled|
python overrides the choice; the active name is recorded in reports so a
run can be reproduced bit-for-bit on another install.
"""

from __future__ import annotations

import os

from . import _engine_py
from .errors import ConfigInvalid
from .flows import MetricFlow

try:
    from . import _engine_c

    _HAVE_COMPILED = True
except ImportError:
    _engine_c = None
    _HAVE_COMPILED = False


def compiled_available() -> bool:
    return _HAVE_COMPILED


def supports_compiled(flow: MetricFlow) -> bool:
    """The compiled kernels handle builtin drifts only."""
    return flow.drift.kind != "custom"


def engine_for(flow: MetricFlow, override: str | None = None):
    """Pick the engine module for a flow. Returns (module, name)."""
    mode = override if override is not None else os.environ.get("GEOMFLOW_BACKEND", "auto")
    if mode not in ("auto", "compiled", "python"):
        raise ConfigInvalid(f"unknown backend {mode!r} (use auto, compiled or python)")
    if mode == "python":
        return _engine_py, "python"
    eligible = supports_compiled(flow)
    if mode == "compiled":
        if not _HAVE_COMPILED:
            raise ConfigInvalid("compiled backend requested but the extension is not built")
        if not eligible:
            raise ConfigInvalid("compiled backend does not support custom drift callables")
        return _engine_c, "compiled"
    if _HAVE_COMPILED and eligible:
        return _engine_c, "compiled"
    return _engine_py, "python"
