"""Exception hierarchy shared across the package.

Every error raised on purpose by geomflow derives from :class:`GeomflowError`
so callers (in particular the CLI) can distinguish configuration and numeric
failures from genuine bugs.
"""

from __future__ import annotations


class GeomflowError(Exception):
    """Base class for all geomflow errors."""


class ConfigInvalid(GeomflowError):
    """An experiment configuration failed validation."""


class HorizonExceeded(GeomflowError):
    """A time argument lies beyond the flow's degeneration horizon."""


class OffManifold(GeomflowError):
    """A point (or tangent vector) violates the manifold constraint."""


class CutLocusAmbiguity(GeomflowError):
    """The minimal geodesic between two points is not unique."""


class FrameNotOrthonormal(GeomflowError):
    """A frame failed the orthonormality tolerance check."""


class DegenerateFrame(GeomflowError):
    """Frame columns are numerically dependent and cannot be orthonormalized."""


class NumericalBlowup(GeomflowError):
    """A simulated quantity left the trusted numeric range."""


class MissingGradient(GeomflowError):
    """An operation required an analytic gradient the field does not provide."""


class DegenerateInterval(GeomflowError):
    """A time interval has non-positive length."""


class RadiusTooLarge(GeomflowError):
    """A localization radius exceeds what the geometry supports."""


class NestedBudgetExceeded(GeomflowError):
    """A nested Monte Carlo run would exceed its sample budget."""


class SignalBelowNoise(GeomflowError):
    """A Monte Carlo estimate is dominated by its own confidence interval.

    Carries the offending estimate in ``args[1]`` when available.
    """


class InsufficientSamples(GeomflowError):
    """Too few samples to produce an estimate with a standard error."""


class NonPositiveField(GeomflowError):
    """A field value violated a strict positivity requirement."""


class FieldBelowOne(GeomflowError):
    """A field value violated an ``f >= 1`` requirement."""


class NoSolution(GeomflowError):
    """A scalar equation has no admissible solution in the search range."""


class NoMinimizer(GeomflowError):
    """No minimizing geodesic representative could be determined."""


class StencilOutOfDomain(GeomflowError):
    """A finite-difference stencil left the chart of validity."""
