"""Exception types shared across the package."""


class SotlabError(Exception):
    """Base class for all package errors."""


class EmptyInput(SotlabError):
    """A constructor received an empty collection."""


class GridTooNarrow(SotlabError):
    """Grid does not cover the required number of standard deviations."""


class DimensionError(SotlabError):
    """Operation restricted to a different spatial dimension."""


class SizeExceeded(SotlabError):
    """Problem size above the exact-solver limit."""


class TimeOrder(SotlabError):
    """Transition density evaluated with s >= t."""


class NoInvariant(SotlabError):
    """Kernel has no invariant probability density (Brownian motion)."""


class FitFailed(SotlabError):
    """No constant on the search ladder certifies the inequality."""


class FitUnstable(SotlabError):
    """Slope fit below the r^2 >= 0.95 reliability threshold."""


class ShapeMismatch(SotlabError):
    """Entropy operands do not share a support layout."""


class NotConverged(SotlabError):
    """Iteration budget exhausted before reaching tolerance."""


class EntropyInfinite(SotlabError):
    """A bound needs S(Q) but Q has no density (or S(Q) diverges)."""


class GridNotRefined(SotlabError):
    """Bridge simulation requires a geometric-tail time grid."""


class ConfigInvalid(SotlabError):
    """Experiment configuration failed schema or semantic validation."""


class NumericalFailure(SotlabError):
    """A solver reported failure at runtime."""


class KernelUnderflow(SotlabError):
    """Reserved: reference matrices are assembled in log space and cannot
    underflow, so this is never raised."""
