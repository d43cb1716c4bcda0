"""Exception types shared across the package."""

from __future__ import annotations


class GravpanelError(Exception):
    """Base class for all domain errors raised by this package."""


class DataError(GravpanelError):
    """Malformed input data (bad values, ragged rows, missing columns)."""


class DuplicateKeyError(DataError):
    """Two observations share the same (exporter, importer, period) key."""

    def __init__(self, exporter, importer, period):
        self.key = (exporter, importer, period)
        super().__init__(
            f"duplicate observation key (exporter={exporter!r}, "
            f"importer={importer!r}, period={period!r})"
        )


class EmptyPanelError(GravpanelError):
    """A panel with zero observations was produced or requested."""


class UninformativePanelError(GravpanelError):
    """Pruning removed every observation; nothing identifies the slopes."""


class EstimationError(GravpanelError):
    """Base class for estimator failures."""


class IdentificationError(EstimationError):
    """A covariate is absorbed by the fixed effects or the Gram matrix is singular."""


class NonConvergenceError(EstimationError):
    """Outer iteration cap exhausted before the first-order conditions were met."""

    def __init__(self, message, residuals=None, result=None):
        super().__init__(message)
        self.residuals = residuals
        self.result = result


class ConcentrationError(EstimationError):
    """Fixed-effect concentration sweeps exhausted their iteration cap."""

    def __init__(self, message, last_delta=None):
        super().__init__(message)
        self.last_delta = last_delta


class SeparationError(EstimationError):
    """The linear-predictor clamp was still active at convergence.

    This usually means the panel contains unpruned zero cells driving some
    fixed effect towards an infinite estimate.
    """


class SubfitError(GravpanelError):
    """A component fit of a correction (full panel or one half) failed."""

    def __init__(self, part, cause):
        self.part = part
        self.cause = cause
        super().__init__(f"subfit {part!r} failed: {cause}")


class DuplicateCorrectionError(GravpanelError):
    """A correction name was registered twice."""


class UnknownCorrectionError(GravpanelError):
    """A correction or estimator label is not registered."""
