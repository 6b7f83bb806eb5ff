"""Exception types shared across the package.

The three base classes map onto CLI exit codes: ConfigError -> 1,
DataError -> 2, NumericalError -> 3.
"""


class PoseSmoothError(Exception):
    """Base class for all package errors."""


class ConfigError(PoseSmoothError):
    """Invalid or inconsistent run configuration."""


class DataError(PoseSmoothError):
    """Malformed, missing, or insufficient input data."""


class NumericalError(PoseSmoothError):
    """Numerical routine failed or left its domain of validity."""


# --- camera geometry

class NonPositiveDepth(NumericalError):
    """Point is on or behind the camera plane (depth <= epsilon)."""


class NoConvergence(NumericalError):
    """Fixed-point undistortion failed to converge; point is likely
    outside the distortion model's invertible region."""


class DegenerateGeometry(NumericalError):
    """Triangulation system is rank-deficient (e.g. parallel rays)."""


class InsufficientViews(DataError):
    """Fewer than two usable views for a multi-view operation."""


# --- ensemble statistics

class EmptyEnsemble(DataError):
    """A (frame, coordinate) cell has zero valid ensemble members."""


# --- state-space smoothing

class NumericalFailure(NumericalError):
    """Innovation covariance not invertible even after jitter."""


class JacobianFailure(NumericalError):
    """Observation-map Jacobian contains non-finite entries."""


class InsufficientLowVarianceFrames(DataError):
    """Too few frames passed the low-variance quantile filter to fit PCA."""


# --- variance inflation

class RankDeficient(NumericalError):
    """Latent posterior is underdetermined: too few effective views."""


# --- pseudo-label selection

class TooFewFrames(DataError):
    """Fewer candidate frames than requested clusters."""


class CollisionError(DataError):
    """Duplicate (video, frame) between pseudo-labels and ground truth."""


# --- evaluation

class ShapeMismatch(DataError):
    """Prediction / truth / e.s.d. arrays do not align."""
