"""Exception types shared across the package."""


class KitroError(Exception):
    """Base class for all domain errors raised by this package."""


class NonProjectableError(KitroError):
    """A 3D point lies at or behind the camera plane and cannot be projected."""


class DegenerateConfigurationError(KitroError):
    """Input geometry is rank-deficient or collapsed (no unique solution)."""


class AmbiguousAxisError(KitroError):
    """A rotation between antiparallel directions has no unique axis."""


class NumericalDegradationError(KitroError):
    """An updated rotation matrix drifted too far from orthonormality."""
