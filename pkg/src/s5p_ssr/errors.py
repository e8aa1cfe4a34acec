"""Exception types shared across the package."""


class SpecError(ValueError):
    """Invalid sensor or band metadata (non-positive SNR, sigma, ...)."""


class ShapeError(ValueError):
    """Array shape violates an operation's contract."""


class SpaceError(ValueError):
    """A cube is in the wrong space (raw vs normalized) for the operation."""


class MisuseError(RuntimeError):
    """A reproducibility guard was violated (e.g. stats from non-train data)."""


class IngestionError(RuntimeError):
    """A granule file is missing the expected group or variable."""


class CacheMismatchError(RuntimeError):
    """A frozen dataset cache no longer matches its recorded hash."""


class ConfigError(ValueError):
    """A run configuration failed schema validation."""
