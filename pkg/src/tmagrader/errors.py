"""Exception types raised across the pipeline."""


class TmagraderError(Exception):
    """Base class for all pipeline errors."""


class ManifestError(TmagraderError):
    """Malformed or inconsistent dataset manifest."""


class LoadError(TmagraderError):
    """Raster file missing, unreadable, or violating the format contract."""


class MappingError(TmagraderError):
    """Raw mask value without an entry in the class mapping."""


class GeometryError(TmagraderError):
    """Size or geometry-record mismatch."""


class StatsError(TmagraderError):
    """Degenerate cohort statistics (zero spread, empty cohort)."""


class WeightsFormatError(TmagraderError):
    """Weights file corrupt, truncated, or shape-incompatible."""


class ConfigError(TmagraderError):
    """Invalid or unknown configuration key/value."""
