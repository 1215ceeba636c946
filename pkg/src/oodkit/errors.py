"""Exception hierarchy shared by all modules.

User-facing tools map ConfigError/DataError/FormatError to "your input is
wrong" (CLI exit code 2, HTTP 400) and everything else to internal failures.
"""


class OodkitError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(OodkitError):
    """A run configuration is malformed or internally inconsistent."""


class FormatError(OodkitError):
    """A tensor file or dataset manifest violates the on-disk format."""


class DataError(OodkitError):
    """Inputs are structurally valid but unusable (shape/NaN/reference mismatch)."""


class DegenerateBoxError(DataError):
    """A box maps to zero or negative area on the feature map."""


class DegenerateMapError(DataError):
    """A map has too little value spread to threshold."""


class InsufficientSamplesError(DataError):
    """Too few points for the requested clustering regime."""


class AllNoiseError(DataError):
    """Density clustering labelled every point as noise."""


class UndefinedMetricError(DataError):
    """A quality metric is undefined for this partition (e.g. one cluster)."""


class ZeroVectorError(DataError):
    """Cosine distance against a zero-norm vector."""


class TripletError(DataError):
    """Triplet mining is impossible (fewer than two usable classes)."""


class DivergenceError(OodkitError):
    """Training produced a non-finite loss."""


class FitError(OodkitError):
    """Centroid-bank fitting could not produce a usable bank."""
