"""Exception hierarchy.

Every error raised on purpose by the package derives from
:class:`ChromaFocusError` so callers (the CLI in particular) can map them to
exit codes without catching unrelated bugs.
"""


class ChromaFocusError(Exception):
    """Base class for all package errors."""


class ConfigError(ChromaFocusError, ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


# dispersion
class OutOfRange(ChromaFocusError, ValueError):
    pass


class DegenerateLens(ChromaFocusError, ValueError):
    pass


class AtFocalPlane(ChromaFocusError, ValueError):
    pass


# tracer
class OutOfSphere(ChromaFocusError, ValueError):
    pass


class TotalInternalReflection(ChromaFocusError):
    pass


# retina
class WavelengthNotInStack(ChromaFocusError, KeyError):
    pass


class InsufficientDistances(ChromaFocusError, ValueError):
    pass


# events
class OutOfSweep(ChromaFocusError, ValueError):
    pass


class MappingGap(ChromaFocusError, ValueError):
    pass


# analysis
class NoPeak(ChromaFocusError, ValueError):
    pass


class AmbiguousPeak(ChromaFocusError, ValueError):
    pass


class OutOfCurveRange(ChromaFocusError, ValueError):
    pass


class ZeroSlope(ChromaFocusError, ValueError):
    pass


class NonMonotoneFocus(ChromaFocusError, ValueError):
    """Best-focus positions do not move monotonically with wavelength."""


class DivisionByZeroWidth(ChromaFocusError, ZeroDivisionError):
    pass


class MissingReference(ChromaFocusError, KeyError):
    pass


class NonPositiveQE(ChromaFocusError, ValueError):
    pass


class ParseError(ChromaFocusError, ValueError):
    """Malformed input file; message carries the line number or byte offset."""


class MissingFocalField(ChromaFocusError, ValueError):
    pass


# segment
class WindowTooLarge(ChromaFocusError, ValueError):
    pass


class DegenerateHistogram(ChromaFocusError, ValueError):
    pass


class NoCalibration(ChromaFocusError, ValueError):
    pass


class UpstreamMissing(ChromaFocusError, FileNotFoundError):
    """A command needs an artifact an earlier command should have written."""


class EmptyPlaneWarning(UserWarning):
    """A focal plane held no events and was skipped."""
