"""
Error types for the qsr package.

Every failure the library can report is a QsrError carrying a human readable
``detail`` and the process ``exit_code`` the CLI should use.
"""


class QsrError(Exception):
    """Base class for all qsr failures"""

    exit_code = 1

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail

    def __str__(self) -> str:
        return self.detail


# Images

class ImageReadError(QsrError, OSError):
    """File missing or unreadable"""


class UnsupportedFormatError(QsrError, ValueError):
    """Not a PNG / PGM / PPM 8-bit raster"""


class CorruptImageError(QsrError, ValueError):
    """Recognised format, broken payload"""


class ImageWriteError(QsrError, OSError):
    """Destination not writable"""


class ChannelMismatchError(QsrError, ValueError):
    pass


class DimensionMismatchError(QsrError, ValueError):
    pass


class InvalidDimensionError(QsrError, ValueError):
    pass


class NonFiniteDataError(QsrError, ValueError):
    """NaN or infinite intensities"""


# Artifacts

class ArtifactIOError(QsrError, OSError):
    """Dictionary, replay or report file cannot be read or written"""


# Patches

class PatchGeometryError(QsrError, ValueError):
    pass


class PatchBoundsError(QsrError, IndexError):
    pass


class FilterBankError(QsrError, ValueError):
    pass


# Dictionary

class InsufficientPatchesError(QsrError, ValueError):
    pass


class DegenerateDataError(QsrError, ValueError):
    pass


class DictionaryFormatError(QsrError, ValueError):
    """Base for dictionary file decoding failures"""


class MagicMismatchError(DictionaryFormatError):
    pass


class TruncatedFileError(DictionaryFormatError):
    pass


class VersionMismatchError(DictionaryFormatError):
    pass


class ChecksumMismatchError(DictionaryFormatError):
    pass


# QUBO and solvers

class QuboError(QsrError, ValueError):
    pass


class ProblemTooLargeError(QsrError, ValueError):
    pass


class NotRecordedError(QsrError, KeyError):
    pass


class HashCollisionError(QsrError):
    pass


class SolverInputError(QsrError, ValueError):
    pass


# Pipelines and experiments

class ScaleMismatchError(QsrError, ValueError):
    pass


class CoverageError(QsrError, ValueError):
    pass


class EmptyInputError(QsrError, ValueError):
    pass


class InvalidWeightsError(QsrError, ValueError):
    """Occurrence counts below one or a negative inverse temperature"""


class ZeroVarianceError(QsrError, ValueError):
    pass


class InvalidGridError(QsrError, ValueError):
    exit_code = 2
