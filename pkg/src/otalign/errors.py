"""Exception types shared across the package."""


class OtAlignError(Exception):
    """Base class for every package-specific failure."""


class InvalidArgumentError(OtAlignError):
    """An operation received arguments that violate its contract."""


class InfeasibleMarginalsError(OtAlignError):
    """Source and target histograms do not carry matching total mass."""


class NumericInstabilityError(OtAlignError):
    """A solver or training step produced non-finite intermediates."""


class FileFormatError(OtAlignError):
    """A file does not conform to its declared on-disk layout."""


class CorruptFileError(FileFormatError):
    """A payload ends before the length promised by its header."""


class CheckpointFormatError(FileFormatError):
    """A checkpoint file carries a missing or unknown format tag."""


class DanglingReferenceError(OtAlignError):
    """A manifest record points at a feature file that does not exist."""
