"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor extents are incompatible with the requested operation."""


class ContractError(ValueError):
    """A precondition on the inputs of an operation does not hold."""


class TapeError(RuntimeError):
    """Misuse of the differentiation graph (e.g. a second backward pass)."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class DataError(ValueError):
    """A dataset does not satisfy the needs of an operation."""


class ArchiveError(ValueError):
    """Base class for named-tensor archive failures."""


class CorruptArchiveError(ArchiveError):
    pass


class MissingEntryError(ArchiveError):
    pass


class UnknownEntryError(ArchiveError):
    pass


class ArchiveShapeError(ArchiveError):
    pass


class VersionError(ArchiveError):
    """Archive or checkpoint was written for a different format or config."""


class BinvoxError(ValueError):
    pass


class BadMagicError(BinvoxError):
    pass


class DimensionError(BinvoxError):
    pass


class TruncatedStreamError(BinvoxError):
    pass


class ImageFormatError(ValueError):
    pass


class UnsupportedFormatError(ImageFormatError):
    pass


class CorruptHeaderError(ImageFormatError):
    pass


class BoundsError(ValueError):
    pass
