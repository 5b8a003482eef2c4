"""Exception types shared across the library."""


class MasknetError(Exception):
    """Base class for all library errors."""


class DimensionError(MasknetError):
    """Operand shapes do not conform."""


class ShapeError(MasknetError):
    """A shape is invalid for the requested operation."""


class BoundsError(MasknetError):
    """An index or count is outside the permitted range."""


class VocabularyError(MasknetError):
    """A token id falls outside the vocabulary."""


class TaskError(MasknetError):
    """Unknown task id or task not routed through a layer."""


class StateError(MasknetError):
    """Operation invoked in an invalid order (e.g. backward before forward)."""


class CapacityError(MasknetError):
    """Not enough free weights remain to satisfy a selection budget."""


class InputError(MasknetError):
    """Empty or otherwise unusable input data."""


class DisjointnessError(MasknetError):
    """A mask overlaps weights already owned by another task."""


class FormatError(MasknetError):
    """A serialized artifact is malformed."""


class ChecksumError(FormatError):
    """Stored checksum does not match file contents."""


class VersionError(FormatError):
    """Unsupported serialization format version."""


class ConfigError(MasknetError):
    """Invalid experiment configuration.

    ``field`` carries the dotted path of the offending entry so the CLI can
    point at it.
    """

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
