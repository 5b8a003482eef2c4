"""Multitask neural networks built from disjoint per-task subnetworks.

Each shared layer holds one weight channel per routed task; binary masks
select which positions a task may touch, a one-shot gradient ranking chooses
those positions, and an availability ledger guarantees no position is ever
granted twice. Training one task group leaves every other task's weights
bit-identical, so earlier tasks cannot be forgotten.
"""

from .errors import (
    BoundsError,
    CapacityError,
    ChecksumError,
    ConfigError,
    DimensionError,
    DisjointnessError,
    FormatError,
    InputError,
    MasknetError,
    ShapeError,
    StateError,
    TaskError,
    VersionError,
    VocabularyError,
)

__version__ = "0.1.0"

__all__ = [
    "BoundsError",
    "CapacityError",
    "ChecksumError",
    "ConfigError",
    "DimensionError",
    "DisjointnessError",
    "FormatError",
    "InputError",
    "MasknetError",
    "ShapeError",
    "StateError",
    "TaskError",
    "VersionError",
    "VocabularyError",
    "__version__",
]
