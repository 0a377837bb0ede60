"""Dataset I/O, stream derivation, augmentation and synthetic data."""

from .augment import AugmentationConfig, augment
from .container import (
    DatasetError,
    DimensionMismatchError,
    MalformedHeaderError,
    MissingFileError,
    SequenceRecord,
    TruncatedFileError,
    UnknownFormatError,
    check_dataset,
    read_dataset,
    read_sequence,
    write_dataset,
    write_sequence,
)
from .streams import (
    STREAMS,
    derive_bone_stream,
    derive_motion_stream,
    derive_stream,
    interpolate_frames,
)
from .synthetic import generate_synthetic_dataset

__all__ = [
    "AugmentationConfig", "augment", "DatasetError", "DimensionMismatchError",
    "MalformedHeaderError", "MissingFileError", "SequenceRecord", "TruncatedFileError",
    "UnknownFormatError", "check_dataset", "read_dataset", "read_sequence", "write_dataset",
    "write_sequence", "STREAMS", "derive_bone_stream", "derive_motion_stream", "derive_stream",
    "interpolate_frames", "generate_synthetic_dataset",
]
