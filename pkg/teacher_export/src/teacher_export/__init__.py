"""Frozen-teacher feature extraction into checksummed binary files."""

from .errors import (ChecksumError, ConfigError, DataError, ExportError,
                     FrameCountError, TruncatedFileError)
from .exporter import ExportedFile, export, load_teacher, teacher_states
from .featfile import (FeatureHeader, read_feature_file, validate_feature_file,
                       write_feature_file)
from .manifest import ExportManifest, parse_manifest, read_manifest

__all__ = [
    "ChecksumError", "ConfigError", "DataError", "ExportError",
    "FrameCountError", "TruncatedFileError",
    "ExportedFile", "export", "load_teacher", "teacher_states",
    "FeatureHeader", "read_feature_file", "validate_feature_file",
    "write_feature_file",
    "ExportManifest", "parse_manifest", "read_manifest",
]
