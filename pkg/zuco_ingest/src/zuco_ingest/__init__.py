"""Convert mat/HDF5 word-aligned recording files into the corpus formats
consumed by the bpr retrieval engine."""

from zuco_ingest.convert import (
    BAND_ORDER,
    FEATURE_WIDTH,
    ConversionReport,
    IngestError,
    RawWordFeature,
    SentenceRecord,
    convert_task_files,
    read_subject_file,
    validate_output,
)

__all__ = [
    "BAND_ORDER",
    "FEATURE_WIDTH",
    "ConversionReport",
    "IngestError",
    "RawWordFeature",
    "SentenceRecord",
    "convert_task_files",
    "read_subject_file",
    "validate_output",
]
