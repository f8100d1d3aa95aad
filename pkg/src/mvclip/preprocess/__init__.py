"""Reduction pipeline for Cell Painting image trees.

16-bit planes are windowed to 8 bit between their 1st and 99th percentiles,
center-cropped and resized to 768 x 768, written as one PNG per channel, and
only a seeded subset of the fields of view of every well is kept.
"""

from mvclip.preprocess.image import (
    ProcessedPlane,
    RawPlane,
    center_crop_resize,
    decode_png,
    encode_channels,
    nearest_rank,
    rescale_16_to_8,
)
from mvclip.preprocess.pipeline import (
    CompressionStats,
    Manifest,
    PreprocessConfig,
    WellRecord,
    discover,
    report_stats,
    run_pipeline,
    sample_views,
)

__all__ = [
    "CompressionStats",
    "Manifest",
    "PreprocessConfig",
    "ProcessedPlane",
    "RawPlane",
    "WellRecord",
    "center_crop_resize",
    "decode_png",
    "discover",
    "encode_channels",
    "nearest_rank",
    "report_stats",
    "rescale_16_to_8",
    "run_pipeline",
    "sample_views",
]
