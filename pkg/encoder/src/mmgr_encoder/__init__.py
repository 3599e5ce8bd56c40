"""Encoder pipeline: raw questions, snippets, captions, and image files in;
MMQF feature stores plus a manifest for the retrieval engine out."""

__version__ = "0.1.0"

from .backends import (
    EncoderSetupError,
    HashedTextEncoder,
    ResnetImageEncoder,
    make_image_encoder,
    make_text_encoder,
)
from .pipeline import BuildResult, RawRecord, RawRecordError, RawSource, build_dataset, read_raw_records

__all__ = [
    "BuildResult",
    "EncoderSetupError",
    "HashedTextEncoder",
    "RawRecord",
    "RawRecordError",
    "RawSource",
    "ResnetImageEncoder",
    "build_dataset",
    "make_image_encoder",
    "make_text_encoder",
    "read_raw_records",
]
