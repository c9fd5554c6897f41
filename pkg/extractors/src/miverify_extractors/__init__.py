"""Adapters that turn raw images and captions into feature package files.

The output NDJSON is consumed by the miverify tool; this package talks to it
only through that file format and never imports it.
"""

from .captions import CaptionFeatureExtractor, make_default_wordvec, tokenize
from .images import (
    ImageDecodeError,
    ImageFeatureExtractor,
    load_image,
    make_default_convnet,
)
from .job import (
    ExtractionJob,
    ExtractionResult,
    ManifestError,
    job_from_dict,
    read_manifest,
    run_extraction,
)
from .weights import (
    WEIGHTS_FORMAT,
    WeightsError,
    WeightsHashError,
    file_sha256,
    load_weights,
    save_weights,
)

__version__ = "1.0.0"

__all__ = [
    "CaptionFeatureExtractor",
    "ExtractionJob",
    "ExtractionResult",
    "ImageDecodeError",
    "ImageFeatureExtractor",
    "ManifestError",
    "WEIGHTS_FORMAT",
    "WeightsError",
    "WeightsHashError",
    "file_sha256",
    "job_from_dict",
    "load_image",
    "load_weights",
    "make_default_convnet",
    "make_default_wordvec",
    "read_manifest",
    "run_extraction",
    "save_weights",
    "tokenize",
    "__version__",
]
