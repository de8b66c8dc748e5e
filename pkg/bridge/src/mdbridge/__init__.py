"""Feature-extraction bridge for the pronunciation-scoring toolkit.

Turns wav corpora plus forced alignments into MPKF feature files, span
files, and manifests — the exact on-disk formats the scoring toolkit
ingests. A batch tool: the consumer never imports it, and it never
imports the consumer.
"""

__version__ = "0.1.0"

from .align import ctm_to_spans, parse_ctm
from .audio import read_wav
from .errors import (
    AlignmentError,
    AudioFormatError,
    BridgeError,
    CorpusLayoutError,
    ModelTagError,
)
from .extract import ExtractionJob, ExtractionReport, extract
from .formats import (
    normalize_phone,
    write_annotations,
    write_manifest,
    write_mpkf,
    write_spans,
)
from .models import MODEL_TAGS, ModelTag, extract_features, get_tag, n_output_frames

__all__ = [
    "AlignmentError",
    "AudioFormatError",
    "BridgeError",
    "CorpusLayoutError",
    "ExtractionJob",
    "ExtractionReport",
    "MODEL_TAGS",
    "ModelTag",
    "ModelTagError",
    "ctm_to_spans",
    "extract",
    "extract_features",
    "get_tag",
    "n_output_frames",
    "normalize_phone",
    "parse_ctm",
    "read_wav",
    "write_annotations",
    "write_manifest",
    "write_mpkf",
    "write_spans",
    "__version__",
]
