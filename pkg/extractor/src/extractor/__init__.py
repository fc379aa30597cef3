"""Dump per-layer transformer hidden states into .act activation files."""

from .actfile import write_act
from .jobs import (
    ExtractionError,
    ExtractionJob,
    Span,
    WORDS_PER_STEP,
    checkpoint_words,
    family_of,
    load_spans,
)
from .run import extract, load_checkpoint, read_corpus

__version__ = "0.1.0"

__all__ = [
    "ExtractionError",
    "ExtractionJob",
    "Span",
    "WORDS_PER_STEP",
    "checkpoint_words",
    "extract",
    "family_of",
    "load_checkpoint",
    "load_spans",
    "read_corpus",
    "write_act",
    "__version__",
]
