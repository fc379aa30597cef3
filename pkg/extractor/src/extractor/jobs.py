"""Extraction jobs: what to run, over which inputs, and span handling."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field


class ExtractionError(Exception):
    pass


# tokens/words consumed per optimizer step, keyed by model family.
# pythia: 1024 sequences of 2048 tokens per step.
# librispeech wav2vec2 runs hear about 1e9 spoken words (with repetition)
# over 90k steps.  Families not listed leave checkpoint_words null.
WORDS_PER_STEP = {
    "pythia": 2_097_152,
    "wav2vec2-librispeech": 11_111,
}


def family_of(model_id: str) -> str | None:
    low = model_id.lower()
    if "pythia" in low:
        return "pythia"
    if "wav2vec2" in low and "librispeech" in low:
        return "wav2vec2-librispeech"
    return None


def checkpoint_words(model_id: str, checkpoint: str) -> int | None:
    """step count parsed from the checkpoint name times the family rate."""
    fam = family_of(model_id)
    if fam is None:
        return None
    m = re.search(r"step[-_]?(\d+)", checkpoint)
    if m is None:
        return None
    return int(m.group(1)) * WORDS_PER_STEP[fam]


@dataclass
class Span:
    element_id: str
    line: int
    start: int
    end: int


def load_spans(path) -> list[Span]:
    """Ordered span list from JSON: [{"id", "line", "start", "end"}, ...].

    ``line`` indexes the corpus entry, ``start``/``end`` the hidden-state
    rows of that entry (token positions for text, frames for audio), end
    exclusive.  Output row order follows this file's order.
    """
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    entries = raw["spans"] if isinstance(raw, dict) else raw
    spans = []
    seen = set()
    for i, e in enumerate(entries):
        try:
            span = Span(str(e["id"]), int(e["line"]), int(e["start"]), int(e["end"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ExtractionError(f"span entry {i} is malformed: {exc}") from exc
        if span.element_id in seen:
            raise ExtractionError(f"duplicate span id {span.element_id!r}")
        seen.add(span.element_id)
        if span.line < 0:
            raise ExtractionError(f"span {span.element_id!r}: negative line index")
        if not 0 <= span.start < span.end:
            raise ExtractionError(
                f"span {span.element_id!r}: need 0 <= start < end, "
                f"got [{span.start}, {span.end})"
            )
        spans.append(span)
    if not spans:
        raise ExtractionError(f"no spans in {path}")
    return spans


def load_expected_ids(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        ids = [line.strip() for line in fh if line.strip()]
    if not ids:
        raise ExtractionError(f"no ids in {path}")
    return ids


@dataclass
class ExtractionJob:
    """One extraction run: model x checkpoints x layers over one corpus.

    ``corpus`` is a text file (one sentence per line) or, for audio models,
    a JSON list of audio file paths (16-bit PCM .wav or float .npy).
    ``pooling`` "none" dumps one row per token/frame; "spans" mean-pools
    the row ranges named in ``spans_path`` and requires it.
    """

    model: str
    checkpoints: list[str]
    layers: list[int]
    corpus: str
    out_dir: str
    pooling: str = "none"
    spans_path: str | None = None
    expect_ids_path: str | None = None
    device: str = "cpu"
    spans: list[Span] = field(init=False, default_factory=list)

    def __post_init__(self):
        if self.pooling not in ("none", "spans"):
            raise ExtractionError(f"pooling must be 'none' or 'spans', got {self.pooling!r}")
        if not self.checkpoints:
            raise ExtractionError("need at least one checkpoint")
        if not self.layers:
            raise ExtractionError("need at least one layer")
        if any(layer < 0 for layer in self.layers):
            raise ExtractionError("layer indices must be >= 0")
        if len(set(self.layers)) != len(self.layers):
            raise ExtractionError("duplicate layer indices")
        if self.pooling == "spans":
            if self.spans_path is None:
                raise ExtractionError("pooling 'spans' requires a span file")
            self.spans = load_spans(self.spans_path)
        elif self.spans_path is not None:
            raise ExtractionError("span file given but pooling is 'none'")
