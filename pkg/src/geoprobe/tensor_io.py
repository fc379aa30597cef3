"""Binary activation tensor format (".act") and span pooling.

File layout: magic b"ACT1" | u32 little-endian header length | UTF-8 JSON
header | row-major little-endian float32 payload.  The header carries
{"dtype": "f32", "shape": [n, k], "element_ids": [...], "layer": int,
"checkpoint_words": int|null, "model": str}.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

MAGIC = b"ACT1"


class TensorFormatError(Exception):
    """Base class for .act read failures."""


class BadMagicError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


class HeaderMismatchError(TensorFormatError):
    pass


class NonFiniteError(TensorFormatError):
    pass


@dataclass
class ActivationMatrix:
    """n x k activations with one row per identified element."""

    data: np.ndarray
    element_ids: list[str]
    layer_index: int = 0
    checkpoint_words: int | None = None
    source_model: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise ValueError(f"data must be 2-D, got shape {self.data.shape}")
        if self.data.shape[0] != len(self.element_ids):
            raise ValueError(
                f"{self.data.shape[0]} rows but {len(self.element_ids)} element ids"
            )
        if len(set(self.element_ids)) != len(self.element_ids):
            raise ValueError("element_ids contain duplicates")
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError("activation matrix contains NaN or Inf")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def k(self) -> int:
        return self.data.shape[1]

    def row_index(self) -> dict[str, int]:
        return {eid: i for i, eid in enumerate(self.element_ids)}


@dataclass
class Span:
    utterance_id: str
    element_id: str
    start: float
    end: float
    label: str = ""


@dataclass
class SpanTable:
    """Spans in seconds (speech, with frame_rate) or token indices (text)."""

    rows: list[Span]
    frame_rate: float | None = None

    def __post_init__(self):
        seen = set()
        for row in self.rows:
            if not row.start < row.end:
                raise ValueError(
                    f"span {row.element_id!r}: start {row.start} must be < end {row.end}"
                )
            if row.element_id in seen:
                raise ValueError(f"duplicate span element_id {row.element_id!r}")
            seen.add(row.element_id)


def write_tensor(matrix: ActivationMatrix, path) -> None:
    """Write a matrix so that read_tensor returns bit-identical contents."""
    header = {
        "dtype": "f32",
        "shape": [matrix.n, matrix.k],
        "element_ids": list(matrix.element_ids),
        "layer": matrix.layer_index,
        "checkpoint_words": matrix.checkpoint_words,
        "model": matrix.source_model,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(blob).to_bytes(4, "little"))
        fh.write(blob)
        fh.write(np.ascontiguousarray(matrix.data, dtype="<f4").tobytes())


def read_tensor(path) -> ActivationMatrix:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise BadMagicError(f"{path}: expected magic {MAGIC!r}, found {magic!r}")
        length_bytes = fh.read(4)
        if len(length_bytes) < 4:
            raise TruncatedPayloadError(f"{path}: file ends inside header length")
        header_len = int.from_bytes(length_bytes, "little")
        blob = fh.read(header_len)
        if len(blob) < header_len:
            raise TruncatedPayloadError(f"{path}: file ends inside JSON header")
        try:
            header = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise HeaderMismatchError(f"{path}: unreadable header: {exc}") from exc
        payload = fh.read()

    if header.get("dtype") != "f32":
        raise HeaderMismatchError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    try:
        n, k = (int(v) for v in header["shape"])
        element_ids = [str(e) for e in header["element_ids"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise HeaderMismatchError(f"{path}: malformed header fields: {exc}") from exc
    if len(element_ids) != n:
        raise HeaderMismatchError(
            f"{path}: header declares n={n} but lists {len(element_ids)} element ids"
        )
    expected = n * k * 4
    if len(payload) != expected:
        raise TruncatedPayloadError(
            f"{path}: shape [{n},{k}] needs {expected} payload bytes, found {len(payload)}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(n, k)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{path}: payload contains NaN or Inf")
    return ActivationMatrix(
        data=data.copy(),
        element_ids=element_ids,
        layer_index=int(header.get("layer", 0)),
        checkpoint_words=(
            None if header.get("checkpoint_words") is None else int(header["checkpoint_words"])
        ),
        source_model=str(header.get("model", "")),
    )


def load_spans(path, frame_rate: float | None = None) -> SpanTable:
    """Load a JSON-lines span file (one record per span)."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: bad JSON record: {exc}") from exc
            rows.append(
                Span(
                    utterance_id=str(rec["utterance_id"]),
                    element_id=str(rec["element_id"]),
                    start=float(rec["start"]),
                    end=float(rec["end"]),
                    label=str(rec.get("label", "")),
                )
            )
    return SpanTable(rows=rows, frame_rate=frame_rate)


def save_spans(table: SpanTable, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in table.rows:
            rec = {
                "utterance_id": row.utterance_id,
                "element_id": row.element_id,
                "start": row.start,
                "end": row.end,
                "label": row.label,
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _span_row_range(span: Span, frame_rate: float | None, n_rows: int) -> tuple[int, int]:
    # Speech spans are half-open [floor(start*rate), ceil(end*rate)), clipped
    # to the matrix; token spans index rows directly.
    if frame_rate is not None:
        lo = math.floor(span.start * frame_rate)
        hi = math.ceil(span.end * frame_rate)
    else:
        lo = int(span.start)
        hi = int(span.end)
    return max(lo, 0), min(hi, n_rows)


def pool_spans(frames: ActivationMatrix, spans: SpanTable, mode: str = "mean") -> ActivationMatrix:
    """Average frame/token rows into one element-level row per span.

    Only mean pooling is implemented; the mode argument is the extension
    point for other reductions.
    """
    if mode != "mean":
        raise ValueError(f"unsupported pooling mode {mode!r}")
    out = np.empty((len(spans.rows), frames.k), dtype=np.float32)
    ids = []
    for i, span in enumerate(spans.rows):
        lo, hi = _span_row_range(span, spans.frame_rate, frames.n)
        if hi <= lo:
            raise ValueError(
                f"span {span.element_id!r} [{span.start}, {span.end}) covers no rows "
                f"after clipping to {frames.n} frames"
            )
        out[i] = frames.data[lo:hi].mean(axis=0)
        ids.append(span.element_id)
    return ActivationMatrix(
        data=out,
        element_ids=ids,
        layer_index=frames.layer_index,
        checkpoint_words=frames.checkpoint_words,
        source_model=frames.source_model,
    )
