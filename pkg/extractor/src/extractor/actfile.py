"""Writer for the ".act" activation container.

Layout: magic b"ACT1" | u32 little-endian header length | UTF-8 JSON header
| row-major little-endian float32 payload.  The header carries
{"dtype": "f32", "shape": [n, k], "element_ids": [...], "layer": int,
"checkpoint_words": int|null, "model": str}.

This module only writes; the consuming toolkit owns the reader, and its
reader is what the cross-boundary tests check against.
"""

from __future__ import annotations

import json

import numpy as np

MAGIC = b"ACT1"


def write_act(
    data: np.ndarray,
    element_ids: list[str],
    path,
    layer: int = 0,
    checkpoint_words: int | None = None,
    model: str = "",
) -> None:
    data = np.ascontiguousarray(data, dtype="<f4")
    if data.ndim != 2:
        raise ValueError(f"activations must be 2-D, got shape {data.shape}")
    n, k = data.shape
    if len(element_ids) != n:
        raise ValueError(f"{len(element_ids)} element ids for {n} rows")
    header = {
        "dtype": "f32",
        "shape": [n, k],
        "element_ids": [str(e) for e in element_ids],
        "layer": int(layer),
        "checkpoint_words": None if checkpoint_words is None else int(checkpoint_words),
        "model": str(model),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(blob).to_bytes(4, "little"))
        fh.write(blob)
        fh.write(data.tobytes())
