"""Forward passes over a corpus, one checkpoint in memory at a time."""

from __future__ import annotations

import json
import os
import re
import wave

import numpy as np
import torch

from .actfile import write_act
from .jobs import ExtractionError, ExtractionJob, checkpoint_words

AUDIO_MODEL_TYPES = {"wav2vec2", "hubert", "wavlm", "data2vec-audio"}


def _slug(name: str) -> str:
    out = re.sub(r"[^A-Za-z0-9._-]+", "-", name).strip("-")
    return out or "main"


def read_corpus(path) -> tuple[str, list]:
    """(kind, entries): text lines, or audio waveforms from a JSON path list."""
    if str(path).endswith(".json"):
        with open(path, encoding="utf-8") as fh:
            files = json.load(fh)
        if not isinstance(files, list) or not files:
            raise ExtractionError(f"{path}: expected a non-empty JSON list of audio paths")
        base = os.path.dirname(os.path.abspath(path))
        waves = []
        for f in files:
            fp = f if os.path.isabs(f) else os.path.join(base, f)
            waves.append(_read_audio(fp))
        return "audio", waves
    with open(path, encoding="utf-8") as fh:
        lines = [line.strip() for line in fh if line.strip()]
    if not lines:
        raise ExtractionError(f"{path}: corpus is empty")
    return "text", lines


def _read_audio(path) -> np.ndarray:
    if path.endswith(".npy"):
        data = np.load(path)
        return np.asarray(data, dtype=np.float32).ravel()
    if path.endswith(".wav"):
        with wave.open(path, "rb") as wf:
            if wf.getsampwidth() != 2:
                raise ExtractionError(f"{path}: only 16-bit PCM wav is supported")
            frames = wf.readframes(wf.getnframes())
            pcm = np.frombuffer(frames, dtype="<i2").astype(np.float32) / 32768.0
            if wf.getnchannels() > 1:
                pcm = pcm.reshape(-1, wf.getnchannels()).mean(axis=1)
            return pcm
    raise ExtractionError(f"{path}: unsupported audio format (use .wav or .npy)")


def load_checkpoint(model_id: str, checkpoint: str, device: str = "cpu"):
    """(model, preprocessor, kind) for one checkpoint, eval mode.

    Local directories treat the checkpoint as a subdirectory ("main" is the
    directory itself); hub paths pass it as the revision.
    """
    from transformers import AutoFeatureExtractor, AutoModel, AutoTokenizer

    if os.path.isdir(model_id):
        src = model_id if checkpoint in ("", "main") else os.path.join(model_id, checkpoint)
        if not os.path.isdir(src):
            raise ExtractionError(
                f"checkpoint {checkpoint!r} unavailable for {model_id}: no directory {src}"
            )
        kwargs = {}
        pre_src = model_id  # tokenizer/feature files live at the model root
    else:
        src = pre_src = model_id
        kwargs = {} if checkpoint in ("", "main") else {"revision": checkpoint}
    try:
        model = AutoModel.from_pretrained(src, output_hidden_states=True, **kwargs)
    except Exception as exc:
        raise ExtractionError(
            f"checkpoint {checkpoint!r} of {model_id} could not be loaded: {exc}"
        ) from exc
    model.eval().to(device)
    kind = "audio" if model.config.model_type in AUDIO_MODEL_TYPES else "text"
    if kind == "audio":
        pre = AutoFeatureExtractor.from_pretrained(pre_src, **kwargs)
    else:
        pre = AutoTokenizer.from_pretrained(pre_src, **kwargs)
    return model, pre, kind


def _forward_text(model, tokenizer, line: str, layers, device):
    enc = tokenizer(line, return_tensors="pt", return_special_tokens_mask=True)
    special = enc.pop("special_tokens_mask")[0].bool()
    enc = {k: v.to(device) for k, v in enc.items()}
    with torch.no_grad():
        out = model(**enc)
    keep = ~special
    if not bool(keep.any()):
        raise ExtractionError(f"line tokenized to nothing: {line!r}")
    return [out.hidden_states[L][0][keep].cpu().numpy().astype(np.float32) for L in layers]


def _forward_audio(model, extractor, waveform: np.ndarray, layers, device):
    sr = getattr(extractor, "sampling_rate", 16000)
    inputs = extractor(waveform, sampling_rate=sr, return_tensors="pt")
    inputs = {k: v.to(device) for k, v in inputs.items()}
    with torch.no_grad():
        out = model(**inputs)
    return [out.hidden_states[L][0].cpu().numpy().astype(np.float32) for L in layers]


def _pool(job: ExtractionJob, per_line: list[list[np.ndarray]], layers):
    """(ids, {layer: matrix}); rows follow corpus order or span-file order."""
    if job.pooling == "none":
        ids = []
        for i, blocks in enumerate(per_line):
            ids.extend(f"line{i:04d}:{t + 1}" for t in range(blocks[0].shape[0]))
        mats = {
            L: np.vstack([blocks[j] for blocks in per_line])
            for j, L in enumerate(layers)
        }
        return ids, mats

    ids = [s.element_id for s in job.spans]
    mats = {}
    for j, L in enumerate(layers):
        rows = []
        for s in job.spans:
            if s.line >= len(per_line):
                raise ExtractionError(
                    f"span {s.element_id!r}: line {s.line} beyond corpus "
                    f"({len(per_line)} entries)"
                )
            block = per_line[s.line][j]
            if s.end > block.shape[0]:
                raise ExtractionError(
                    f"span {s.element_id!r}: rows [{s.start}, {s.end}) exceed "
                    f"the {block.shape[0]} rows of line {s.line}"
                )
            rows.append(block[s.start : s.end].mean(axis=0))
        mats[L] = np.vstack(rows).astype(np.float32)
    return ids, mats


def _check_expected(ids: list[str], expected: list[str]):
    if len(ids) != len(expected):
        raise ExtractionError(
            f"id mismatch: extracted {len(ids)} elements, gold file has {len(expected)}"
        )
    for r, (got, want) in enumerate(zip(ids, expected)):
        if got != want:
            raise ExtractionError(
                f"id mismatch at row {r}: extracted {got!r}, gold file has {want!r}"
            )


def extract(job: ExtractionJob) -> dict:
    """Run the job; returns the manifest also written to out_dir."""
    from .jobs import load_expected_ids

    kind_wanted, entries = read_corpus(job.corpus)
    expected = load_expected_ids(job.expect_ids_path) if job.expect_ids_path else None
    os.makedirs(job.out_dir, exist_ok=True)
    layers = sorted(job.layers)
    files = []

    for ck in job.checkpoints:
        model, pre, kind = load_checkpoint(job.model, ck, job.device)
        if kind != kind_wanted:
            raise ExtractionError(
                f"{kind} model given a {kind_wanted} corpus ({job.corpus})"
            )
        n_states = model.config.num_hidden_layers + 1
        for L in layers:
            if L >= n_states:
                raise ExtractionError(
                    f"layer {L} out of range: model has hidden states 0..{n_states - 1}"
                )

        per_line = []
        for entry in entries:
            if kind == "text":
                per_line.append(_forward_text(model, pre, entry, layers, job.device))
            else:
                per_line.append(_forward_audio(model, pre, entry, layers, job.device))
        del model

        ids, mats = _pool(job, per_line, layers)
        if expected is not None:
            _check_expected(ids, expected)
        words = checkpoint_words(job.model, ck)
        for L in layers:
            name = f"{_slug(ck)}_layer{L:04d}.act"
            write_act(
                mats[L],
                ids,
                os.path.join(job.out_dir, name),
                layer=L,
                checkpoint_words=words,
                model=f"{job.model}@{ck}",
            )
            files.append(
                {
                    "checkpoint": ck,
                    "layer": L,
                    "path": name,
                    "rows": int(mats[L].shape[0]),
                    "width": int(mats[L].shape[1]),
                    "checkpoint_words": words,
                }
            )

    manifest = {
        "model": job.model,
        "corpus": os.path.basename(job.corpus),
        "pooling": job.pooling,
        "n_entries": len(entries),
        "files": files,
    }
    with open(os.path.join(job.out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest
