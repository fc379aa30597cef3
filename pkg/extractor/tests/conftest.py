"""Local tiny models so extraction runs without network access."""

import os

os.environ.setdefault("HF_HUB_OFFLINE", "1")
os.environ.setdefault("TRANSFORMERS_OFFLINE", "1")

import shutil

import numpy as np
import pytest
import torch

WORDS = [f"w{t}" for t in range(10)]


def _save_text_model(path):
    from transformers import BertConfig, BertModel, BertTokenizer

    os.makedirs(path, exist_ok=True)
    vocab = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"] + WORDS
    with open(os.path.join(path, "vocab.txt"), "w") as fh:
        fh.write("\n".join(vocab) + "\n")
    cfg = BertConfig(
        vocab_size=len(vocab),
        hidden_size=16,
        num_hidden_layers=2,
        num_attention_heads=2,
        intermediate_size=32,
        max_position_embeddings=32,
    )
    torch.manual_seed(0)
    BertModel(cfg).save_pretrained(path)
    BertTokenizer(os.path.join(path, "vocab.txt"), do_lower_case=False).save_pretrained(path)


@pytest.fixture(scope="session")
def text_model(tmp_path_factory):
    # "pythia" in the name exercises the words-per-step table
    root = tmp_path_factory.mktemp("models") / "pythia-tiny"
    _save_text_model(str(root))
    # a training checkpoint is a subdirectory of the model directory
    ck = root / "step3000"
    shutil.copytree(root, ck, ignore=shutil.ignore_patterns("step*"))
    return str(root)


@pytest.fixture(scope="session")
def audio_model(tmp_path_factory):
    from transformers import Wav2Vec2Config, Wav2Vec2FeatureExtractor, Wav2Vec2Model

    root = tmp_path_factory.mktemp("models") / "w2v-tiny"
    cfg = Wav2Vec2Config(
        hidden_size=16,
        num_hidden_layers=2,
        num_attention_heads=2,
        intermediate_size=32,
        conv_dim=(8, 8),
        conv_stride=(5, 2),
        conv_kernel=(10, 3),
        num_feat_extract_layers=2,
    )
    torch.manual_seed(1)
    Wav2Vec2Model(cfg).save_pretrained(str(root))
    Wav2Vec2FeatureExtractor(
        feature_size=1, sampling_rate=16000, padding_value=0.0, do_normalize=True
    ).save_pretrained(str(root))
    return str(root)


@pytest.fixture(scope="session")
def corpus10(tmp_path_factory):
    """10 sentences of 7 words plus per-word spans with treebank-style ids."""
    rng = np.random.default_rng(9)
    work = tmp_path_factory.mktemp("corpus")
    sentences = [[WORDS[int(rng.integers(0, len(WORDS)))] for _ in range(7)] for _ in range(10)]
    corpus = work / "corpus.txt"
    corpus.write_text("\n".join(" ".join(s) for s in sentences) + "\n")

    import json

    spans = [
        {"id": f"s{i:03d}:{t + 1}", "line": i, "start": t, "end": t + 1}
        for i in range(10)
        for t in range(7)
    ]
    span_path = work / "spans.json"
    span_path.write_text(json.dumps(spans))
    return {"dir": work, "corpus": corpus, "spans": span_path, "sentences": sentences}
