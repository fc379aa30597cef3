"""Probe objectives, optimizer, batching, training loop, artifacts."""

import numpy as np
import pytest

from geoprobe import (
    GraphGold,
    OptimizerState,
    PhonemeFeatureTable,
    PhonemeGold,
    Probe,
    ProbeError,
    SemanticGraph,
    SentenceGold,
    TrainConfig,
    amsgrad_step,
    contrastive_loss,
    contrastive_loss_gradient,
    distance_loss,
    distance_loss_gradient,
    grid_search,
    init_probe,
    learning_rate_grid,
    load_probe,
    parse_batch_spec,
    save_probe,
    train_probe,
)
from geoprobe.gold import DependencySentence
from geoprobe.probe import _ComparisonBlock

from planted import build_planted


def numeric_grad(f, B, step=1e-4):
    """Central-difference gradient, entry by entry."""
    g = np.zeros_like(B)
    for i in range(B.shape[0]):
        for j in range(B.shape[1]):
            hi = B.copy()
            lo = B.copy()
            hi[i, j] += step
            lo[i, j] -= step
            g[i, j] = (f(hi) - f(lo)) / (2 * step)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


def random_instance(rng, n=8, k=5, p=3):
    h = rng.standard_normal((n, k))
    B = rng.standard_normal((k, p)) * 0.5
    return h, B


# ---------------------------------------------------------------- gradients

def test_distance_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(8):
        h, B = random_instance(rng)
        a, b = np.triu_indices(h.shape[0], k=1)
        # keep residuals away from the |.| kink so FD is valid
        targets = rng.uniform(2.0, 6.0, size=len(a))
        ana = distance_loss_gradient(B, h, (a, b), targets)
        num = numeric_grad(lambda M: distance_loss(M, h, (a, b), targets), B)
        assert rel_err(ana, num) < 1e-5


def test_distance_gradient_zero_residual_contributes_zero():
    h = np.array([[0.0, 0.0], [1.0, 0.0]])
    B = np.eye(2)
    a, b = np.array([0]), np.array([1])
    # target equals the projected squared distance exactly
    g = distance_loss_gradient(B, h, (a, b), np.array([1.0]))
    assert np.allclose(g, 0.0)


def test_contrastive_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    for _ in range(8):
        h, B = random_instance(rng, n=10)
        ana = contrastive_loss_gradient(B, h, 0, [1, 2], [3, 4, 5, 6])
        num = numeric_grad(lambda M: contrastive_loss(M, h, 0, [1, 2], [3, 4, 5, 6]), B)
        assert rel_err(ana, num) < 1e-5


def test_contrastive_closed_forms():
    # equidistant points: scaled one-hot rows, identity probe
    m = 6
    h = 2.0 * np.eye(m)
    B = np.eye(m)
    # one positive vs m-2 negatives, all at the same distance: log(m-2)
    loss = contrastive_loss(B, h, 0, [1], list(range(2, m)))
    assert loss == pytest.approx(np.log(m - 2), abs=1e-12)
    # equal-sized sides cancel exactly
    loss2 = contrastive_loss(B, h, 0, [1, 2], [3, 4])
    assert loss2 == pytest.approx(0.0, abs=1e-12)


def test_contrastive_input_validation():
    h = np.eye(4)
    B = np.eye(4)
    with pytest.raises(ProbeError):
        contrastive_loss(B, h, 0, [], [1])
    with pytest.raises(ProbeError):
        contrastive_loss(B, h, 0, [1], [])
    with pytest.raises(ProbeError):
        contrastive_loss(B, h, 0, [0], [1])  # anchor in positives
    with pytest.raises(ProbeError):
        contrastive_loss(B, h, 0, [1], [1, 2])  # overlap


def test_losses_invariant_to_orthogonal_output_rotation():
    rng = np.random.default_rng(2)
    h, B = random_instance(rng)
    Q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    a, b = np.triu_indices(h.shape[0], k=1)
    t = rng.uniform(1, 4, size=len(a))
    assert distance_loss(B @ Q, h, (a, b), t) == pytest.approx(
        distance_loss(B, h, (a, b), t), rel=1e-12
    )
    assert contrastive_loss(B @ Q, h, 0, [1, 2], [3, 4]) == pytest.approx(
        contrastive_loss(B, h, 0, [1, 2], [3, 4]), rel=1e-12
    )


def test_losses_invariant_to_input_translation():
    rng = np.random.default_rng(3)
    h, B = random_instance(rng)
    shift = rng.standard_normal(h.shape[1]) * 10
    a, b = np.triu_indices(h.shape[0], k=1)
    t = rng.uniform(1, 4, size=len(a))
    assert distance_loss(B, h + shift, (a, b), t) == pytest.approx(
        distance_loss(B, h, (a, b), t), rel=1e-9
    )
    assert contrastive_loss(B, h + shift, 0, [1], [2, 3]) == pytest.approx(
        contrastive_loss(B, h, 0, [1], [2, 3]), rel=1e-9
    )


def test_block_matches_scalar_contrastive():
    # vectorized per-anchor block must agree with the scalar reference
    rng = np.random.default_rng(4)
    h, B = random_instance(rng, n=12)
    anchors = [(0, [1, 2], [3, 4, 5]), (6, [7], [8, 9, 10, 11])]
    ai, aj, positive, segment = [], [], [], []
    for seg, (a, pos, neg) in enumerate(anchors):
        for j in pos:
            ai.append(a), aj.append(j), positive.append(True), segment.append(seg)
        for j in neg:
            ai.append(a), aj.append(j), positive.append(False), segment.append(seg)
    block = _ComparisonBlock(ai, aj, positive, segment, len(anchors))
    loss, grad = block.loss_and_gradient(B, h)
    want_loss = np.mean([contrastive_loss(B, h, a, p, n) for a, p, n in anchors])
    want_grad = sum(contrastive_loss_gradient(B, h, a, p, n) for a, p, n in anchors) / len(anchors)
    assert loss == pytest.approx(want_loss, rel=1e-12)
    assert np.allclose(grad, want_grad, rtol=1e-10)


# ---------------------------------------------------------------- optimizer

def test_amsgrad_first_step_is_signed_lr():
    B = np.zeros((2, 2))
    g = np.array([[3.0, -0.5], [0.0, 1e-8]])
    state = OptimizerState.zeros(2, 2)
    _, B1 = amsgrad_step(state, B, g, lr=0.1)
    # bias-corrected first step moves by ~lr in the gradient's sign direction
    assert B1[0, 0] == pytest.approx(-0.1, rel=1e-6)
    assert B1[0, 1] == pytest.approx(0.1, rel=1e-6)
    assert B1[1, 0] == 0.0


def test_amsgrad_vmax_never_decreases():
    rng = np.random.default_rng(5)
    B = rng.standard_normal((3, 2))
    state = OptimizerState.zeros(3, 2)
    prev = state.vmax.copy()
    for _ in range(100):
        state, B = amsgrad_step(state, B, rng.standard_normal((3, 2)), lr=1e-3)
        assert np.all(state.vmax >= prev)
        prev = state.vmax.copy()
    assert state.step == 100


def test_amsgrad_shape_check():
    state = OptimizerState.zeros(2, 2)
    with pytest.raises(ProbeError):
        amsgrad_step(state, np.zeros((2, 2)), np.zeros((3, 2)), lr=0.1)


# ---------------------------------------------------------------- plumbing

def test_parse_batch_spec_forms():
    assert parse_batch_spec("300 sentences") == (300, None)
    assert parse_batch_spec("1 sentence") == (1, None)
    assert parse_batch_spec("64 sets of 12 words") == (64, 12)
    assert parse_batch_spec("1 set of 200 phonemes") == (1, 200)
    for bad in ("", "sentences", "0 sentences", "3 sets of 1 word", "3 sets of words"):
        with pytest.raises(ProbeError):
            parse_batch_spec(bad)


def test_train_config_validation():
    with pytest.raises(ProbeError):
        TrainConfig(probe_dim=2, learning_rate=0.0)
    with pytest.raises(ProbeError):
        TrainConfig(probe_dim=2, epochs=0)
    with pytest.raises(ProbeError):
        TrainConfig(probe_dim=2, objective="mse")
    with pytest.raises(ProbeError):
        TrainConfig(probe_dim=2, batch_spec="whenever")


def test_probe_validation():
    with pytest.raises(ProbeError):
        Probe(B=np.zeros((2, 3)), probe_dim=3)  # p > k
    with pytest.raises(ProbeError):
        Probe(B=np.zeros((3, 2)), probe_dim=3)  # mismatch
    with pytest.raises(ProbeError):
        Probe(B=np.full((3, 2), np.nan), probe_dim=2)


def test_init_probe_uniform_range_and_seed():
    p1 = init_probe(10, 4, seed=9)
    p2 = init_probe(10, 4, seed=9)
    assert np.array_equal(p1.B, p2.B)
    assert np.all(np.abs(p1.B) <= 1e-5)
    assert np.any(p1.B != 0)
    with pytest.raises(ProbeError):
        init_probe(3, 4, seed=0)


def test_learning_rate_grid_endpoints():
    g = learning_rate_grid()
    assert len(g) == 20
    assert g[0] == pytest.approx(1e-7)
    assert g[-1] == pytest.approx(1e-2)
    assert np.all(np.diff(g) > 0)
    # linear spacing: constant step
    assert np.allclose(np.diff(g), g[1] - g[0])
    lg = learning_rate_grid(log_spaced=True)
    assert lg[0] == pytest.approx(1e-7) and lg[-1] == pytest.approx(1e-2)
    assert np.allclose(np.diff(np.log(lg)), np.log(lg[1]) - np.log(lg[0]))


# ---------------------------------------------------------------- training

def tiny_fixture():
    return build_planted(fix_seed=3, sizes=[7] * 12, k=24)


def test_train_probe_deterministic():
    fx = tiny_fixture()
    cfg = TrainConfig(probe_dim=4, learning_rate=1e-3, epochs=3, batch_spec="4 sentences")
    pa, ha = train_probe(cfg, fx.acts, fx.gold, (fx.train_elements, fx.val_elements))
    pb, hb = train_probe(cfg, fx.acts, fx.gold, (fx.train_elements, fx.val_elements))
    assert np.array_equal(pa.B, pb.B)
    assert ha == hb
    cfg2 = TrainConfig(probe_dim=4, learning_rate=1e-3, epochs=3, batch_spec="4 sentences", seed=1)
    pc, _ = train_probe(cfg2, fx.acts, fx.gold, (fx.train_elements, fx.val_elements))
    assert not np.array_equal(pa.B, pc.B)


def test_train_probe_vanishing_lr_keeps_init():
    fx = tiny_fixture()
    cfg = TrainConfig(probe_dim=4, learning_rate=1e-12, epochs=2, batch_spec="4 sentences")
    probe, _ = train_probe(cfg, fx.acts, fx.gold, (fx.train_elements, fx.val_elements))
    init = init_probe(fx.acts.k, 4, seed=0)
    assert np.max(np.abs(probe.B - init.B)) < 1e-6


def test_train_probe_returns_best_validation_snapshot():
    fx = tiny_fixture()
    cfg = TrainConfig(probe_dim=4, learning_rate=5e-3, epochs=12, batch_spec="4 sentences")
    probe, history = train_probe(cfg, fx.acts, fx.gold, (fx.train_elements, fx.val_elements))
    vals = [h["val_loss"] for h in history]
    assert probe.final_val_loss == pytest.approx(min(vals))


def test_train_probe_no_validation_falls_back_to_final():
    fx = tiny_fixture()
    cfg = TrainConfig(probe_dim=4, learning_rate=1e-3, epochs=2, batch_spec="4 sentences")
    probe, history = train_probe(cfg, fx.acts, fx.gold, (fx.train_elements, []))
    assert probe.final_val_loss is None
    assert all(h["val_loss"] is None for h in history)


def test_train_probe_contrastive_runs_and_history():
    fx = tiny_fixture()
    cfg = TrainConfig(
        probe_dim=4, learning_rate=2e-3, epochs=4, batch_spec="4 sentences",
        objective="contrastive", negatives_per_anchor=5,
    )
    probe, history = train_probe(cfg, fx.acts, fx.gold, (fx.train_elements, fx.val_elements))
    assert len(history) == 4
    assert probe.B.shape == (fx.acts.k, 4)
    assert all(np.isfinite(h["train_loss"]) for h in history)
    # validation is a frozen comparison set: same B must give the same number
    assert probe.final_val_loss == pytest.approx(min(h["val_loss"] for h in history))


def test_train_probe_empty_train_rejected():
    fx = tiny_fixture()
    cfg = TrainConfig(probe_dim=4)
    with pytest.raises(ProbeError):
        train_probe(cfg, fx.acts, fx.gold, ([], fx.val_elements))


def test_sentence_gold_with_set_spec_rejected():
    fx = tiny_fixture()
    cfg = TrainConfig(probe_dim=4, batch_spec="4 sets of 6 words")
    with pytest.raises(ProbeError):
        train_probe(cfg, fx.acts, fx.gold, (fx.train_elements, fx.val_elements))


def graph_fixture():
    # path graph a0 - a1 - ... - a19 embedded on a line, plus noise dims
    names = [f"a{i}" for i in range(20)]
    edges = [(names[i + 1], names[i]) for i in range(19)]
    graph = SemanticGraph(nodes=list(names), hypernym_edges=edges)
    rng = np.random.default_rng(6)
    coords = np.zeros((20, 6))
    coords[:, 0] = np.sqrt(np.arange(20.0))  # squared distances grow linearly
    coords[:, 1:] = 0.01 * rng.standard_normal((20, 5))
    from geoprobe import ActivationMatrix

    acts = ActivationMatrix(coords.astype(np.float32), names)
    return graph, acts, names


def test_train_probe_set_mode_distance():
    graph, acts, names = graph_fixture()
    gold = GraphGold(graph)
    cfg = TrainConfig(probe_dim=2, learning_rate=2e-3, epochs=5, batch_spec="8 sets of 6 words")
    probe, history = train_probe(cfg, acts, gold, (names[:16], names[16:]))
    assert len(history) == 5
    assert np.all(np.isfinite(probe.B))


def test_train_probe_set_mode_contrastive():
    graph, acts, names = graph_fixture()
    gold = GraphGold(graph)
    cfg = TrainConfig(
        probe_dim=2, learning_rate=2e-3, epochs=3,
        batch_spec="4 sets of 6 words", objective="contrastive", negatives_per_anchor=4,
    )
    probe, _ = train_probe(cfg, acts, gold, (names[:16], names[16:]))
    assert np.all(np.isfinite(probe.B))


def test_graph_gold_with_sentence_spec_rejected():
    graph, acts, names = graph_fixture()
    cfg = TrainConfig(probe_dim=2, batch_spec="3 sentences")
    with pytest.raises(ProbeError):
        train_probe(cfg, acts, GraphGold(graph), (names[:16], names[16:]))


def test_phoneme_gold_universe_and_neighbors():
    table = PhonemeFeatureTable(
        features={"i": np.array([1, -1]), "u": np.array([1, 1])},
        feature_names=["front", "round"],
    )
    labels = {"tok1": "i", "tok2": "i", "tok3": "u", "tok4": "zz"}
    gold = PhonemeGold(table, labels)
    assert gold.universe({"tok1", "tok2", "tok3", "tok4"}) == ["tok1", "tok2", "tok3"]
    assert gold.distance("tok1", "tok3") == 1.0
    assert gold.distance("tok1", "tok2") == 0.0
    assert gold.neighbors("tok1") == ["tok2"]


# ---------------------------------------------------------------- selection

def test_grid_search_prefers_lower_validation_loss():
    fx = tiny_fixture()
    base = TrainConfig(probe_dim=4, epochs=3, batch_spec="4 sentences")
    res = grid_search(
        base, fx.acts, fx.gold, (fx.train_elements, fx.val_elements),
        grid=[1e-7, 2e-3],
    )
    assert len(res.table) == 2
    losses = {r["learning_rate"]: r["val_loss"] for r in res.table}
    assert res.best_config.learning_rate == min(losses, key=lambda lr: (losses[lr], lr))


def test_grid_search_tie_breaks_to_smaller_rate():
    fx = tiny_fixture()
    base = TrainConfig(probe_dim=4, epochs=1, batch_spec="4 sentences")
    # the same rate listed twice scores identically: the first (lower index)
    # entry must win, which is the smaller-rate rule for equal values
    res = grid_search(
        base, fx.acts, fx.gold, (fx.train_elements, fx.val_elements),
        grid=[1e-3, 1e-3],
    )
    assert res.best_config.learning_rate == 1e-3
    assert res.table[0]["val_loss"] == res.table[1]["val_loss"]


def test_grid_search_requires_validation():
    fx = tiny_fixture()
    base = TrainConfig(probe_dim=4, epochs=1, batch_spec="4 sentences")
    with pytest.raises(ProbeError):
        grid_search(base, fx.acts, fx.gold, (fx.train_elements, []))


# ---------------------------------------------------------------- artifacts

def test_probe_save_load_round_trip(tmp_path):
    fx = tiny_fixture()
    cfg = TrainConfig(probe_dim=4, learning_rate=1e-3, epochs=2, batch_spec="4 sentences")
    probe, history = train_probe(cfg, fx.acts, fx.gold, (fx.train_elements, fx.val_elements))
    path = tmp_path / "probe.act"
    save_probe(probe, path, history)
    back = load_probe(path)
    # weights round-trip through float32 storage
    assert np.array_equal(back.B, probe.B.astype(np.float32).astype(np.float64))
    assert back.probe_dim == 4
    assert back.config == cfg
    assert back.final_val_loss == pytest.approx(probe.final_val_loss)
    assert (tmp_path / "probe.act.json").exists()


def test_load_probe_without_sidecar(tmp_path):
    probe = init_probe(6, 2, seed=0)
    path = tmp_path / "bare.act"
    save_probe(probe, path)
    (tmp_path / "bare.act.json").unlink()
    back = load_probe(path)
    assert back.config is None
    assert back.B.shape == (6, 2)
