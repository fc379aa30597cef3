"""Acceptance battery: one test per shipped guarantee.

Every expected value is re-derived through an independent route (central
finite differences, Floyd-Warshall, exhaustive enumeration, scipy, or a
closed form), so a pass means two implementations agree rather than one
implementation agreeing with itself.  Criteria that involve training run
on the planted-subspace fixture, where the right answer is known by
construction.
"""

import filecmp
import heapq
import itertools
import json
import time
from pathlib import Path

import numpy as np
import pytest
import scipy.stats
from click.testing import CliRunner

from geoprobe import (
    ActivationMatrix,
    Probe,
    SemanticGraph,
    SentenceGold,
    TrainConfig,
    contrastive_loss,
    contrastive_loss_gradient,
    data_gap,
    decode_uuas,
    distance_loss,
    distance_loss_gradient,
    emergence_point,
    eval_distance_probe,
    fit_emergence,
    graph_distances,
    incremental_r2,
    linear_tree_distances,
    mst,
    pairwise_sq_distances,
    rank_score,
    read_tensor,
    sa_split,
    spearman,
    subspace_alignment,
    train_probe,
    tree_distance_matrix,
    variance_partition,
    write_tensor,
)
from geoprobe.cli import main
from geoprobe.gold import DependencySentence

from planted import (
    AMBIENT_DIM,
    NOISE_SCALE,
    PLANTED_DIM,
    build_planted,
    control_gold,
    element_ids,
    exact_tree_coords,
    heads_from_edges,
    prufer_tree,
)


# ------------------------------------------------------------------ helpers

def pooled_rank_median(probe, fixture):
    """Median of per-token neighbor ranks pooled over the test sentences."""
    row = fixture.acts.row_index()
    pooled = []
    for s in fixture.test_sentences:
        ids = [f"{s.sentence_id}:{t}" for t in s.token_ids]
        rows = np.array([row[e] for e in ids])
        dm = pairwise_sq_distances(fixture.acts.data[rows].astype(float) @ probe.B)
        D = tree_distance_matrix(s)
        per, _ = rank_score(
            dm, [set(np.flatnonzero(D[i] == 1).tolist()) for i in range(len(ids))]
        )
        pooled.extend(v for v in per if not np.isnan(v))
    return float(np.median(pooled))


@pytest.fixture(scope="module")
def planted_run():
    """Planted fixture plus a trained 32-dim distance probe, timed."""
    fx = build_planted()
    cfg = TrainConfig(
        probe_dim=32,
        learning_rate=2e-3,
        epochs=200,
        batch_spec="300 sentences",
        objective="distance",
        seed=0,
    )
    t0 = time.perf_counter()
    probe, _ = train_probe(cfg, fx.acts, fx.gold, (fx.train_elements, fx.val_elements))
    heldout = eval_distance_probe(probe, fx.acts, fx.gold, fx.test_elements)
    elapsed = time.perf_counter() - t0
    return fx, cfg, probe, heldout, elapsed


# ------------------------------------------------- 1: planted-subspace recovery

def test_criterion_01_planted_recovery(planted_run):
    fx, cfg, probe, heldout, elapsed = planted_run
    assert fx.acts.data.shape == (600, 128)
    assert AMBIENT_DIM == 128 and PLANTED_DIM == 8 and NOISE_SCALE == 0.1
    assert heldout.aggregate >= 0.95
    assert elapsed < 60.0

    # random-label control: same settings, fresh uniform trees as gold
    ctrl = control_gold(fx)
    probe_c, _ = train_probe(cfg, fx.acts, ctrl, (fx.train_elements, fx.val_elements))
    ctrl_sp = eval_distance_probe(probe_c, fx.acts, ctrl, fx.test_elements).aggregate
    assert abs(ctrl_sp) < 0.2


# ----------------------------------------------------- 2: gradient correctness

def numeric_grad(f, B, step=1e-4):
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


def test_criterion_02_gradients_match_finite_differences():
    rng = np.random.default_rng(42)
    for _ in range(20):
        n = int(rng.integers(6, 12))
        k = int(rng.integers(3, 7))
        p = int(rng.integers(2, k + 1))
        h = rng.standard_normal((n, k))
        B = rng.standard_normal((k, p)) * 0.5

        a, b = np.triu_indices(n, k=1)
        # residuals kept away from the |.| kink, where FD is undefined
        targets = rng.uniform(2.0, 6.0, size=len(a))
        ana = distance_loss_gradient(B, h, (a, b), targets)
        num = numeric_grad(lambda M: distance_loss(M, h, (a, b), targets), B)
        assert rel_err(ana, num) < 1e-4

        anchor = 0
        pos = [1, 2]
        neg = list(range(3, n))
        ana_c = contrastive_loss_gradient(B, h, anchor, pos, neg)
        num_c = numeric_grad(lambda M: contrastive_loss(M, h, anchor, pos, neg), B)
        assert rel_err(ana_c, num_c) < 1e-4


# ------------------------------------------------------- 3: oracle equivalence

def floyd_warshall(n, edges):
    INF = 10**9
    d = np.full((n, n), INF, dtype=np.int64)
    np.fill_diagonal(d, 0)
    for a, b in edges:
        d[a, b] = d[b, a] = 1
    for k in range(n):
        d = np.minimum(d, d[:, k : k + 1] + d[k : k + 1, :])
    return d


def prufer_decode(seq, n):
    degree = [1] * n
    for v in seq:
        degree[v] += 1
    edges = []
    leaves = sorted(v for v in range(n) if degree[v] == 1)
    heapq.heapify(leaves)
    for v in seq:
        leaf = heapq.heappop(leaves)
        edges.append((min(leaf, v), max(leaf, v)))
        degree[v] -= 1
        if degree[v] == 1:
            heapq.heappush(leaves, v)
    a, b = sorted(leaves)[:2]
    edges.append((a, b))
    return edges


def all_spanning_trees(n):
    if n == 1:
        return [[]]
    if n == 2:
        return [[(0, 1)]]
    return [prufer_decode(seq, n) for seq in itertools.product(range(n), repeat=n - 2)]


def test_criterion_03_oracle_equivalence():
    rng = np.random.default_rng(7)

    # tree path lengths vs Floyd-Warshall, 25 random trees
    for _ in range(25):
        m = int(rng.integers(2, 13))
        heads = heads_from_edges(m, prufer_tree(m, rng))
        sent = DependencySentence(
            "t", [f"w{t}" for t in range(m)], heads, list(range(1, m + 1))
        )
        edges = [(i, h - 1) for i, h in enumerate(heads) if h != 0]
        assert np.array_equal(tree_distance_matrix(sent), floyd_warshall(m, edges))

    # graph BFS distances vs Floyd-Warshall, 25 random parent-pointer DAGs
    for _ in range(25):
        m = int(rng.integers(3, 12))
        names = [f"n{i:02d}" for i in range(m)]
        child_parent = [
            (names[i], names[int(rng.integers(0, i))]) for i in range(1, m)
        ]
        graph = SemanticGraph(nodes=list(names), hypernym_edges=child_parent)
        idx = {nm: i for i, nm in enumerate(names)}
        e_idx = [(idx[c], idx[p]) for c, p in child_parent]
        want = floyd_warshall(m, e_idx)
        pairs = [(a, b) for a in names for b in names]
        got = graph_distances(graph, pairs)
        for (a, b), g in zip(pairs, got):
            assert g == int(want[idx[a], idx[b]])

    # MST vs exhaustive spanning-tree enumeration up to n=5
    for n in (2, 3, 4, 5):
        trees = all_spanning_trees(n)
        for _ in range(10):
            d = rng.uniform(0.5, 3.0, size=(n, n))
            d = 0.5 * (d + d.T)
            np.fill_diagonal(d, 0.0)
            best = min(sum(d[a, b] for a, b in t) for t in trees)
            got = mst(d)
            assert len(got) == n - 1
            assert sum(d[a, b] for a, b in got) == pytest.approx(best, abs=1e-12)

    # spearman vs rank-then-Pearson, ties included
    checked = 0
    while checked < 50:
        n = int(rng.integers(3, 60))
        x = rng.integers(0, 8, size=n).astype(float)
        y = x + rng.standard_normal(n)
        if len(set(x)) < 2 or len(set(y)) < 2:
            continue
        want = np.corrcoef(
            scipy.stats.rankdata(x, method="average"),
            scipy.stats.rankdata(y, method="average"),
        )[0, 1]
        assert abs(spearman(x, y) - want) < 1e-12
        checked += 1

    # rank_score vs brute-force sort on 20-node graphs
    for _ in range(20):
        n = 20
        d = rng.uniform(0, 1, size=(n, n))
        d = 0.5 * (d + d.T)
        np.fill_diagonal(d, 0.0)
        positives = [
            set(rng.choice(n, size=int(rng.integers(0, 4)), replace=False).tolist())
            for _ in range(n)
        ]
        got, med = rank_score(d, positives)
        want = np.full(n, np.nan)
        for i in range(n):
            pos = sorted(p for p in positives[i] if p != i)
            if not pos:
                continue
            others = [t for t in range(n) if t != i]
            ranks = scipy.stats.rankdata(d[i, others], method="average")
            want[i] = np.mean([ranks[others.index(p)] for p in pos])
        finite = want[~np.isnan(want)]
        want_med = float(np.median(finite)) if len(finite) else float("nan")
        assert np.array_equal(got, want, equal_nan=True)
        assert med == want_med


# --------------------------------------------------- 4: UUAS/control behavior

def exact_acts(sentences):
    blocks = [exact_tree_coords(s) for s in sentences]
    width = max(b.shape[1] for b in blocks)
    emb = np.zeros((sum(len(s) for s in sentences), width))
    r = 0
    for b in blocks:
        emb[r : r + b.shape[0], : b.shape[1]] = b
        r += b.shape[0]
    return ActivationMatrix(emb.astype(np.float32), element_ids(sentences))


def pooled_spearman(pred, gold_mat):
    iu = np.triu_indices(pred.shape[0], k=1)
    return spearman(pred[iu], gold_mat[iu].astype(float))


def test_criterion_04_exact_encoding_beats_linear_control():
    # bushy tree: 0 heads 1 and 2, each of which heads two leaves
    heads = [0, 1, 1, 2, 2, 3, 3]
    non_chain = DependencySentence(
        "bushy", [f"w{t}" for t in range(7)], heads, list(range(1, 8))
    )
    acts = exact_acts([non_chain])
    probe = Probe(B=np.eye(acts.k), probe_dim=acts.k)
    report = decode_uuas(probe, acts, [non_chain], list(acts.element_ids))
    assert report.aggregate == 1.0

    pred = pairwise_sq_distances(acts.data.astype(float) @ probe.B)
    sp_gold = pooled_spearman(pred, tree_distance_matrix(non_chain))
    sp_linear = pooled_spearman(pred, linear_tree_distances(7))
    assert sp_gold > sp_linear

    # chain tree: path length equals surface distance, so the two agree
    chain = DependencySentence(
        "chain", [f"w{t}" for t in range(7)], [0, 1, 2, 3, 4, 5, 6], list(range(1, 8))
    )
    acts_c = exact_acts([chain])
    pred_c = pairwise_sq_distances(acts_c.data.astype(float) @ np.eye(acts_c.k))
    sp_gold_c = pooled_spearman(pred_c, tree_distance_matrix(chain))
    sp_linear_c = pooled_spearman(pred_c, linear_tree_distances(7))
    assert sp_gold_c == sp_linear_c


# ------------------------------------------------------------------ 5: splitter

def test_criterion_05_annealed_split_balances_categories():
    # 3-level hierarchy: 8 top categories, 4 mid categories each, 500 leaves
    elements = [f"e{i:03d}" for i in range(500)]
    mids = []
    cursor = 0
    for j in range(32):
        size = 16 if j < 20 else 15
        mids.append(set(elements[cursor : cursor + size]))
        cursor += size
    assert cursor == 500
    tops = [set().union(*mids[4 * i : 4 * i + 4]) for i in range(8)]
    categories = tops + mids
    assert len(categories) == 40

    t0 = time.perf_counter()
    assign = sa_split(
        categories,
        test_fraction=0.2,
        iterations=1_000_000,
        cooling=0.999995,
        seed=0,
    )
    elapsed = time.perf_counter() - t0
    assert elapsed < 30.0

    initial_cost = assign.cost_trace[0][1]
    assert assign.final_cost <= 0.10 * initial_cost
    for members in categories:
        if len(members) < 20:
            continue
        frac = sum(1 for m in members if assign.labels[m] == "test") / len(members)
        assert 0.15 <= frac <= 0.25

    again = sa_split(
        categories,
        test_fraction=0.2,
        iterations=1_000_000,
        cooling=0.999995,
        seed=0,
    )
    assert again.labels == assign.labels


# ---------------------------------------------------------- 6: emergence fitting

def test_criterion_06_emergence_fits_and_data_gap():
    rng = np.random.default_rng(3)
    xs = np.linspace(5.0, 11.0, 25)
    fitted = {}
    for mu in (7.0, 8.0, 9.0):
        ys = 0.05 + 0.9 / (1.0 + np.exp(-(xs - mu) / 0.4))
        ys = ys + 0.01 * rng.standard_normal(len(xs))
        curve = fit_emergence(list(zip(10.0**xs, ys)))
        assert not curve.degenerate
        assert curve.mu == pytest.approx(mu, abs=0.1)
        point = emergence_point(curve, level=0.5)
        assert np.log10(point.words) == pytest.approx(mu, abs=0.1)
        fitted[mu] = curve.mu
    assert fitted[7.0] < fitted[8.0] < fitted[9.0]

    assert data_gap(1e9, 1e7) == 2.0
    bracket = [data_gap(w, 1e7) for w in (1e9, 1e10, 1e11)]
    assert min(bracket) == 2.0 and max(bracket) == 4.0


# --------------------------------------------- 7: alignment & circuit fixtures

def test_criterion_07_alignment_and_variance_partition():
    rng = np.random.default_rng(5)
    k, p = 64, 8

    B1 = rng.standard_normal((k, p))
    R = rng.standard_normal((p, p)) + 3.0 * np.eye(p)
    assert subspace_alignment(B1, B1 @ R) == pytest.approx(1.0, abs=1e-9)

    Q, _ = np.linalg.qr(rng.standard_normal((k, 2 * p)))
    assert subspace_alignment(Q[:, :p], Q[:, p:]) == pytest.approx(0.0, abs=1e-9)

    # random p-dim subspaces of R^k overlap by p/k on average
    trials = 300
    vals = np.empty(trials)
    for t in range(trials):
        vals[t] = subspace_alignment(
            rng.standard_normal((k, p)), rng.standard_normal((k, p))
        )
    se = vals.std(ddof=1) / np.sqrt(trials)
    assert abs(vals.mean() - p / k) <= 3 * se

    # syntax-only target: all credit lands on the syntactic block
    n = 400
    X_sem = rng.standard_normal((n, 6))
    X_syn = rng.standard_normal((n, 6))
    w = rng.standard_normal(6)
    y = X_syn @ w + 0.05 * rng.standard_normal(n)
    res = variance_partition(X_sem, X_syn, y)
    assert res.r2_syntax >= 0.9 * res.r2_total
    assert abs(res.r2_semantic) < 0.05

    # redundant subspace features add nothing beyond the univariate column
    u = rng.standard_normal(n)
    y2 = 2.0 * u + 0.1 * rng.standard_normal(n)
    X_sub = np.column_stack([u, -u])
    delta, r2_joint, r2_uni = incremental_r2(u, X_sub, y2)
    assert r2_uni > 0.9
    assert abs(delta) < 0.02


# ------------------------------------------------- 8: contrastive probe parity

def test_criterion_08_contrastive_parity(planted_run):
    fx, cfg_d, probe_d, heldout_d, _ = planted_run
    d_uuas = decode_uuas(probe_d, fx.acts, fx.test_sentences, fx.test_elements).aggregate
    d_rank = pooled_rank_median(probe_d, fx)
    d_sp = heldout_d.aggregate

    cfg_c = TrainConfig(
        probe_dim=32,
        learning_rate=5e-3,
        epochs=800,
        batch_spec="300 sentences",
        objective="contrastive",
        seed=0,
    )
    probe_c, _ = train_probe(cfg_c, fx.acts, fx.gold, (fx.train_elements, fx.val_elements))
    c_uuas = decode_uuas(probe_c, fx.acts, fx.test_sentences, fx.test_elements).aggregate
    c_rank = pooled_rank_median(probe_c, fx)
    c_sp = eval_distance_probe(probe_c, fx.acts, fx.gold, fx.test_elements).aggregate

    # topology: contrastive at least as good; metric values: distance wins
    assert c_uuas >= d_uuas
    assert c_rank <= d_rank
    assert d_sp > c_sp


# --------------------------------------------------- 9: determinism & formats

def conllu_text(sentences):
    chunks = []
    for s in sentences:
        rows = [f"# sent_id = {s.sentence_id}"]
        for tid, form, head in zip(s.token_ids, s.forms, s.heads):
            rows.append(f"{tid}\t{form}\t_\t_\t_\t_\t{head}\tdep\t_\t_")
        chunks.append("\n".join(rows))
    return "\n\n".join(chunks) + "\n"


def assert_dirs_byte_identical(d1: Path, d2: Path):
    names1 = sorted(p.name for p in d1.iterdir())
    names2 = sorted(p.name for p in d2.iterdir())
    assert names1 == names2
    for name in names1:
        assert filecmp.cmp(d1 / name, d2 / name, shallow=False), name


def test_criterion_09_reruns_byte_identical_and_act_roundtrip(tmp_path):
    fx = build_planted(fix_seed=3, sizes=[7] * 12, k=24)
    acts_dir = tmp_path / "acts"
    acts_dir.mkdir()
    write_tensor(fx.acts, acts_dir / "planted.act")
    (tmp_path / "gold.conllu").write_text(conllu_text(fx.sentences), encoding="utf-8")
    labels = {e: "train" for e in element_ids(fx.sentences[:9])}
    labels.update({e: "test" for e in element_ids(fx.sentences[9:])})
    (tmp_path / "split.json").write_text(json.dumps({"labels": labels}), encoding="utf-8")

    train1 = tmp_path / "train1"
    cfg = f"""
task = "syntax"
objective = "distance"
seed = 7
activations = "{acts_dir}/*.act"
gold = "{tmp_path}/gold.conllu"
split = "{tmp_path}/split.json"

[probe]
probe_dim = 2
learning_rate = 3e-3
epochs = 12
batch_spec = "12 sentences"

[eval]
probes = "{train1}/manifest.json"

[visualize]
probe = "{train1}/probe_layer0003.act"
"""
    cfg_path = tmp_path / "cfg.toml"
    cfg_path.write_text(cfg, encoding="utf-8")

    runner = CliRunner()

    def run(*args):
        result = runner.invoke(main, list(args), catch_exceptions=False)
        assert result.exit_code == 0, result.output
        return result

    run("train", "--config", str(cfg_path), "--out", str(train1))
    run("train", "--config", str(cfg_path), "--out", str(tmp_path / "train2"))
    assert_dirs_byte_identical(train1, tmp_path / "train2")

    run("eval", "--config", str(cfg_path), "--out", str(tmp_path / "eval1"))
    run("eval", "--config", str(cfg_path), "--out", str(tmp_path / "eval2"))
    assert_dirs_byte_identical(tmp_path / "eval1", tmp_path / "eval2")

    run("visualize", "--config", str(cfg_path), "--out", str(tmp_path / "viz1"))
    run("visualize", "--config", str(cfg_path), "--out", str(tmp_path / "viz2"))
    assert_dirs_byte_identical(tmp_path / "viz1", tmp_path / "viz2")

    # the three runs above produced CSV, JSON, SVG, and .act files
    produced = {p.suffix for d in (train1, tmp_path / "eval1", tmp_path / "viz1") for p in d.iterdir()}
    assert {".json", ".csv", ".svg", ".act"} <= produced

    # .act round-trip: bit-exact payload, byte-identical re-serialization
    rng = np.random.default_rng(17)
    mat = ActivationMatrix(
        rng.standard_normal((13, 5)).astype(np.float32),
        [f"e{i}" for i in range(13)],
        layer_index=2,
        checkpoint_words=150_000_000,
        source_model="roundtrip",
    )
    p1 = tmp_path / "a.act"
    p2 = tmp_path / "b.act"
    write_tensor(mat, p1)
    back = read_tensor(p1)
    assert back.data.dtype == np.float32
    assert back.data.tobytes() == mat.data.tobytes()
    assert list(back.element_ids) == list(mat.element_ids)
    assert back.layer_index == mat.layer_index
    assert back.checkpoint_words == mat.checkpoint_words
    assert back.source_model == mat.source_model
    write_tensor(back, p2)
    assert p1.read_bytes() == p2.read_bytes()
