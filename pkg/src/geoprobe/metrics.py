"""Probe evaluation: rank correlations, tree decoding, and category scores.

Projected distances are always squared Euclidean after applying the probe,
matching the training objective.  Scores are grouped the way the datasets
are built: per sentence for syntax, per evaluation set for word and phoneme
inventories, and aggregated by mean (Spearman, UUAS) or median (rank
scores).  Groups whose predictions are constant cannot be rank-correlated;
they are excluded from the aggregate and counted in the report instead.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .gold import DependencySentence
from .probe import Probe
from .tensor_io import ActivationMatrix


class MetricError(ValueError):
    pass


class ConstantInputError(MetricError):
    pass


# ---------------------------------------------------------------------------
# rank machinery


def average_ranks(x) -> np.ndarray:
    """Ranks 1..n with ties sharing the mean of their positions."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise MetricError("ranks are defined for 1-D data")
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        # positions i..j (0-based) share rank mean(i+1 .. j+1)
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    """Pearson correlation of average ranks; errors on constant input."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise MetricError(f"length mismatch: {x.shape} vs {y.shape}")
    if len(x) < 2:
        raise MetricError("need at least 2 observations")
    rx = average_ranks(x)
    ry = average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    nx = float(np.sqrt(rx @ rx))
    ny = float(np.sqrt(ry @ ry))
    if nx == 0.0 or ny == 0.0:
        raise ConstantInputError("correlation undefined for constant input")
    return float((rx @ ry) / (nx * ny))


def spearman_null(x, n_draws: int = 1000, seed: int = 0) -> np.ndarray:
    """Spearman of x against shuffled copies of itself; a null reference."""
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64)
    out = np.empty(n_draws)
    for t in range(n_draws):
        out[t] = spearman(x, rng.permutation(x))
    return out


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    metric: str
    grouping: str
    group_scores: dict[str, float]
    group_sizes: dict[str, int]
    aggregate_kind: str = "mean"
    skipped_groups: int = 0
    probe_name: str = ""
    layer_index: int | None = None
    checkpoint_words: int | None = None
    source_model: str = ""
    notes: dict = field(default_factory=dict)

    @property
    def aggregate(self) -> float | None:
        if not self.group_scores:
            return None
        vals = np.array([self.group_scores[g] for g in sorted(self.group_scores)])
        return float(np.median(vals) if self.aggregate_kind == "median" else vals.mean())

    @property
    def n_elements(self) -> int:
        return int(sum(self.group_sizes.values()))

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "grouping": self.grouping,
            "aggregate": self.aggregate,
            "aggregate_kind": self.aggregate_kind,
            "n_groups": len(self.group_scores),
            "n_elements": self.n_elements,
            "skipped_groups": self.skipped_groups,
            "probe_name": self.probe_name,
            "layer_index": self.layer_index,
            "checkpoint_words": self.checkpoint_words,
            "source_model": self.source_model,
            "group_scores": {k: self.group_scores[k] for k in sorted(self.group_scores)},
            "group_sizes": {k: self.group_sizes[k] for k in sorted(self.group_sizes)},
            "notes": self.notes,
        }

    def save_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=1)
            fh.write("\n")

    def save_csv(self, path) -> None:
        """One row per group, flat columns, stable order for diffing."""
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(
                [
                    "metric",
                    "grouping",
                    "probe_name",
                    "layer_index",
                    "checkpoint_words",
                    "source_model",
                    "group_id",
                    "n_elements",
                    "score",
                ]
            )
            for gid in sorted(self.group_scores):
                w.writerow(
                    [
                        self.metric,
                        self.grouping,
                        self.probe_name,
                        "" if self.layer_index is None else self.layer_index,
                        "" if self.checkpoint_words is None else self.checkpoint_words,
                        self.source_model,
                        gid,
                        self.group_sizes.get(gid, ""),
                        "%.12g" % self.group_scores[gid],
                    ]
                )


@dataclass
class EvalGrouping:
    mode: str = "sentences"  # or "sets"
    set_size: int = 12
    seed: int = 0
    min_group: int = 3

    def __post_init__(self):
        if self.mode not in ("sentences", "sets"):
            raise MetricError(f"unknown grouping mode {self.mode!r}")


def pairwise_sq_distances(u: np.ndarray) -> np.ndarray:
    """Symmetric matrix of squared Euclidean distances between rows of u."""
    u = np.asarray(u, dtype=np.float64)
    sq = np.einsum("ij,ij->i", u, u)
    d = sq[:, None] + sq[None, :] - 2.0 * (u @ u.T)
    d = np.maximum(d, 0.0)
    np.fill_diagonal(d, 0.0)
    return 0.5 * (d + d.T)


def projected_sq_distances(probe: Probe, h: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances after applying the probe to activations."""
    return pairwise_sq_distances(np.asarray(h, dtype=np.float64) @ probe.B)


def _check_present(acts: ActivationMatrix, elements) -> None:
    missing = sorted(set(elements) - set(acts.element_ids))
    if missing:
        shown = ", ".join(missing[:8]) + ("..." if len(missing) > 8 else "")
        raise MetricError(f"{len(missing)} elements missing from activations: {shown}")


def _evaluation_sets(ids: list[str], set_size: int, seed: int, min_group: int):
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    for start in range(0, len(ids), set_size):
        chunk = [ids[t] for t in order[start : start + set_size]]
        if len(chunk) >= min_group:
            yield chunk


def eval_distance_probe(
    probe: Probe,
    acts: ActivationMatrix,
    gold,
    elements: list[str],
    grouping: EvalGrouping | None = None,
    probe_name: str = "",
) -> EvalReport:
    """Grouped Spearman between projected and gold distances.

    Sentence gold scores each sentence with at least ``min_group`` present
    words over all its word pairs.  Set gold partitions the elements into
    evaluation sets of ``set_size`` by a seeded shuffle and scores each set.
    """
    grouping = grouping or EvalGrouping(
        mode="sentences" if getattr(gold, "mode", "sets") == "sentences" else "sets"
    )
    _check_present(acts, elements)
    row = acts.row_index()
    h = acts.data.astype(np.float64)
    scores: dict[str, float] = {}
    sizes: dict[str, int] = {}
    skipped = 0

    if grouping.mode == "sentences":
        for group in gold.groups(set(elements)):
            if len(group) < grouping.min_group:
                continue
            gid = group[0].rsplit(":", 1)[0]
            rows = np.array([row[e] for e in group])
            dmat = pairwise_sq_distances(h[rows] @ probe.B)
            a, b = np.triu_indices(len(group), k=1)
            gold_d = gold.group_distances(group)[a, b]
            try:
                scores[gid] = spearman(dmat[a, b], gold_d)
                sizes[gid] = len(group)
            except ConstantInputError:
                skipped += 1
    else:
        ids = gold.universe(set(elements))
        for t, chunk in enumerate(
            _evaluation_sets(ids, grouping.set_size, grouping.seed, grouping.min_group)
        ):
            gid = f"set:{t:04d}"
            rows = np.array([row[e] for e in chunk])
            u = h[rows] @ probe.B
            pred, gold_d = [], []
            for a in range(len(chunk)):
                for b in range(a + 1, len(chunk)):
                    d = gold.distance(chunk[a], chunk[b])
                    if d is None:
                        continue
                    diff = u[a] - u[b]
                    pred.append(float(diff @ diff))
                    gold_d.append(d)
            if len(pred) < 2:
                skipped += 1
                continue
            try:
                scores[gid] = spearman(pred, gold_d)
                sizes[gid] = len(chunk)
            except ConstantInputError:
                skipped += 1

    return EvalReport(
        metric="spearman",
        grouping=grouping.mode,
        group_scores=scores,
        group_sizes=sizes,
        aggregate_kind="mean",
        skipped_groups=skipped,
        probe_name=probe_name,
        layer_index=acts.layer_index,
        checkpoint_words=acts.checkpoint_words,
        source_model=acts.source_model,
    )


# ---------------------------------------------------------------------------
# tree decoding


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[rb] = ra
        return True


def mst(distances: np.ndarray) -> set[tuple[int, int]]:
    """Kruskal minimum spanning tree; ties broken by smallest (i, j)."""
    d = np.asarray(distances, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise MetricError("distance matrix must be square")
    if not np.array_equal(d, d.T):
        raise MetricError("distance matrix must be symmetric")
    if not np.all(np.isfinite(d)):
        raise MetricError("distance matrix must be finite")
    n = d.shape[0]
    edges = sorted(
        ((d[i, j], i, j) for i in range(n) for j in range(i + 1, n)),
    )
    uf = _UnionFind(n)
    out: set[tuple[int, int]] = set()
    for w, i, j in edges:
        if uf.union(i, j):
            out.add((i, j))
            if len(out) == n - 1:
                break
    return out


def uuas(predicted_edges, gold: DependencySentence) -> float:
    """Fraction of gold tree edges present among the predicted edges."""
    n = len(gold)
    pred = {frozenset(e) for e in predicted_edges}
    if n <= 1:
        if pred:
            raise MetricError("single-word sentence admits no edges")
        return 1.0
    if len(pred) != n - 1:
        raise MetricError(f"expected {n - 1} edges, got {len(pred)}")
    return len(pred & gold.edges()) / (n - 1)


def decode_uuas(probe: Probe, acts: ActivationMatrix, sentences, elements) -> EvalReport:
    """MST-decode each fully present sentence and score edges against gold."""
    from .probe import SentenceGold

    _check_present(acts, elements)
    row = acts.row_index()
    h = acts.data.astype(np.float64)
    available = set(elements)
    scores: dict[str, float] = {}
    sizes: dict[str, int] = {}
    skipped = 0
    for sent in sorted(sentences, key=lambda s: s.sentence_id):
        ids = [SentenceGold.element_id(sent.sentence_id, t) for t in sent.token_ids]
        if len(ids) < 2 or any(e not in available for e in ids):
            skipped += 1
            continue
        rows = np.array([row[e] for e in ids])
        dmat = pairwise_sq_distances(h[rows] @ probe.B)
        scores[sent.sentence_id] = uuas(mst(dmat), sent)
        sizes[sent.sentence_id] = len(ids)
    return EvalReport(
        metric="uuas",
        grouping="sentences",
        group_scores=scores,
        group_sizes=sizes,
        aggregate_kind="mean",
        skipped_groups=skipped,
        layer_index=acts.layer_index,
        checkpoint_words=acts.checkpoint_words,
        source_model=acts.source_model,
    )


# ---------------------------------------------------------------------------
# graph topology scores


def rank_score(
    distances: np.ndarray, positives: list
) -> tuple[np.ndarray, float]:
    """Mean rank of each node's positives, aggregated by the median.

    For node i the other n-1 nodes are ranked by ascending distance (ties
    share an average rank); the node's score is the mean rank over its
    positive set.  Nodes with no positives are skipped (score NaN) and do
    not enter the median.
    """
    d = np.asarray(distances, dtype=np.float64)
    n = d.shape[0]
    if d.shape != (n, n):
        raise MetricError("distance matrix must be square")
    if len(positives) != n:
        raise MetricError("need one positive set per node")
    out = np.full(n, np.nan)
    for i in range(n):
        pos = [p for p in positives[i] if p != i]
        if not pos:
            continue
        others = np.array([t for t in range(n) if t != i])
        ranks = average_ranks(d[i, others])
        where = {t: r for t, r in zip(others, ranks)}
        out[i] = float(np.mean([where[p] for p in pos]))
    finite = out[~np.isnan(out)]
    med = float(np.median(finite)) if len(finite) else float("nan")
    return out, med


def knn_f1(
    train_emb: np.ndarray,
    train_ids: list[str],
    test_emb: np.ndarray,
    test_ids: list[str],
    categories: dict[str, set[str]],
    k: int = 5,
) -> dict[str, float]:
    """Per-category f1 of a k-nearest-neighbor membership vote.

    A test element is predicted inside a category when at least ceil(k/2)
    of its k nearest training elements (Euclidean, distance ties broken by
    element id) belong to it.  Categories with no predicted and no true
    positives score 1.0; no predicted but some true scores 0.0.
    """
    train_emb = np.asarray(train_emb, dtype=np.float64)
    test_emb = np.asarray(test_emb, dtype=np.float64)
    if len(train_ids) != train_emb.shape[0] or len(test_ids) != test_emb.shape[0]:
        raise MetricError("embedding row counts must match id lists")
    if len(train_ids) < k:
        raise MetricError(f"need at least k={k} training elements")
    need = (k + 1) // 2  # ceil(k/2): majority vote, 3 of 5 at the default k
    neighbor_ids: list[list[str]] = []
    for t in range(len(test_ids)):
        diff = train_emb - test_emb[t]
        dist = np.einsum("ij,ij->i", diff, diff)
        ranked = sorted(range(len(train_ids)), key=lambda a: (dist[a], train_ids[a]))
        neighbor_ids.append([train_ids[a] for a in ranked[:k]])
    out: dict[str, float] = {}
    for name in sorted(categories):
        members = categories[name]
        tp = fp = fn = 0
        for t, el in enumerate(test_ids):
            votes = sum(1 for nb in neighbor_ids[t] if nb in members)
            pred = votes >= need
            true = el in members
            if pred and true:
                tp += 1
            elif pred:
                fp += 1
            elif true:
                fn += 1
        if tp == 0:
            out[name] = 1.0 if (fp == 0 and fn == 0) else 0.0
        else:
            prec = tp / (tp + fp)
            rec = tp / (tp + fn)
            out[name] = 2.0 * prec * rec / (prec + rec)
    return out


def large_categories(categories: dict[str, set[str]], min_size: int = 100) -> dict[str, set[str]]:
    return {n: m for n, m in categories.items() if len(m) > min_size}


# ---------------------------------------------------------------------------
# controls and summaries


def linear_tree_control(
    probe: Probe, acts: ActivationMatrix, sentences, elements: list[str]
) -> tuple[EvalReport, EvalReport]:
    """Same projected distances scored against tree gold and |i-j| gold."""
    from .probe import SentenceGold

    gold = SentenceGold(sentences)
    report_tree = eval_distance_probe(
        probe, acts, gold, elements, EvalGrouping(mode="sentences")
    )
    linear = _LinearGold(sentences)
    report_linear = eval_distance_probe(
        probe, acts, linear, elements, EvalGrouping(mode="sentences")
    )
    report_linear.metric = "spearman_vs_linear"
    return report_tree, report_linear


class _LinearGold:
    """Surface-position distances |i-j| presented through the gold interface."""

    mode = "sentences"

    def __init__(self, sentences):
        from .probe import SentenceGold

        self._inner = SentenceGold(sentences)

    def groups(self, available):
        return self._inner.groups(available)

    def group_distances(self, group):
        sid = group[0].rsplit(":", 1)[0]
        sent = next(s for s in self._inner.sentences if s.sentence_id == sid)
        pos = {
            self._inner.element_id(sid, t): i for i, t in enumerate(sent.token_ids)
        }
        idx = np.array([pos[e] for e in group])
        return np.abs(idx[:, None] - idx[None, :]).astype(np.float64)


def category_centroids(
    emb: np.ndarray, ids: list[str], categories: dict[str, set[str]]
) -> dict[str, np.ndarray]:
    """Arithmetic mean of member embeddings per category."""
    emb = np.asarray(emb, dtype=np.float64)
    if emb.shape[0] != len(ids):
        raise MetricError("embedding rows must match id list")
    row = {e: i for i, e in enumerate(ids)}
    out = {}
    for name in sorted(categories):
        members = sorted(categories[name])
        if not members:
            raise MetricError(f"category {name!r} is empty")
        missing = [m for m in members if m not in row]
        if missing:
            raise MetricError(
                f"category {name!r} has members without embeddings: {missing[:5]}"
            )
        out[name] = emb[[row[m] for m in members]].mean(axis=0)
    return out
