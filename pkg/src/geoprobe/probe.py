"""Linear geometric probes over activation matrices.

A probe is a single matrix B that maps k-dim activations into a p-dim
space.  Two objectives are supported.  The distance objective pushes
squared Euclidean distances in the projected space toward gold distances
(tree path lengths, graph path lengths, or feature-count dissimilarities).
The contrastive objective never sees the gold distance values: it only
pushes each anchor's neighbors exponentially closer than its non-neighbors,
so it can recover topology but not the metric.

Optimization is plain AMSGrad on the probe matrix, nothing else is
learned.  All sampling is driven by one seeded generator per training run,
so a (config, seed) pair pins the entire loss history.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import logsumexp, softmax

from .gold import (
    DependencySentence,
    PhonemeFeatureTable,
    SemanticGraph,
    phoneme_dissimilarity,
    tree_distance_matrix,
)
from .tensor_io import ActivationMatrix

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class ProbeError(ValueError):
    pass


_BATCH_RE = re.compile(
    r"^(\d+)\s+(?:sentences?|sets?\s+of\s+(\d+)\s+\w+)$", re.IGNORECASE
)


def parse_batch_spec(spec: str) -> tuple[int, int | None]:
    """Parse a batch spec string into (groups per batch, set size).

    Accepted forms: "300 sentences", "1 set of 200 phonemes",
    "300 sets of 12 words".  Set size is None for sentence batches, where
    the grouping comes from the corpus rather than from sampling.
    """
    m = _BATCH_RE.match(spec.strip())
    if not m:
        raise ProbeError(f"cannot parse batch spec {spec!r}")
    groups = int(m.group(1))
    size = int(m.group(2)) if m.group(2) else None
    if groups < 1 or (size is not None and size < 2):
        raise ProbeError(f"degenerate batch spec {spec!r}")
    return groups, size


@dataclass
class TrainConfig:
    probe_dim: int
    learning_rate: float = 1e-3
    epochs: int = 40
    init_scale: float = 1e-5
    batch_spec: str = "300 sentences"
    objective: str = "distance"
    negatives_per_anchor: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ProbeError("learning_rate must be positive")
        if self.epochs < 1:
            raise ProbeError("epochs must be at least 1")
        if self.objective not in ("distance", "contrastive"):
            raise ProbeError(f"unknown objective {self.objective!r}")
        parse_batch_spec(self.batch_spec)


@dataclass
class Probe:
    B: np.ndarray
    probe_dim: int
    config: TrainConfig | None = None
    final_train_loss: float | None = None
    final_val_loss: float | None = None

    def __post_init__(self):
        self.B = np.asarray(self.B, dtype=np.float64)
        if self.B.ndim != 2:
            raise ProbeError("B must be a matrix")
        k, p = self.B.shape
        if p != self.probe_dim:
            raise ProbeError(f"B has {p} columns, probe_dim says {self.probe_dim}")
        if p > k:
            raise ProbeError(f"probe_dim {p} exceeds input dim {k}")
        if not np.all(np.isfinite(self.B)):
            raise ProbeError("B contains non-finite entries")

    @property
    def input_dim(self) -> int:
        return self.B.shape[0]

    def project(self, h: np.ndarray) -> np.ndarray:
        return np.asarray(h, dtype=np.float64) @ self.B


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    vmax: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, k: int, p: int) -> "OptimizerState":
        return cls(np.zeros((k, p)), np.zeros((k, p)), np.zeros((k, p)))


def init_probe(k: int, p: int, seed: int, init_scale: float = 1e-5) -> Probe:
    if not 1 <= p <= k:
        raise ProbeError(f"need 1 <= p <= k, got p={p}, k={k}")
    rng = np.random.default_rng(seed)
    B = rng.uniform(-init_scale, init_scale, size=(k, p))
    return Probe(B=B, probe_dim=p)


def amsgrad_step(
    state: OptimizerState,
    B: np.ndarray,
    grad: np.ndarray,
    lr: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> tuple[OptimizerState, np.ndarray]:
    """One AMSGrad update with bias correction; returns the mutated pair."""
    if grad.shape != B.shape:
        raise ProbeError("gradient shape does not match probe shape")
    state.step += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    np.maximum(state.vmax, state.v, out=state.vmax)
    m_hat = state.m / (1.0 - beta1**state.step)
    v_hat = state.vmax / (1.0 - beta2**state.step)
    B = B - lr * m_hat / (np.sqrt(v_hat) + eps)
    return state, B


# ---------------------------------------------------------------------------
# losses and gradients


def _projected_sq(h: np.ndarray, B: np.ndarray, i_idx, j_idx) -> tuple:
    delta = h[i_idx] - h[j_idx]
    u = delta @ B
    return delta, u, np.einsum("ij,ij->i", u, u)


def distance_loss(
    B: np.ndarray, h: np.ndarray, pairs: tuple[np.ndarray, np.ndarray], targets: np.ndarray
) -> float:
    """Mean absolute error between squared projected distances and targets."""
    i_idx, j_idx = pairs
    if len(i_idx) == 0:
        raise ProbeError("empty pair set")
    _, _, sq = _projected_sq(np.asarray(h, dtype=np.float64), B, i_idx, j_idx)
    return float(np.mean(np.abs(sq - targets)))


def distance_loss_gradient(
    B: np.ndarray, h: np.ndarray, pairs: tuple[np.ndarray, np.ndarray], targets: np.ndarray
) -> np.ndarray:
    """Subgradient of distance_loss wrt B; zero residuals contribute zero."""
    i_idx, j_idx = pairs
    if len(i_idx) == 0:
        raise ProbeError("empty pair set")
    h = np.asarray(h, dtype=np.float64)
    delta, u, sq = _projected_sq(h, B, i_idx, j_idx)
    s = np.sign(sq - targets)
    # d|r|/dB per pair = sign(r) * 2 * delta^T (delta B); mean over pairs
    return (2.0 / len(i_idx)) * delta.T @ (s[:, None] * u)


def contrastive_loss(
    B: np.ndarray,
    h: np.ndarray,
    anchor: int,
    positives: Sequence[int],
    negatives: Sequence[int],
) -> float:
    """-log of positive-to-negative Boltzmann mass in the projected space.

    Both sides score an element j by exp(-||(h_a - h_j)B||^2); the loss is
    -log(sum over positives / sum over negatives), computed via logsumexp.
    """
    pos = np.asarray(positives, dtype=int)
    neg = np.asarray(negatives, dtype=int)
    if len(pos) == 0 or len(neg) == 0:
        raise ProbeError("positive and negative sets must be nonempty")
    if anchor in pos or anchor in neg:
        raise ProbeError("anchor may not appear in its own comparison sets")
    if np.intersect1d(pos, neg).size:
        raise ProbeError("positive and negative sets overlap")
    h = np.asarray(h, dtype=np.float64)
    _, _, sp = _projected_sq(h, B, np.full(len(pos), anchor), pos)
    _, _, sn = _projected_sq(h, B, np.full(len(neg), anchor), neg)
    return float(logsumexp(-sn) - logsumexp(-sp))


def contrastive_loss_gradient(
    B: np.ndarray,
    h: np.ndarray,
    anchor: int,
    positives: Sequence[int],
    negatives: Sequence[int],
) -> np.ndarray:
    pos = np.asarray(positives, dtype=int)
    neg = np.asarray(negatives, dtype=int)
    if len(pos) == 0 or len(neg) == 0:
        raise ProbeError("positive and negative sets must be nonempty")
    h = np.asarray(h, dtype=np.float64)
    dp, up, sp = _projected_sq(h, B, np.full(len(pos), anchor), pos)
    dn, un, sn = _projected_sq(h, B, np.full(len(neg), anchor), neg)
    # dloss/ds_p = +softmax(-s_p); dloss/ds_n = -softmax(-s_n); ds/dB = 2 d^T u
    wp = softmax(-sp)
    wn = softmax(-sn)
    return 2.0 * dp.T @ (wp[:, None] * up) - 2.0 * dn.T @ (wn[:, None] * un)


# ---------------------------------------------------------------------------
# gold adapters: map gold structures onto activation rows


class SentenceGold:
    """Dependency trees as training targets; elements are "sent:token"."""

    mode = "sentences"

    def __init__(self, sentences: Iterable[DependencySentence]):
        self.sentences = sorted(sentences, key=lambda s: s.sentence_id)
        self._dist: dict[str, np.ndarray] = {}

    @staticmethod
    def element_id(sentence_id: str, token_id: int) -> str:
        return f"{sentence_id}:{token_id}"

    def _matrix(self, sent: DependencySentence) -> np.ndarray:
        if sent.sentence_id not in self._dist:
            self._dist[sent.sentence_id] = tree_distance_matrix(sent)
        return self._dist[sent.sentence_id]

    def groups(self, available: set[str]) -> list[list[str]]:
        out = []
        for sent in self.sentences:
            ids = [
                self.element_id(sent.sentence_id, t)
                for t in sent.token_ids
                if self.element_id(sent.sentence_id, t) in available
            ]
            if len(ids) >= 2:
                out.append(ids)
        return out

    def group_distances(self, group: list[str]) -> np.ndarray:
        sid = group[0].rsplit(":", 1)[0]
        sent = next(s for s in self.sentences if s.sentence_id == sid)
        pos = {self.element_id(sid, t): i for i, t in enumerate(sent.token_ids)}
        idx = [pos[e] for e in group]
        return self._matrix(sent)[np.ix_(idx, idx)].astype(np.float64)

    def group_neighbors(self, group: list[str]) -> list[list[int]]:
        # positives for the contrastive objective: tree-adjacent tokens
        d = self.group_distances(group)
        return [list(np.nonzero(d[i] == 1)[0]) for i in range(len(group))]


class GraphGold:
    """Undirected graph distances over elements named by their node ids."""

    mode = "sets"

    def __init__(self, graph: SemanticGraph):
        self.graph = graph
        self._cache: dict[str, dict[str, int]] = {}

    def universe(self, available: set[str]) -> list[str]:
        return sorted(available & set(self.graph.nodes))

    def _from(self, a: str) -> dict[str, int]:
        if a not in self._cache:
            self._cache[a] = self.graph.bfs_distances(a)
        return self._cache[a]

    def distance(self, a: str, b: str) -> float | None:
        d = self._from(a).get(b)
        return None if d is None else float(d)

    def neighbors(self, a: str) -> list[str]:
        return sorted(self.graph.neighbors(a))


class PhonemeGold:
    """Articulatory-feature dissimilarities; elements carry symbol labels."""

    mode = "sets"

    def __init__(self, table: PhonemeFeatureTable, labels: dict[str, str]):
        self.table = table
        self.labels = dict(labels)

    def universe(self, available: set[str]) -> list[str]:
        return sorted(
            e for e in available if self.labels.get(e) in self.table.features
        )

    def distance(self, a: str, b: str) -> float:
        return float(
            phoneme_dissimilarity(self.labels[a], self.labels[b], self.table)
        )

    def neighbors(self, a: str) -> list[str]:
        # contrastive positives: other realizations of the same phoneme
        sym = self.labels[a]
        return sorted(
            e for e, s in self.labels.items() if s == sym and e != a
        )


# ---------------------------------------------------------------------------
# training


def _set_pairs(
    gold, ids: list[str], rows: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ii, jj, dd = [], [], []
    for a in range(len(ids)):
        for b in range(a + 1, len(ids)):
            d = gold.distance(ids[a], ids[b])
            if d is not None:
                ii.append(rows[a])
                jj.append(rows[b])
                dd.append(d)
    return np.asarray(ii, int), np.asarray(jj, int), np.asarray(dd, float)


class _DistanceBatcher:
    """Yields (i_idx, j_idx, targets) row-index batches for one epoch."""

    def __init__(self, gold, acts: ActivationMatrix, elements: list[str], cfg):
        self.gold = gold
        self.acts = acts
        self.groups_per_batch, self.set_size = parse_batch_spec(cfg.batch_spec)
        self.row = acts.row_index()
        if gold.mode == "sentences":
            if self.set_size is not None:
                raise ProbeError(
                    "set-sampling batch spec cannot be used with sentence gold"
                )
            self.groups = gold.groups(set(elements))
            if not self.groups:
                raise ProbeError("no usable sentences among training elements")
            self.pairs = []
            for g in self.groups:
                rows = np.array([self.row[e] for e in g])
                d = gold.group_distances(g)
                a, b = np.triu_indices(len(g), k=1)
                self.pairs.append((rows[a], rows[b], d[a, b]))
        else:
            if self.set_size is None:
                raise ProbeError("sentence batch spec cannot be used with set gold")
            self.universe = gold.universe(set(elements))
            if len(self.universe) < self.set_size:
                raise ProbeError(
                    f"need at least {self.set_size} elements, "
                    f"have {len(self.universe)}"
                )

    def epoch(self, rng: np.random.Generator):
        if self.gold.mode == "sentences":
            order = rng.permutation(len(self.pairs))
            for start in range(0, len(order), self.groups_per_batch):
                chunk = [self.pairs[t] for t in order[start : start + self.groups_per_batch]]
                ii = np.concatenate([c[0] for c in chunk])
                jj = np.concatenate([c[1] for c in chunk])
                dd = np.concatenate([c[2] for c in chunk])
                if len(ii):
                    yield ii, jj, dd
        else:
            # an epoch in set-sampled mode is one batch of fresh sets
            ii, jj, dd = [], [], []
            for _ in range(self.groups_per_batch):
                pick = rng.choice(len(self.universe), size=self.set_size, replace=False)
                ids = [self.universe[t] for t in pick]
                rows = np.array([self.row[e] for e in ids])
                a, b, d = _set_pairs(self.gold, ids, rows)
                ii.append(a), jj.append(b), dd.append(d)
            ii = np.concatenate(ii)
            if len(ii) == 0:
                raise ProbeError("sampled sets produced no comparable pairs")
            yield ii, np.concatenate(jj), np.concatenate(dd)

    def all_pairs(self, elements: list[str]):
        """Every comparable pair among the given elements, for evaluation."""
        if self.gold.mode == "sentences":
            groups = self.gold.groups(set(elements))
            ii, jj, dd = [], [], []
            for g in groups:
                rows = np.array([self.row[e] for e in g])
                d = self.gold.group_distances(g)
                a, b = np.triu_indices(len(g), k=1)
                ii.append(rows[a]), jj.append(rows[b]), dd.append(d[a, b])
            if not ii:
                return None
            return np.concatenate(ii), np.concatenate(jj), np.concatenate(dd)
        ids = self.gold.universe(set(elements))
        if len(ids) < 2:
            return None
        rows = np.array([self.row[e] for e in ids])
        out = _set_pairs(self.gold, ids, rows)
        return out if len(out[0]) else None


class _ComparisonBlock:
    """Flattened per-anchor comparisons for vectorized contrastive math.

    Rows of (anchor, other) pairs, each marked positive or negative and
    tagged with its anchor's segment index, so softmax weights and
    log-sum-exps reduce per anchor without python-level loops.
    """

    def __init__(self, ai, aj, positive, segment, n_anchors):
        self.ai = np.asarray(ai, int)
        self.aj = np.asarray(aj, int)
        self.positive = np.asarray(positive, bool)
        self.segment = np.asarray(segment, int)
        self.n_anchors = int(n_anchors)

    def _segment_lse(self, vals, mask):
        # logsumexp of vals within (segment, mask); returns per-segment LSE
        # and per-row softmax weights (zero outside the mask)
        m = np.full(self.n_anchors, -np.inf)
        np.maximum.at(m, self.segment[mask], vals[mask])
        shifted = np.zeros(len(vals))
        shifted[mask] = np.exp(vals[mask] - m[self.segment[mask]])
        tot = np.zeros(self.n_anchors)
        np.add.at(tot, self.segment[mask], shifted[mask])
        lse = m + np.log(tot, where=tot > 0, out=np.full(self.n_anchors, -np.inf))
        w = np.zeros(len(vals))
        w[mask] = shifted[mask] / tot[self.segment[mask]]
        return lse, w

    def loss_and_gradient(self, B, h, want_gradient=True):
        delta = h[self.ai] - h[self.aj]
        u = delta @ B
        s = np.einsum("ij,ij->i", u, u)
        lse_p, w_p = self._segment_lse(-s, self.positive)
        lse_n, w_n = self._segment_lse(-s, ~self.positive)
        loss = float(np.mean(lse_n - lse_p))
        if not want_gradient:
            return loss, None
        coef = np.where(self.positive, w_p, -w_n)
        grad = (2.0 / self.n_anchors) * delta.T @ (coef[:, None] * u)
        return loss, grad


class _ContrastiveBatcher:
    """Builds comparison blocks per batch of anchors.

    Each training epoch draws one positive per anchor (uniformly, so every
    neighbor gets pulled in across epochs; a softmax over the full positive
    set would starve all but the nearest neighbor of gradient) plus up to
    negatives_per_anchor sampled negatives.  Sentence gold draws negatives
    from the anchor's own sentence; set gold from the whole element pool.
    """

    def __init__(self, gold, acts: ActivationMatrix, elements: list[str], cfg):
        self.cfg = cfg
        self.row = acts.row_index()
        self.groups_per_batch, self.set_size = parse_batch_spec(cfg.batch_spec)
        self.anchors: list[tuple[int, np.ndarray, np.ndarray]] = []
        if gold.mode == "sentences":
            for g in gold.groups(set(elements)):
                rows = np.array([self.row[e] for e in g])
                for i, nbr in enumerate(gold.group_neighbors(g)):
                    if not nbr:
                        continue
                    others = np.array(
                        [t for t in range(len(g)) if t != i and t not in nbr], int
                    )
                    if len(others) == 0:
                        continue
                    self.anchors.append((rows[i], rows[np.array(nbr)], rows[others]))
            self.batch_anchors = max(self.groups_per_batch, 1)
        else:
            pool = gold.universe(set(elements))
            pool_set = set(pool)
            rowvec = {e: self.row[e] for e in pool}
            for e in pool:
                nbr = [t for t in gold.neighbors(e) if t in pool_set]
                if not nbr:
                    continue
                nbr_set = set(nbr)
                others = [t for t in pool if t != e and t not in nbr_set]
                if not others:
                    continue
                self.anchors.append(
                    (
                        rowvec[e],
                        np.array([rowvec[t] for t in nbr]),
                        np.array([rowvec[t] for t in others]),
                    )
                )
            self.batch_anchors = max(self.groups_per_batch * (self.set_size or 1), 1)
        if not self.anchors:
            raise ProbeError("no anchor has both a neighbor and a non-neighbor")

    def _block(self, entries, rng: np.random.Generator | None) -> _ComparisonBlock:
        ai, aj, positive, segment = [], [], [], []
        for seg, (a, pos, neg) in enumerate(entries):
            if rng is not None:
                pos = pos[[rng.integers(len(pos))]]
                n_neg = min(self.cfg.negatives_per_anchor, len(neg))
                neg = neg[rng.choice(len(neg), size=n_neg, replace=False)]
            for j in pos:
                ai.append(a), aj.append(j), positive.append(True), segment.append(seg)
            for j in neg:
                ai.append(a), aj.append(j), positive.append(False), segment.append(seg)
        return _ComparisonBlock(ai, aj, positive, segment, len(entries))

    def epoch(self, rng: np.random.Generator):
        order = rng.permutation(len(self.anchors))
        for start in range(0, len(order), self.batch_anchors):
            entries = [self.anchors[t] for t in order[start : start + self.batch_anchors]]
            yield self._block(entries, rng)

    def fixed_eval_block(self) -> _ComparisonBlock:
        # validation scores the loss over each anchor's full comparison
        # sets: no sampling, so the number is stable across epochs
        return self._block(self.anchors, None)


def train_probe(
    cfg: TrainConfig,
    acts: ActivationMatrix,
    gold,
    split: tuple[list[str], list[str]],
) -> tuple[Probe, list[dict]]:
    """Train one probe; returns the best-validation-loss probe and history.

    ``split`` is a (train_elements, validation_elements) pair of element-id
    lists.  Every epoch shuffles batches under the run seed; the returned
    probe is the snapshot with the lowest validation loss, which for the
    contrastive objective is measured on a sampled comparison set frozen at
    the start of the run.
    """
    train_el, val_el = list(split[0]), list(split[1])
    if not train_el:
        raise ProbeError("empty training element list")
    h = acts.data.astype(np.float64)
    probe = init_probe(acts.k, cfg.probe_dim, cfg.seed, cfg.init_scale)
    B = probe.B
    state = OptimizerState.zeros(*B.shape)
    rng = np.random.default_rng(cfg.seed)
    history: list[dict] = []
    best_B = B.copy()
    best_val = np.inf

    if cfg.objective == "distance":
        batcher = _DistanceBatcher(gold, acts, train_el, cfg)
        val_pairs = batcher.all_pairs(val_el) if val_el else None

        def val_loss(cur):
            if val_pairs is None:
                return None
            ii, jj, dd = val_pairs
            return distance_loss(cur, h, (ii, jj), dd)

        for epoch in range(cfg.epochs):
            losses = []
            for ii, jj, dd in batcher.epoch(rng):
                losses.append(distance_loss(B, h, (ii, jj), dd))
                grad = distance_loss_gradient(B, h, (ii, jj), dd)
                state, B = amsgrad_step(state, B, grad, cfg.learning_rate)
            vl = val_loss(B)
            history.append(
                {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": vl}
            )
            if vl is not None and vl < best_val:
                best_val, best_B = vl, B.copy()
    else:
        batcher = _ContrastiveBatcher(gold, acts, train_el, cfg)
        val_block = None
        if val_el:
            try:
                val_block = _ContrastiveBatcher(gold, acts, val_el, cfg).fixed_eval_block()
            except ProbeError:
                val_block = None
        for epoch in range(cfg.epochs):
            losses = []
            for block in batcher.epoch(rng):
                loss, grad = block.loss_and_gradient(B, h)
                losses.append(loss)
                state, B = amsgrad_step(state, B, grad, cfg.learning_rate)
            vl = (
                val_block.loss_and_gradient(B, h, want_gradient=False)[0]
                if val_block is not None
                else None
            )
            history.append(
                {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": vl}
            )
            if vl is not None and vl < best_val:
                best_val, best_B = vl, B.copy()

    if best_val is np.inf:
        # no validation set: fall back to the final weights
        best_B = B
        best_val = None
    out = Probe(
        B=best_B,
        probe_dim=cfg.probe_dim,
        config=cfg,
        final_train_loss=history[-1]["train_loss"],
        final_val_loss=best_val if best_val is not None else None,
    )
    return out, history


def learning_rate_grid(log_spaced: bool = False, n: int = 20) -> np.ndarray:
    """20 learning rates from 1e-7 to 1e-2, linear by default."""
    if log_spaced:
        return np.geomspace(1e-7, 1e-2, n)
    return np.linspace(1e-7, 1e-2, n)


@dataclass
class GridResult:
    best_config: TrainConfig
    best_probe: Probe
    table: list[dict] = field(default_factory=list)


def grid_search(
    base_cfg: TrainConfig,
    acts: ActivationMatrix,
    gold,
    split: tuple[list[str], list[str]],
    grid: Sequence[float] | None = None,
    log_spaced: bool = False,
) -> GridResult:
    """Train one probe per learning rate; lowest validation loss wins.

    Ties break toward the smaller rate.  Failures under a given rate are
    re-raised with the rate attached rather than silently skipped.
    """
    if not split[1]:
        raise ProbeError("grid search needs a nonempty validation group")
    rates = list(grid) if grid is not None else list(learning_rate_grid(log_spaced))
    table = []
    best = None
    for lr in rates:
        cfg = TrainConfig(**{**asdict(base_cfg), "learning_rate": float(lr)})
        try:
            probe, history = train_probe(cfg, acts, gold, split)
        except ProbeError as err:
            raise ProbeError(f"lr={lr:g}: {err}") from err
        score = probe.final_val_loss
        table.append(
            {
                "learning_rate": float(lr),
                "val_loss": score,
                "train_loss": probe.final_train_loss,
            }
        )
        if score is not None and (best is None or score < best[0]):
            best = (score, cfg, probe)
    if best is None:
        raise ProbeError("no learning rate produced a validation score")
    return GridResult(best_config=best[1], best_probe=best[2], table=table)


# ---------------------------------------------------------------------------
# probe artifacts


def save_probe(probe: Probe, path, history: list[dict] | None = None) -> None:
    """Write the matrix as an activation-format tensor plus a JSON sidecar."""
    from .tensor_io import write_tensor

    k = probe.input_dim
    mat = ActivationMatrix(
        data=probe.B.astype(np.float32),
        element_ids=[f"dim:{i}" for i in range(k)],
        layer_index=-1,
        checkpoint_words=None,
        source_model="probe",
    )
    write_tensor(mat, path)
    sidecar = {
        "probe_dim": probe.probe_dim,
        "config": asdict(probe.config) if probe.config else None,
        "final_train_loss": probe.final_train_loss,
        "final_val_loss": probe.final_val_loss,
        "loss_history": history,
    }
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_probe(path) -> Probe:
    from .tensor_io import read_tensor

    mat = read_tensor(path)
    sidecar_path = str(path) + ".json"
    config = None
    train_loss = val_loss = None
    try:
        with open(sidecar_path, encoding="utf-8") as fh:
            sidecar = json.load(fh)
        if sidecar.get("config"):
            config = TrainConfig(**sidecar["config"])
        train_loss = sidecar.get("final_train_loss")
        val_loss = sidecar.get("final_val_loss")
    except FileNotFoundError:
        pass
    return Probe(
        B=mat.data.astype(np.float64),
        probe_dim=mat.k,
        config=config,
        final_train_loss=train_loss,
        final_val_loss=val_loss,
    )
