"""Dataset construction: unisemic wordlists and annealed train/test splits.

Two jobs live here.  The first is carving a list of unambiguous words out
of a lemma inventory: every surviving word names exactly one concept and
every surviving concept is named by exactly one of its lemmas, so distances
between concepts transfer directly to distances between word tokens.  The
second is splitting graph-structured vocabularies into train and test sets
so that every category keeps roughly the same held-out fraction, which a
uniform random split does not guarantee for small categories.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .gold import SemanticGraph


class LexiconError(ValueError):
    pass


@dataclass
class Lexicon:
    """Lemma inventory: concept id -> candidate lemmas, plus corpus counts.

    ``frequencies`` maps lemma -> count and may omit lemmas, which then
    count as frequency 0.
    """

    synsets: dict[str, list[str]]
    frequencies: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for sid, lemmas in self.synsets.items():
            if not lemmas:
                raise LexiconError(f"synset {sid!r} has an empty lemma list")
            if len(set(lemmas)) != len(lemmas):
                raise LexiconError(f"synset {sid!r} repeats a lemma")

    def frequency(self, lemma: str) -> float:
        return self.frequencies.get(lemma, 0.0)


def load_lexicon(path) -> Lexicon:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    return Lexicon(
        synsets={str(k): list(v) for k, v in raw["synsets"].items()},
        frequencies={str(k): float(v) for k, v in raw.get("frequencies", {}).items()},
    )


def _uniqueness_fixpoint(lists: dict[str, set[str]]) -> None:
    # Repeatedly: a synset holding at least one lemma that no other synset
    # holds claims those lemmas and drops the rest of its list.  Dropping
    # shared lemmas can make them unique elsewhere, hence the loop.
    owners: dict[str, set[str]] = defaultdict(set)
    for sid, lemmas in lists.items():
        for lemma in lemmas:
            owners[lemma].add(sid)
    changed = True
    while changed:
        changed = False
        for sid in sorted(lists):
            lemmas = lists[sid]
            unique = {l for l in lemmas if len(owners[l]) == 1}
            if unique and len(unique) < len(lemmas):
                for lemma in lemmas - unique:
                    owners[lemma].discard(sid)
                lists[sid] = unique
                changed = True


def unisemic_wordlist(
    lexicon: Lexicon, graph: SemanticGraph | None = None
) -> dict[str, str]:
    """Assign to each synset a single lemma no other synset uses.

    Runs the uniqueness fixpoint, prunes leaf synsets that still share all
    their lemmas (they only block words from more useful synsets), reruns
    the fixpoint, then keeps every synset with a uniquely-held lemma and
    picks its highest-frequency one.  Returns synset id -> lemma.  When
    ``graph`` is None every synset counts as a leaf for the pruning step.
    """
    lists = {sid: set(lemmas) for sid, lemmas in lexicon.synsets.items()}
    _uniqueness_fixpoint(lists)

    def owners_of() -> dict[str, set[str]]:
        owners: dict[str, set[str]] = defaultdict(set)
        for sid, lemmas in lists.items():
            for lemma in lemmas:
                owners[lemma].add(sid)
        return owners

    owners = owners_of()
    pruned = []
    for sid in sorted(lists):
        is_leaf = graph is None or (
            sid not in graph.nodes or not graph.hyponyms_of(sid)
        )
        has_unique = any(len(owners[l]) == 1 for l in lists[sid])
        if is_leaf and not has_unique:
            pruned.append(sid)
    for sid in pruned:
        del lists[sid]
    if pruned:
        _uniqueness_fixpoint(lists)
        owners = owners_of()

    out: dict[str, str] = {}
    for sid in sorted(lists):
        unique = [l for l in lists[sid] if len(owners[l]) == 1]
        if not unique:
            continue
        # highest corpus frequency wins; ties broken alphabetically so the
        # result does not depend on set iteration order
        out[sid] = max(sorted(unique), key=lexicon.frequency)
    return out


def filter_vocabulary(wordlist: dict[str, str], allowed: set[str]) -> dict[str, str]:
    """Drop entries whose lemma uses any word outside ``allowed``.

    Multiword lemmas are split on whitespace and every piece must be
    allowed.  Idempotent: filtering twice with the same set is a no-op.
    """
    return {
        sid: lemma
        for sid, lemma in wordlist.items()
        if all(part in allowed for part in lemma.split())
    }


@dataclass
class SplitAssignment:
    """Train/test labels for a set of elements, with split diagnostics."""

    labels: dict[str, str]
    test_fraction: float
    final_cost: float = 0.0
    cost_trace: list[tuple[int, float]] = field(default_factory=list)

    def __post_init__(self):
        bad = {v for v in self.labels.values()} - {"train", "test"}
        if bad:
            raise ValueError(f"labels must be 'train' or 'test', got {sorted(bad)}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie strictly between 0 and 1")

    def test_elements(self) -> list[str]:
        return sorted(e for e, v in self.labels.items() if v == "test")

    def train_elements(self) -> list[str]:
        return sorted(e for e, v in self.labels.items() if v == "train")

    def category_fractions(
        self, categories: dict[str, set[str]]
    ) -> dict[str, float]:
        out = {}
        for name, members in categories.items():
            if not members:
                continue
            t = sum(1 for m in members if self.labels[m] == "test")
            out[name] = t / len(members)
        return out

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.labels, fh, sort_keys=True, indent=0)
            fh.write("\n")


def load_split(path, test_fraction: float = 0.2) -> SplitAssignment:
    """Read labels from a flat mapping or a file with a ``labels`` key."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    labels = raw["labels"] if isinstance(raw.get("labels"), dict) else raw
    return SplitAssignment(labels=dict(labels), test_fraction=test_fraction)


def split_cost(assign: SplitAssignment, categories: list[set[str]]) -> float:
    """Sum over categories of (test count - target test count)^2.

    The target for a category of size c is ``test_fraction * c``; a split
    is good when every category is held out at close to the global rate.
    """
    total = 0.0
    for members in categories:
        t = sum(1 for m in members if assign.labels[m] == "test")
        r = t - assign.test_fraction * len(members)
        total += r * r
    return total


def sa_split(
    categories: list[set[str]],
    test_fraction: float = 0.2,
    iterations: int = 1_000_000,
    cooling: float = 0.999995,
    initial_temperature: float = 1.0,
    seed: int = 0,
    trace_every: int = 100_000,
) -> SplitAssignment:
    """Simulated-annealing train/test split balanced across categories.

    Elements are the union of all categories (an element may sit in several,
    and all of its memberships move together).  Starts from an independent
    Bernoulli(test_fraction) assignment, then proposes single-element flips;
    a flip is accepted when it lowers the cost or with probability
    exp(-delta/temperature) otherwise, and the temperature decays by
    ``cooling`` every iteration.
    """
    if not categories:
        raise ValueError("need at least one category")
    elements = sorted(set().union(*categories))
    n = len(elements)
    index = {e: i for i, e in enumerate(elements)}
    member_of: list[list[int]] = [[] for _ in range(n)]
    for j, members in enumerate(categories):
        if not members:
            raise ValueError(f"category {j} is empty")
        for m in members:
            member_of[index[m]].append(j)

    rng = np.random.default_rng(seed)
    in_test = rng.random(n) < test_fraction
    targets = np.array([test_fraction * len(c) for c in categories])
    t_counts = np.zeros(len(categories))
    for i in range(n):
        if in_test[i]:
            for j in member_of[i]:
                t_counts[j] += 1

    cost = float(np.sum((t_counts - targets) ** 2))
    temp = initial_temperature
    trace = [(0, cost)]

    # per-iteration RNG calls dominate runtime at 1e6 steps, so draw in blocks
    block = 65536
    done = 0
    while done < iterations:
        take = min(block, iterations - done)
        picks = rng.integers(0, n, size=take)
        us = rng.random(take)
        for b in range(take):
            i = picks[b]
            sign = -1.0 if in_test[i] else 1.0
            delta = 0.0
            for j in member_of[i]:
                r = t_counts[j] - targets[j]
                delta += 2.0 * sign * r + 1.0
            if delta < 0.0 or us[b] < np.exp(-delta / temp):
                in_test[i] = not in_test[i]
                for j in member_of[i]:
                    t_counts[j] += sign
                cost += delta
            temp *= cooling
            done += 1
            if done % trace_every == 0 or done == iterations:
                trace.append((done, cost))

    labels = {e: ("test" if in_test[i] else "train") for e, i in index.items()}
    return SplitAssignment(
        labels=labels,
        test_fraction=test_fraction,
        final_cost=cost,
        cost_trace=trace,
    )


def carve_validation(
    assign: SplitAssignment, fraction: float = 0.1, seed: int = 0
) -> tuple[list[str], list[str]]:
    """Split the train side into (train, validation) element lists.

    The split itself only produces train/test labels; probe training still
    needs a held-out slice for model selection, so a seeded shuffle peels
    off ``fraction`` of the train elements (at least one when possible).
    """
    train = assign.train_elements()
    if len(train) < 2:
        return train, []
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(train))
    n_val = max(1, int(round(fraction * len(train))))
    val_idx = set(order[:n_val].tolist())
    tr = [e for i, e in enumerate(train) if i not in val_idx]
    va = [e for i, e in enumerate(train) if i in val_idx]
    return tr, va
