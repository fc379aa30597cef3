"""Gold pairwise distances: dependency trees, hypernymy graphs, phoneme features.

Distances follow the linguistic definitions: tree path length in edges for
syntax, undirected shortest-path edge count on the hypernymy graph for
lexical semantics, and the count of differing articulatory feature values
for phonemes.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from importlib import resources

import numpy as np


class ConlluError(Exception):
    """Malformed CoNLL-U input; message carries the offending line number."""


@dataclass
class DependencySentence:
    sentence_id: str
    forms: list[str]
    heads: list[int]  # 0 = root, otherwise 1-based index of the head word
    token_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.token_ids:
            self.token_ids = list(range(1, len(self.forms) + 1))
        n = len(self.forms)
        if len(self.heads) != n:
            raise ValueError("forms and heads length mismatch")
        roots = [i for i, h in enumerate(self.heads) if h == 0]
        if len(roots) != 1:
            raise ValueError(
                f"sentence {self.sentence_id!r}: expected exactly one root, got {len(roots)}"
            )
        for i, h in enumerate(self.heads):
            if not 0 <= h <= n:
                raise ValueError(f"sentence {self.sentence_id!r}: head {h} out of range")
        # every node must reach the root; equivalent to acyclic given one root
        for i in range(n):
            seen = set()
            j = i
            while self.heads[j] != 0:
                if j in seen:
                    raise ValueError(f"sentence {self.sentence_id!r}: cyclic heads at word {i + 1}")
                seen.add(j)
                j = self.heads[j] - 1

    def __len__(self) -> int:
        return len(self.forms)

    def edges(self) -> set[frozenset[int]]:
        """Undirected tree edges over 0-based word positions."""
        return {
            frozenset((i, h - 1)) for i, h in enumerate(self.heads) if h != 0
        }


def parse_conllu(text: str) -> list[DependencySentence]:
    """Parse CoNLL-U text into dependency sentences.

    Multiword-token range lines ("a-b") and empty nodes (decimal ids) are
    skipped; comments set the sentence id via "# sent_id = ...".
    """
    sentences = []
    forms: list[str] = []
    heads: list[int] = []
    ids: list[int] = []
    word_lines: list[int] = []
    sent_id = None

    def flush():
        nonlocal forms, heads, ids, word_lines, sent_id
        if not forms:
            sent_id = None
            return
        name = sent_id if sent_id is not None else f"sent{len(sentences) + 1}"
        valid = set(ids) | {0}
        for pos, h in enumerate(heads):
            if h not in valid:
                raise ConlluError(
                    f"line {word_lines[pos]}: head {h} does not name a word id"
                )
        # word ids stay usable as 1..n positions once ranges/empties are gone
        remap = {tok: i + 1 for i, tok in enumerate(ids)}
        try:
            remapped = [0 if h == 0 else remap[h] for h in heads]
            sent = DependencySentence(name, forms, remapped, token_ids=list(ids))
        except ValueError as exc:
            raise ConlluError(f"line {word_lines[0]}: {exc}") from exc
        sentences.append(sent)
        forms, heads, ids, word_lines = [], [], [], []
        sent_id = None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\n")
        if not line.strip():
            flush()
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("sent_id"):
                _, _, value = body.partition("=")
                sent_id = value.strip() or sent_id
            continue
        cols = line.split("\t")
        if len(cols) != 10:
            raise ConlluError(f"line {lineno}: expected 10 columns, found {len(cols)}")
        tok_id = cols[0]
        if "-" in tok_id or "." in tok_id:
            continue  # multiword range / empty node
        try:
            idx = int(tok_id)
            head = int(cols[6])
        except ValueError as exc:
            raise ConlluError(f"line {lineno}: non-integer id or head: {exc}") from exc
        forms.append(cols[1])
        ids.append(idx)
        heads.append(head)
        word_lines.append(lineno)
    flush()
    return sentences


def tree_distance_matrix(sentence: DependencySentence) -> np.ndarray:
    """Edge counts along the unique tree path between every word pair."""
    n = len(sentence)
    adj = [[] for _ in range(n)]
    for i, h in enumerate(sentence.heads):
        if h != 0:
            adj[i].append(h - 1)
            adj[h - 1].append(i)
    dist = np.full((n, n), -1, dtype=np.int64)
    for src in range(n):
        dist[src, src] = 0
        queue = deque([src])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if dist[src, v] < 0:
                    dist[src, v] = dist[src, u] + 1
                    queue.append(v)
    return dist


def linear_tree_distances(n: int) -> np.ndarray:
    """Surface-order control: d(i, j) = |i - j|."""
    if n < 1:
        raise ValueError("n must be >= 1")
    idx = np.arange(n)
    return np.abs(idx[:, None] - idx[None, :]).astype(np.int64)


@dataclass
class SemanticGraph:
    """Hypernymy graph: directed child->parent edges plus an undirected view."""

    nodes: list[str]
    hypernym_edges: list[tuple[str, str]]  # (hyponym, hypernym)

    def __post_init__(self):
        self._node_set = set(self.nodes)
        undirected: dict[str, set[str]] = {n: set() for n in self.nodes}
        hyponyms: dict[str, set[str]] = {n: set() for n in self.nodes}
        for child, parent in self.hypernym_edges:
            if child == parent:
                raise ValueError(f"self-loop on {child!r}")
            for node in (child, parent):
                if node not in self._node_set:
                    self._node_set.add(node)
                    self.nodes.append(node)
                    undirected[node] = set()
                    hyponyms[node] = set()
            undirected[child].add(parent)
            undirected[parent].add(child)
            hyponyms[parent].add(child)
        self._undirected = undirected
        self._hyponyms = hyponyms

    def __contains__(self, node: str) -> bool:
        return node in self._node_set

    def neighbors(self, node: str) -> set[str]:
        """Nodes one hypernym/hyponym edge away (undirected)."""
        self._check(node)
        return set(self._undirected[node])

    def hyponyms_of(self, node: str) -> set[str]:
        self._check(node)
        return set(self._hyponyms[node])

    def leaves(self) -> set[str]:
        return {n for n in self.nodes if not self._hyponyms[n]}

    def _check(self, node: str):
        if node not in self._node_set:
            raise KeyError(f"unknown node {node!r}")

    def bfs_distances(self, source: str) -> dict[str, int]:
        """Shortest-path edge counts from source on the undirected view."""
        self._check(source)
        dist = {source: 0}
        queue = deque([source])
        while queue:
            u = queue.popleft()
            for v in self._undirected[u]:
                if v not in dist:
                    dist[v] = dist[u] + 1
                    queue.append(v)
        return dist


def load_edge_tsv(path) -> SemanticGraph:
    """Read "child<TAB>parent" hyponym->hypernym rows into a graph."""
    edges = []
    seen = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 2 tab-separated fields")
            pair = (parts[0], parts[1])
            if pair in seen:
                continue
            seen.add(pair)
            edges.append(pair)
    return SemanticGraph(nodes=[], hypernym_edges=edges)


def graph_distances(
    graph: SemanticGraph, pairs: list[tuple[str, str]]
) -> list[int | None]:
    """BFS path lengths for each queried pair; None marks unreachable pairs."""
    for a, b in pairs:
        graph._check(a)
        graph._check(b)
    cache: dict[str, dict[str, int]] = {}
    out: list[int | None] = []
    for a, b in pairs:
        if a not in cache:
            cache[a] = graph.bfs_distances(a)
        out.append(cache[a].get(b))
    return out


def category_members(graph: SemanticGraph, root: str) -> set[str]:
    """The root synset plus every synset reaching it through hypernymy."""
    graph._check(root)
    members = {root}
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for child in graph._hyponyms[u]:
            if child not in members:
                members.add(child)
                queue.append(child)
    return members


@dataclass
class PhonemeFeatureTable:
    """IPA symbol -> articulatory feature vector with entries in {-1, 0, +1}."""

    features: dict[str, np.ndarray]
    feature_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        lengths = {len(v) for v in self.features.values()}
        if len(lengths) > 1:
            raise ValueError(f"inconsistent feature vector lengths: {sorted(lengths)}")
        self.features = {s: np.asarray(v, dtype=np.int64) for s, v in self.features.items()}
        for sym, vec in self.features.items():
            bad = set(np.unique(vec)) - {-1, 0, 1}
            if bad:
                raise ValueError(f"symbol {sym!r} has feature values outside {{-1,0,1}}: {bad}")

    @property
    def n_features(self) -> int:
        return len(next(iter(self.features.values()))) if self.features else 0

    def __contains__(self, symbol: str) -> bool:
        return symbol in self.features


def load_feature_csv(path) -> PhonemeFeatureTable:
    """Read a "symbol,f1,...,fF" CSV into a feature table."""
    with open(path, "r", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        names = header[1:]
        feats = {}
        for row in reader:
            if not row:
                continue
            feats[row[0]] = np.array([int(v) for v in row[1:]], dtype=np.int64)
    return PhonemeFeatureTable(features=feats, feature_names=names)


def bundled_vowel_features() -> PhonemeFeatureTable:
    """American English vowel feature chart shipped with the package."""
    path = resources.files("geoprobe").joinpath("data/vowel_features.csv")
    with resources.as_file(path) as p:
        return load_feature_csv(p)


def phoneme_dissimilarity(p: str, q: str, table: PhonemeFeatureTable) -> int:
    """Number of articulatory features on which the two phonemes differ."""
    for sym in (p, q):
        if sym not in table:
            raise KeyError(f"unknown phoneme symbol {sym!r}")
    return int(np.count_nonzero(table.features[p] != table.features[q]))


def phoneme_distance_matrix(symbols: list[str], table: PhonemeFeatureTable) -> np.ndarray:
    mat = np.stack([table.features[s] for s in symbols])
    return np.count_nonzero(mat[:, None, :] != mat[None, :, :], axis=2).astype(np.int64)
