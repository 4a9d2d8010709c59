"""Textual graph storage, neighbor sampling and ranking-task construction."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

PAD = "<pad>"


class GraphParseError(ValueError):
    pass


class GraphIntegrityError(ValueError):
    pass


class TaskConstructionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# vocabulary and documents
# ---------------------------------------------------------------------------


class Vocabulary:
    """Whitespace-token vocabulary. Index 0 is reserved for padding."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = [PAD]
        self.stoi: dict[str, int] = {PAD: 0}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        idx = self.stoi.get(token)
        if idx is None:
            idx = len(self.itos)
            self.itos.append(token)
            self.stoi[token] = idx
        return idx

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def encode(self, text: str) -> tuple[int, ...]:
        try:
            return tuple(self.stoi[t] for t in text.split())
        except KeyError as e:
            raise KeyError(f"token {e.args[0]!r} not in vocabulary") from None

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocabulary":
        # sorted so the index order does not depend on file order
        return cls(sorted({t for text in texts for t in text.split()}))

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text().splitlines()
        if not lines or lines[0] != PAD:
            raise GraphParseError(f"{path}: first vocabulary entry must be {PAD}")
        return cls(lines[1:])


@dataclass(frozen=True)
class Document:
    id: str
    tokens: tuple[int, ...]

    def __post_init__(self):
        if not self.tokens:
            raise ValueError(f"document {self.id!r} has no tokens")


@dataclass(frozen=True)
class TextGraph:
    """Immutable node store plus undirected adjacency.

    ``adj`` maps each id to a sorted tuple of neighbor ids.
    """

    nodes: Mapping[str, Document]
    adj: Mapping[str, tuple[str, ...]]
    vocab: Vocabulary
    max_len: int = 32

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def ids(self) -> list[str]:
        return list(self.nodes)

    def degree(self, node: str) -> int:
        return len(self.adj[node])

    def num_edges(self) -> int:
        return sum(len(v) for v in self.adj.values()) // 2

    def edges(self) -> list[tuple[str, str]]:
        order = {n: i for i, n in enumerate(self.nodes)}
        return [(u, v) for u in self.nodes for v in self.adj[u] if order[u] < order[v]]

    def validate(self) -> None:
        for u, nbrs in self.adj.items():
            if u not in self.nodes:
                raise GraphIntegrityError(f"adjacency for unknown node {u!r}")
            for v in nbrs:
                if v == u:
                    raise GraphIntegrityError(f"self-loop on {u!r}")
                if v not in self.nodes:
                    raise GraphIntegrityError(f"edge ({u!r}, {v!r}) references unknown node")
                if u not in self.adj.get(v, ()):
                    raise GraphIntegrityError(f"asymmetric edge ({u!r}, {v!r})")
        for d in self.nodes.values():
            if not d.tokens or len(d.tokens) > self.max_len:
                raise GraphIntegrityError(f"document {d.id!r} has bad length {len(d.tokens)}")
            if max(d.tokens) >= len(self.vocab) or min(d.tokens) < 1:
                raise GraphIntegrityError(f"document {d.id!r} has out-of-vocabulary token")


def make_graph(texts: Mapping[str, str], edges: Iterable[tuple[str, str]],
               max_len: int = 32, vocab: Vocabulary | None = None) -> TextGraph:
    """Build and validate a graph from raw texts and an undirected edge list."""
    vocab = vocab or Vocabulary.build(texts.values())
    nodes = {}
    for nid, text in texts.items():
        toks = vocab.encode(text)[:max_len]
        if not toks:
            raise GraphIntegrityError(f"node {nid!r} has empty text")
        nodes[nid] = Document(nid, toks)
    nbrs: dict[str, set[str]] = {n: set() for n in nodes}
    for u, v in edges:
        for x in (u, v):
            if x not in nodes:
                raise GraphIntegrityError(f"edge ({u!r}, {v!r}) references unknown node {x!r}")
        if u == v:
            continue
        nbrs[u].add(v)
        nbrs[v].add(u)
    g = TextGraph(nodes, {n: tuple(sorted(s)) for n, s in nbrs.items()}, vocab, max_len)
    g.validate()
    return g


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def read_nodes(path: str | Path) -> dict[str, str]:
    texts: dict[str, str] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                nid, text = rec["id"], rec["text"]
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise GraphParseError(f"{path}:{lineno}: malformed node record ({e})") from None
            if not isinstance(nid, str) or not isinstance(text, str):
                raise GraphParseError(f"{path}:{lineno}: id and text must be strings")
            if nid in texts:
                raise GraphParseError(f"{path}:{lineno}: duplicate node id {nid!r}")
            texts[nid] = text
    return texts


def read_edges(path: str | Path) -> list[tuple[str, str]]:
    edges = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not all(parts):
                raise GraphParseError(f"{path}:{lineno}: expected two tab-separated node ids")
            edges.append((parts[0], parts[1]))
    return edges


def load_graph(nodes_path: str | Path, edges_path: str | Path, max_len: int = 32,
               vocab: Vocabulary | None = None) -> TextGraph:
    return make_graph(read_nodes(nodes_path), read_edges(edges_path), max_len, vocab)


def write_graph(graph: TextGraph, nodes_path: str | Path, edges_path: str | Path) -> None:
    with open(nodes_path, "w") as fh:
        for d in graph.nodes.values():
            text = " ".join(graph.vocab.itos[t] for t in d.tokens)
            fh.write(json.dumps({"id": d.id, "text": text}) + "\n")
    with open(edges_path, "w") as fh:
        for u, v in graph.edges():
            fh.write(f"{u}\t{v}\n")


def read_splits(path: str | Path) -> dict[str, list[tuple[str, str]]]:
    out: dict[str, list[tuple[str, str]]] = {"train": [], "valid": [], "test": []}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                split, q, k = rec["split"], rec["query"], rec["key"]
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise GraphParseError(f"{path}:{lineno}: malformed split record ({e})") from None
            if split not in out:
                raise GraphParseError(f"{path}:{lineno}: unknown split {split!r}")
            out[split].append((q, k))
    return out


def write_splits(path: str | Path, splits: Mapping[str, Sequence[tuple[str, str]]]) -> None:
    with open(path, "w") as fh:
        for name in ("train", "valid", "test"):
            for q, k in splits.get(name, ()):
                fh.write(json.dumps({"query": q, "key": k, "split": name}) + "\n")


def split_edges(graph: TextGraph, fractions=(0.8, 0.1, 0.1),
                seed: int = 0) -> dict[str, list[tuple[str, str]]]:
    """Shuffle all edges (random orientation) into train/valid/test."""
    rng = np.random.default_rng(seed)
    edges = graph.edges()
    order = rng.permutation(len(edges))
    flips = rng.random(len(edges)) < 0.5
    oriented = [(edges[i][1], edges[i][0]) if flips[j] else edges[i]
                for j, i in enumerate(order)]
    n_train = int(round(fractions[0] * len(oriented)))
    n_valid = int(round(fractions[1] * len(oriented)))
    return {"train": oriented[:n_train],
            "valid": oriented[n_train:n_train + n_valid],
            "test": oriented[n_train + n_valid:]}


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NeighborList:
    owner: str
    neighbors: tuple[str, ...]


def neighbor_pool(graph: TextGraph, node: str,
                  cut_edge: tuple[str, str] | None = None) -> list[str]:
    """Sorted ids within two hops of ``node``, excluding itself.

    With ``cut_edge`` the walk treats that undirected edge as absent.
    """
    if node not in graph.nodes:
        raise KeyError(f"unknown node {node!r}")
    cut = frozenset(cut_edge) if cut_edge else None

    def nbrs(u):
        return [v for v in graph.adj[u] if cut is None or frozenset((u, v)) != cut]

    first = nbrs(node)
    pool = set(first)
    for u in first:
        pool.update(nbrs(u))
    pool.discard(node)
    return sorted(pool)


def _seed_for(seed: int, *parts: str) -> np.random.Generator:
    # string-derived stream so a node's sample never depends on call order
    key = [seed & 0xFFFFFFFF] + [b for p in parts for b in p.encode()]
    return np.random.default_rng(key)


def sample_neighbors(graph: TextGraph, node: str, cap: int = 50, seed: int = 0,
                     exclude: Iterable[str] = (),
                     cut_edge: tuple[str, str] | None = None) -> NeighborList:
    """Uniform sample without replacement of at most ``cap`` 1/2-hop neighbors."""
    excl = set(exclude)
    pool = [v for v in neighbor_pool(graph, node, cut_edge) if v not in excl]
    rng = _seed_for(seed, "nbr", node)
    picked = rng.choice(len(pool), size=min(cap, len(pool)), replace=False)
    return NeighborList(node, tuple(pool[i] for i in picked))


@dataclass(frozen=True)
class MatchTask:
    """One query, its positive key and sampled negatives, with neighbor lists.

    ``neighbors`` maps the query and every candidate key to its list.
    ``candidates`` is the positive followed by the negatives.
    """

    query: str
    positive_key: str
    negative_keys: tuple[str, ...]
    neighbors: Mapping[str, tuple[str, ...]] = field(hash=False, compare=True)

    @property
    def candidates(self) -> tuple[str, ...]:
        return (self.positive_key,) + self.negative_keys

    @property
    def id(self) -> str:
        return f"{self.query}|{self.positive_key}"

    def to_json(self) -> dict:
        return {"query": self.query, "positive_key": self.positive_key,
                "negative_keys": list(self.negative_keys),
                "neighbors": {k: list(v) for k, v in self.neighbors.items()}}

    @classmethod
    def from_json(cls, rec: Mapping) -> "MatchTask":
        return cls(rec["query"], rec["positive_key"], tuple(rec["negative_keys"]),
                   {k: tuple(v) for k, v in rec["neighbors"].items()})


def build_tasks(graph: TextGraph, positive_edges: Sequence[tuple[str, str]],
                num_negatives: int = 29, cap: int = 50, seed: int = 0) -> list[MatchTask]:
    """One task per positive edge ``(query, key)``.

    Negatives are drawn uniformly, per query, from nodes not adjacent to it.
    Neighbor pools are computed with the evaluated edge cut, and no candidate
    appears in the query's list nor the query in any candidate's list.
    """
    ids = graph.ids
    index = {n: i for i, n in enumerate(ids)}
    tasks = []
    for t, (q, k) in enumerate(positive_edges):
        if q not in graph.nodes or k not in graph.nodes or k not in graph.adj[q]:
            raise TaskConstructionError(f"positive edge ({q!r}, {k!r}) not in graph")
        blocked = np.zeros(len(ids), dtype=bool)
        blocked[index[q]] = True
        for v in graph.adj[q]:
            blocked[index[v]] = True
        eligible = np.flatnonzero(~blocked)
        if len(eligible) < num_negatives:
            raise TaskConstructionError(
                f"query {q!r} has {len(eligible)} eligible negatives, {num_negatives} requested")
        rng = _seed_for(seed, "neg", str(t), q, k)
        negs = tuple(ids[i] for i in rng.choice(eligible, size=num_negatives, replace=False))
        cands = (k,) + negs
        nbrs = {q: sample_neighbors(graph, q, cap, seed, exclude=cands,
                                    cut_edge=(q, k)).neighbors}
        for c in cands:
            nbrs[c] = sample_neighbors(graph, c, cap, seed, exclude=(q,),
                                       cut_edge=(q, k) if c == k else None).neighbors
        tasks.append(MatchTask(q, k, negs, nbrs))
    return tasks


def write_tasks(path: str | Path, tasks: Iterable[MatchTask]) -> None:
    with open(path, "w") as fh:
        for t in tasks:
            fh.write(json.dumps(t.to_json()) + "\n")


def read_tasks(path: str | Path) -> list[MatchTask]:
    with open(path) as fh:
        return [MatchTask.from_json(json.loads(line)) for line in fh if line.strip()]
