"""Lightweight neighbor selector: ranking, truncation, contrastive training.

One-step mode scores each neighbor on its own against the counterpart.
Multi-step mode grows the selection greedily, scoring each remaining
neighbor together with the max-pooled vectors of those already chosen.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .encoders import LightEncoder, encode_light, encode_many
from .graphstore import Document, TextGraph
from .supervision import PairDataset, PairRecord

log = logging.getLogger(__name__)


class SelectorMode(str, enum.Enum):
    ONE_STEP = "one-step"
    MULTI_STEP = "multi-step"


class ConfigurationError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class SelectorModel(nn.Module):
    def __init__(self, vocab_size: int, dim: int = 64, window: int = 3,
                 mode: SelectorMode | str = SelectorMode.ONE_STEP,
                 dtype: torch.dtype = torch.float32, seed: int = 0):
        super().__init__()
        self.mode = SelectorMode(mode)
        self.dim = dim
        self.config = {"vocab_size": vocab_size, "dim": dim, "window": window,
                       "mode": self.mode.value, "dtype": str(dtype).replace("torch.", "")}
        self.encoder = LightEncoder(vocab_size, dim, window, dtype=dtype, seed=seed)
        if self.mode is SelectorMode.MULTI_STEP:
            g = torch.Generator().manual_seed(seed + 1)
            w = torch.randn(dim, 2 * dim, generator=g, dtype=dtype) / np.sqrt(2 * dim)
            w[:, dim:] += torch.eye(dim, dtype=dtype)  # start close to one-step ranking
            self.phi_w = nn.Parameter(w)
            self.phi_b = nn.Parameter(torch.zeros(dim, dtype=dtype))
        else:
            self.phi_w = self.phi_b = None

    @property
    def dtype(self) -> torch.dtype:
        return self.encoder.embedding.dtype

    def encode(self, docs: Sequence[Document]) -> torch.Tensor:
        return encode_many(list(docs), self.encoder)

    def phi(self, owner: torch.Tensor, pooled: torch.Tensor) -> torch.Tensor:
        if self.phi_w is None:
            raise ConfigurationError("one-step selector has no combine layer")
        if owner.dim() < pooled.dim():
            owner = owner.expand_as(pooled)
        return nx.affine(torch.cat([owner, pooled], dim=-1), self.phi_w, self.phi_b)

    def save(self, path: str | Path) -> None:
        nx.save_tensors(path, dict(self.named_parameters()), {"model": "selector", **self.config})

    @classmethod
    def load(cls, path: str | Path) -> "SelectorModel":
        header, tensors = nx.load_tensors(path)
        if header.get("model") != "selector":
            raise ValueError(f"{path} is not a selector checkpoint")
        m = cls(header["vocab_size"], header["dim"], header["window"], header["mode"],
                dtype=getattr(torch, header["dtype"]))
        with torch.no_grad():
            for name, p in m.named_parameters():
                p.copy_(tensors[name])
        return m


def _sides(Q: Document, K: Document, side: str) -> tuple[Document, Document]:
    if side == "query":
        return Q, K
    if side == "key":
        return K, Q
    raise ValueError(f"side must be 'query' or 'key', got {side!r}")


def rank_one_step(model: SelectorModel, Q: Document, K: Document,
                  side_neighbors: Sequence[Document], side: str = "query") -> torch.Tensor:
    """Score of each neighbor: its light encoding dotted with the counterpart's."""
    if not side_neighbors:
        raise ValueError("rank_one_step needs at least one neighbor")
    _, counterpart = _sides(Q, K, side)
    with torch.no_grad():
        rc = encode_light(counterpart, model.encoder)
        return torch.stack([nx.dot(encode_light(n, model.encoder), rc) for n in side_neighbors])


def greedy_select(model: SelectorModel, r_owner: torch.Tensor, r_counterpart: torch.Tensor,
                  r_neighbors: torch.Tensor, k: int) -> list[tuple[int, float]]:
    """Greedy multi-step selection over encoded neighbors.

    Returns ``(index, score)`` in selection order; the first maximum wins ties.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    n = r_neighbors.shape[0]
    remaining = list(range(n))
    pooled = None
    out = []
    with torch.no_grad():
        for _ in range(min(k, n)):
            cand = r_neighbors[remaining]
            state = cand if pooled is None else torch.maximum(pooled, cand)
            scores = model.phi(r_owner, state) @ r_counterpart
            best = int(torch.argmax(scores))
            if not torch.isfinite(scores[best]):
                break
            j = remaining.pop(best)
            out.append((j, float(scores[best])))
            pooled = r_neighbors[j] if pooled is None else torch.maximum(pooled, r_neighbors[j])
    return out


def rank_multi_step(model: SelectorModel, Q: Document, K: Document,
                    side_neighbors: Sequence[Document], k: int,
                    side: str = "query") -> list[tuple[int, float]]:
    if model.mode is not SelectorMode.MULTI_STEP:
        raise ConfigurationError("rank_multi_step needs a multi-step selector")
    owner, counterpart = _sides(Q, K, side)
    if not side_neighbors:
        return []
    with torch.no_grad():
        r = model.encode([owner, counterpart, *side_neighbors])
    return greedy_select(model, r[0], r[1], r[2:], k)


def sim(model: SelectorModel, Q: Document, K: Document) -> float:
    with torch.no_grad():
        return float(nx.dot(encode_light(Q, model.encoder), encode_light(K, model.encoder)))


# ---------------------------------------------------------------------------
# truncation
# ---------------------------------------------------------------------------


class TruncationKind(str, enum.Enum):
    FIXED_K = "FixedK"
    ABSOLUTE = "AbsoluteThreshold"
    OVERALL = "OverallRanking"
    RELEVANCE = "RelevanceThreshold"


_PARAM = {TruncationKind.FIXED_K: "k", TruncationKind.ABSOLUTE: "tau",
          TruncationKind.OVERALL: "p", TruncationKind.RELEVANCE: None}


@dataclass(frozen=True)
class TruncationPolicy:
    kind: TruncationKind
    k: int | None = None
    tau: float | None = None
    p: int | None = None
    hard_cap: int = 20

    def __post_init__(self):
        object.__setattr__(self, "kind", TruncationKind(self.kind))
        want = _PARAM[self.kind]
        for name in ("k", "tau", "p"):
            given = getattr(self, name) is not None
            if given != (name == want):
                raise ConfigurationError(
                    f"{self.kind.value} takes {want or 'no parameter'}, got {name}={getattr(self, name)}")
        if self.hard_cap < 1:
            raise ConfigurationError("hard_cap must be >= 1")
        if (self.k is not None and self.k < 0) or (self.p is not None and self.p < 0):
            raise ConfigurationError("k and p must be non-negative")

    @classmethod
    def fixed_k(cls, k: int, hard_cap: int = 20) -> "TruncationPolicy":
        return cls(TruncationKind.FIXED_K, k=k, hard_cap=hard_cap)

    @classmethod
    def absolute(cls, tau: float, hard_cap: int = 20) -> "TruncationPolicy":
        return cls(TruncationKind.ABSOLUTE, tau=tau, hard_cap=hard_cap)

    @classmethod
    def overall(cls, p: int, hard_cap: int = 20) -> "TruncationPolicy":
        return cls(TruncationKind.OVERALL, p=p, hard_cap=hard_cap)

    @classmethod
    def relevance(cls, hard_cap: int = 20) -> "TruncationPolicy":
        return cls(TruncationKind.RELEVANCE, hard_cap=hard_cap)

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if v is not None}
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TruncationPolicy":
        return cls(**dict(d))


@dataclass(frozen=True)
class Selection:
    """Selected positions in a neighbor list, best first, with their scores."""
    indices: tuple[int, ...]
    scores: tuple[float, ...]


@dataclass(frozen=True)
class UnifiedList:
    """Scores of several documents' neighbors ranked together; ``member`` is ours."""
    groups: Sequence[Sequence[float]]
    member: int


@dataclass(frozen=True)
class SelectionResult:
    query: tuple[tuple[str, float], ...]
    key: tuple[tuple[str, float], ...]
    policy: TruncationPolicy

    def to_json(self, task: str) -> list[dict]:
        return [{"task": task, "side": side, "selected": [n for n, _ in sel],
                 "scores": [s for _, s in sel], "policy": self.policy.to_dict()}
                for side, sel in (("query", self.query), ("key", self.key))]


def _order(scores: np.ndarray) -> np.ndarray:
    # descending by score, lower index first on ties
    return np.argsort(-scores, kind="stable")


def _select(scores: np.ndarray, keep: np.ndarray, cap: int) -> Selection:
    order = [i for i in _order(scores) if keep[i]][:cap]
    return Selection(tuple(int(i) for i in order), tuple(float(scores[i]) for i in order))


def truncate_group(groups: Sequence[Sequence[float]], policy: TruncationPolicy) -> list[Selection]:
    """Overall ranking: keep entries in the global top ``p`` across all groups."""
    if policy.kind is not TruncationKind.OVERALL:
        raise ConfigurationError("truncate_group applies to OverallRanking only")
    arrays = [np.asarray(g, dtype=float) for g in groups]
    flat = np.concatenate(arrays) if arrays else np.zeros(0)
    top = _order(flat)[:policy.p]
    keep = np.zeros(len(flat), dtype=bool)
    keep[top] = True
    out, start = [], 0
    for a in arrays:
        out.append(_select(a, keep[start:start + len(a)], policy.hard_cap))
        start += len(a)
    return out


def truncate(scores: Sequence[float], policy: TruncationPolicy,
             context: float | UnifiedList | None = None) -> Selection:
    s = np.asarray(scores, dtype=float)
    kind = policy.kind
    if kind is TruncationKind.FIXED_K:
        keep = np.zeros(len(s), dtype=bool)
        keep[_order(s)[:policy.k]] = True
    elif kind is TruncationKind.ABSOLUTE:
        keep = s > policy.tau
    elif kind is TruncationKind.RELEVANCE:
        if context is None or isinstance(context, UnifiedList):
            raise ConfigurationError("RelevanceThreshold needs sim(Q, K) as context")
        keep = s > float(context)
    else:
        if not isinstance(context, UnifiedList):
            raise ConfigurationError("OverallRanking needs the unified score list as context")
        if not np.array_equal(np.asarray(context.groups[context.member], dtype=float), s):
            raise ConfigurationError("context member does not hold these scores")
        return truncate_group(context.groups, policy)[context.member]
    return _select(s, keep, policy.hard_cap)


# ---------------------------------------------------------------------------
# cached scoring over a whole graph
# ---------------------------------------------------------------------------


class SelectorIndex:
    """Light encodings of every graph node, for fast batched ranking."""

    def __init__(self, model: SelectorModel, graph: TextGraph):
        self.model, self.graph = model, graph
        self.index = {n: i for i, n in enumerate(graph.ids)}
        with torch.no_grad():
            self.r = model.encode([graph.nodes[n] for n in graph.ids])

    def vec(self, nid: str) -> torch.Tensor:
        return self.r[self.index[nid]]

    def rows(self, ids: Sequence[str]) -> torch.Tensor:
        return self.r[[self.index[n] for n in ids]]

    def one_step(self, neighbors: Sequence[str], counterpart: str) -> np.ndarray:
        if not neighbors:
            return np.zeros(0)
        return (self.rows(neighbors) @ self.vec(counterpart)).double().numpy()

    def multi_step(self, owner: str, neighbors: Sequence[str], counterpart: str,
                   k: int) -> list[tuple[int, float]]:
        if not neighbors or k < 1:
            return []
        return greedy_select(self.model, self.vec(owner), self.vec(counterpart),
                             self.rows(neighbors), k)

    def sim(self, a: str, b: str) -> float:
        return float(self.vec(a) @ self.vec(b))


# ---------------------------------------------------------------------------
# loss and training
# ---------------------------------------------------------------------------


def pairwise_loss(delta: torch.Tensor, mode: str = "log") -> torch.Tensor:
    """Mean contrastive loss of score gaps ``delta`` = r(N+) - r(N-)."""
    if mode == "log":
        return -nn.functional.logsigmoid(delta).mean()
    if mode == "literal":
        return -torch.sigmoid(delta).mean()
    raise ValueError(f"unknown loss mode {mode!r}")


@dataclass(frozen=True)
class SelectorPair:
    owner: Document
    counterpart: Document
    positive: Document
    negative: Document
    prefix: tuple[Document, ...] = ()


def _neighbor_scores(model: SelectorModel, r_owner, r_cp, r_nbr, prefix_rows, prefix_mask):
    """Scores of neighbors (B, d); multi-step pools them with their prefixes."""
    if model.mode is SelectorMode.ONE_STEP:
        return (r_nbr * r_cp).sum(-1)
    filled = prefix_rows.masked_fill(~prefix_mask.unsqueeze(-1), float("-inf"))
    pooled = torch.maximum(filled.max(1).values, r_nbr) if prefix_rows.shape[1] else r_nbr
    return (model.phi(r_owner, pooled) * r_cp).sum(-1)


def pair_deltas(model: SelectorModel, docs: Sequence[Document], owner: Sequence[int],
                counterpart: Sequence[int], positive: Sequence[int], negative: Sequence[int],
                prefix: Sequence[Sequence[int]]) -> torch.Tensor:
    r = model.encode(docs)
    L = max((len(p) for p in prefix), default=0)
    table = torch.full((len(owner), L), -1, dtype=torch.long)
    for i, p in enumerate(prefix):
        table[i, :len(p)] = torch.as_tensor(list(p), dtype=torch.long)
    mask = table >= 0
    rows = r[table.clamp(min=0)]
    ro, rc = r[list(owner)], r[list(counterpart)]
    pos = _neighbor_scores(model, ro, rc, r[list(positive)], rows, mask)
    neg = _neighbor_scores(model, ro, rc, r[list(negative)], rows, mask)
    return pos - neg


def selector_loss(model: SelectorModel, pair: SelectorPair, mode: str = "log") -> torch.Tensor:
    docs = [pair.owner, pair.counterpart, pair.positive, pair.negative, *pair.prefix]
    delta = pair_deltas(model, docs, [0], [1], [2], [3], [list(range(4, len(docs)))])
    return pairwise_loss(delta, mode)


@dataclass
class SelectorConfig:
    mode: str = "one-step"
    dim: int = 64
    window: int = 3
    epochs: int = 5
    batch_size: int = 128
    lr: float = 1e-3
    loss_mode: str = "log"
    holdout: float = 0.1
    dtype: str = "float32"
    seed: int = 0
    max_steps: int | None = None


@dataclass
class SelectorRun:
    model: SelectorModel
    losses: list[float] = field(default_factory=list)
    heldout_accuracy: float | None = None
    heldout_pairs: int = 0


def _batch(graph: TextGraph, records: Sequence[PairRecord]):
    index: dict[str, int] = {}

    def ix(n):
        return index.setdefault(n, len(index))

    cols = ([ix(r.owner) for r in records], [ix(r.counterpart) for r in records],
            [ix(r.positive) for r in records], [ix(r.negative) for r in records],
            [[ix(p) for p in r.prefix] for r in records])
    return [graph.nodes[n] for n in index], cols


def pairwise_accuracy(model: SelectorModel, graph: TextGraph, records: Sequence[PairRecord],
                      chunk: int = 2048) -> float:
    """Fraction of pairs the model orders correctly (strictly)."""
    if not records:
        raise ValueError("no pairs to score")
    hits = 0
    with torch.no_grad():
        for s in range(0, len(records), chunk):
            docs, cols = _batch(graph, records[s:s + chunk])
            hits += int((pair_deltas(model, docs, *cols) > 0).sum())
    return hits / len(records)


def train_selector(graph: TextGraph, pairs: PairDataset,
                   config: SelectorConfig = SelectorConfig()) -> SelectorRun:
    if not len(pairs):
        raise ValueError("train_selector needs at least one pair")
    torch.manual_seed(config.seed)
    model = SelectorModel(graph.vocab_size, config.dim, config.window, config.mode,
                          dtype=getattr(torch, config.dtype), seed=config.seed)
    train, held = pairs.split(config.holdout, config.seed) if config.holdout > 0 else (pairs, PairDataset())
    if not len(train):
        train = pairs
    records = train.records
    store = nx.ParamStore.from_module(model)
    rng = np.random.default_rng(config.seed)
    run = SelectorRun(model)
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(records))
        for s in range(0, len(order), config.batch_size):
            docs, cols = _batch(graph, [records[i] for i in order[s:s + config.batch_size]])
            loss = pairwise_loss(pair_deltas(model, docs, *cols), config.loss_mode)
            if not torch.isfinite(loss):
                raise TrainingError(f"selector loss diverged at step {step}")
            store.zero_grad()
            loss.backward()
            nx.adam_step(store, lr=config.lr)
            run.losses.append(loss.item())
            step += 1
            if config.max_steps is not None and step >= config.max_steps:
                break
        else:
            continue
        break
    if len(held):
        run.heldout_accuracy = pairwise_accuracy(model, graph, held.records)
        run.heldout_pairs = len(held)
        log.info("selector held-out pairwise accuracy %.3f on %d pairs",
                 run.heldout_accuracy, len(held))
    return run
