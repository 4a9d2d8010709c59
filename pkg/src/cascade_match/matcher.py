"""Graph-based matching network: neighbor aggregation, scoring, training."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .encoders import HeavyEncoder, encode_many
from .graphstore import Document, MatchTask, TextGraph

log = logging.getLogger(__name__)

_MASKED = -1e30


class AggregatorKind(str, enum.Enum):
    GAT = "GAT"
    MEAN = "Mean"
    MAX = "Max"
    ATTN = "Attn"
    CP = "CP"


ORDER_INVARIANT = frozenset(AggregatorKind)


class TrainingError(RuntimeError):
    pass


class MatchModel(nn.Module):
    def __init__(self, vocab_size: int, kind: AggregatorKind | str = AggregatorKind.CP,
                 dim: int = 64, layers: int = 2, heads: int = 4, max_len: int = 32,
                 dtype: torch.dtype = torch.float32, seed: int = 0):
        super().__init__()
        self.kind = AggregatorKind(kind)
        self.dim = dim
        self.config = {"vocab_size": vocab_size, "kind": self.kind.value, "dim": dim,
                       "layers": layers, "heads": heads, "max_len": max_len,
                       "dtype": str(dtype).replace("torch.", "")}
        self.encoder = HeavyEncoder(vocab_size, dim, layers, heads, max_len, dtype=dtype, seed=seed)
        g = torch.Generator().manual_seed(seed + 1)
        # center half starts near identity so early scores track text similarity
        w = torch.randn(dim, 2 * dim, generator=g, dtype=dtype) / math.sqrt(2 * dim)
        w[:, :dim] += torch.eye(dim, dtype=dtype)
        self.combine_w = nn.Parameter(w)
        self.combine_b = nn.Parameter(torch.zeros(dim, dtype=dtype))

    @property
    def dtype(self) -> torch.dtype:
        return self.combine_w.dtype

    def encode(self, docs: Sequence[Document]) -> torch.Tensor:
        return encode_many(list(docs), self.encoder)

    def save(self, path: str | Path) -> None:
        nx.save_tensors(path, dict(self.named_parameters()),
                        {"model": "matcher", **self.config})

    @classmethod
    def load(cls, path: str | Path) -> "MatchModel":
        header, tensors = nx.load_tensors(path)
        if header.get("model") != "matcher":
            raise ValueError(f"{path} is not a matcher checkpoint")
        dtype = getattr(torch, header["dtype"])
        m = cls(header["vocab_size"], header["kind"], header["dim"], header["layers"],
                header["heads"], header["max_len"], dtype=dtype)
        with torch.no_grad():
            for name, p in m.named_parameters():
                p.copy_(tensors[name])
        return m


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


def _combine(model: MatchModel, center: torch.Tensor, pooled: torch.Tensor) -> torch.Tensor:
    return nx.relu(nx.affine(nx.concat(center, pooled), model.combine_w, model.combine_b))


def _masked_weights(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return nx.softmax(logits.masked_fill(~mask, _MASKED), dim=-1) * mask


def aggregate_batch(model: MatchModel, center: torch.Tensor, nbrs: torch.Tensor,
                    mask: torch.Tensor, counterpart: torch.Tensor | None = None,
                    kind: AggregatorKind | None = None) -> torch.Tensor:
    """Aggregate ``center`` (..., d) with ``nbrs`` (..., n, d) under ``mask`` (..., n).

    Leading dimensions broadcast; ``counterpart`` (..., d) is needed for CP.
    Rows of ``nbrs`` outside the mask must be zero.
    """
    kind = AggregatorKind(kind or model.kind)
    d = center.shape[-1]
    if nbrs.shape[-1] != d or (counterpart is not None and counterpart.shape[-1] != d):
        raise nx.DimensionError(f"aggregate: vectors must all have dimension {d}")
    maskf = mask.to(center.dtype)
    count = maskf.sum(-1, keepdim=True)
    if kind is AggregatorKind.GAT:
        logits = torch.cat([(center * center).sum(-1, keepdim=True),
                            (nbrs * center.unsqueeze(-2)).sum(-1)], dim=-1)
        full_mask = torch.cat([torch.ones_like(mask[..., :1]), mask], dim=-1)
        w = _masked_weights(logits, full_mask)
        rows = torch.cat([center.unsqueeze(-2).expand(*nbrs.shape[:-2], 1, d), nbrs], dim=-2)
        return (w.unsqueeze(-1) * rows).sum(-2)
    if kind is AggregatorKind.MEAN:
        pooled = nbrs.sum(-2) / count.clamp(min=1.0)
    elif kind is AggregatorKind.MAX:
        filled = nbrs.masked_fill(~mask.unsqueeze(-1), _MASKED)
        pooled = torch.where(count > 0, filled.max(-2).values, torch.zeros_like(center))
    else:
        anchor = center if kind is AggregatorKind.ATTN else counterpart
        if anchor is None:
            raise ValueError("CP aggregation needs a counterpart vector")
        w = _masked_weights((nbrs * anchor.unsqueeze(-2)).sum(-1), mask)
        pooled = (w.unsqueeze(-1) * nbrs).sum(-2)
    return _combine(model, center, pooled)


def attention_weights(center: torch.Tensor, neighbors: torch.Tensor,
                      counterpart: torch.Tensor | None, kind: AggregatorKind | str) -> torch.Tensor:
    """The attention distribution an aggregator puts on its rows.

    For GAT the first weight belongs to the center.
    """
    kind = AggregatorKind(kind)
    if kind is AggregatorKind.GAT:
        rows = torch.cat([center.unsqueeze(0), neighbors], 0)
        return nx.softmax(rows @ center)
    if kind is AggregatorKind.ATTN:
        return nx.softmax(neighbors @ center)
    if kind is AggregatorKind.CP:
        return nx.softmax(neighbors @ counterpart)
    raise ValueError(f"{kind.value} aggregation has no attention weights")


def _canonical(rows: torch.Tensor) -> torch.Tensor:
    # sorting rows by value makes float reductions independent of input order
    if rows.shape[0] < 2:
        return rows
    keys = rows.detach().cpu().numpy().T[::-1]
    return rows[torch.from_numpy(np.lexsort(keys))]


def aggregate(center: torch.Tensor, neighbors: torch.Tensor | Sequence[torch.Tensor],
              counterpart: torch.Tensor | None, kind: AggregatorKind | str,
              model: MatchModel) -> torch.Tensor:
    """Aggregate one center vector with its neighbor vectors (possibly none)."""
    d = center.shape[-1]
    if not isinstance(neighbors, torch.Tensor):
        neighbors = (torch.stack(list(neighbors)) if len(neighbors)
                     else torch.zeros((0, d), dtype=center.dtype))
    if center.dim() != 1 or neighbors.dim() != 2 or neighbors.shape[1] != d:
        raise nx.DimensionError(
            f"aggregate: center {tuple(center.shape)} and neighbors {tuple(neighbors.shape)} disagree")
    if counterpart is not None and counterpart.shape != center.shape:
        raise nx.DimensionError("aggregate: counterpart dimension mismatch")
    kind = AggregatorKind(kind)
    if kind is AggregatorKind.GAT and neighbors.shape[0] == 0:
        return center
    rows = _canonical(neighbors)
    if rows.shape[0] == 0:
        rows = torch.zeros((1, d), dtype=center.dtype)
        mask = torch.zeros(1, dtype=torch.bool)
    else:
        mask = torch.ones(rows.shape[0], dtype=torch.bool)
    return aggregate_batch(model, center, rows, mask, counterpart, kind)


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------


def match_score(model: MatchModel, query: Document, query_neighbors: Sequence[Document],
                key: Document, key_neighbors: Sequence[Document]) -> torch.Tensor:
    """Relevance of query and key, each aggregated with its selected neighbors."""
    theta = model.encode([query, key, *query_neighbors, *key_neighbors])
    tq, tk = theta[0], theta[1]
    nq = theta[2:2 + len(query_neighbors)]
    nk = theta[2 + len(query_neighbors):]
    aq = aggregate(tq, nq, tk, model.kind, model)
    ak = aggregate(tk, nk, tq, model.kind, model)
    return nx.dot(aq, ak)


def _gather(theta: torch.Tensor, idx: Sequence[Sequence[int]]) -> tuple[torch.Tensor, torch.Tensor]:
    """Padded (P, n, d) rows of ``theta`` plus mask; -1 entries are padding."""
    n = max((len(r) for r in idx), default=0)
    n = max(n, 1)
    table = torch.full((len(idx), n), -1, dtype=torch.long)
    for i, r in enumerate(idx):
        if len(r):
            table[i, :len(r)] = torch.as_tensor(list(r), dtype=torch.long)
    mask = table >= 0
    rows = theta[table.clamp(min=0)] * mask.unsqueeze(-1).to(theta.dtype)
    return rows, mask


def pair_scores(model: MatchModel, theta: torch.Tensor, q_idx: Sequence[int],
                q_nbrs: Sequence[Sequence[int]], k_idx: Sequence[int],
                k_nbrs: Sequence[Sequence[int]]) -> torch.Tensor:
    """Scores of P aligned (query, key) pairs given cached encodings ``theta``.

    Neighbor lists are rows of indices into ``theta``.
    """
    q = theta[torch.as_tensor(list(q_idx), dtype=torch.long)]
    k = theta[torch.as_tensor(list(k_idx), dtype=torch.long)]
    qn, qm = _gather(theta, q_nbrs)
    kn, km = _gather(theta, k_nbrs)
    aq = aggregate_batch(model, q, qn, qm, k)
    ak = aggregate_batch(model, k, kn, km, q)
    return (aq * ak).sum(-1)


def cross_scores(model: MatchModel, theta: torch.Tensor, q_idx: Sequence[int],
                 q_nbrs: Sequence[Sequence[int]], k_idx: Sequence[int],
                 k_nbrs: Sequence[Sequence[int]]) -> torch.Tensor:
    """(B, B) score matrix of every query against every key in a batch."""
    q = theta[torch.as_tensor(list(q_idx), dtype=torch.long)]
    k = theta[torch.as_tensor(list(k_idx), dtype=torch.long)]
    qn, qm = _gather(theta, q_nbrs)
    kn, km = _gather(theta, k_nbrs)
    B = q.shape[0]
    if model.kind is AggregatorKind.CP:
        aq = aggregate_batch(model, q[:, None].expand(B, B, -1), qn[:, None].expand(B, B, *qn.shape[1:]),
                             qm[:, None].expand(B, B, -1), k[None, :].expand(B, B, -1))
        ak = aggregate_batch(model, k[None, :].expand(B, B, -1), kn[None, :].expand(B, B, *kn.shape[1:]),
                             km[None, :].expand(B, B, -1), q[:, None].expand(B, B, -1))
        return (aq * ak).sum(-1)
    aq = aggregate_batch(model, q, qn, qm)
    ak = aggregate_batch(model, k, kn, km)
    return aq @ ak.T


def matcher_loss(scores: torch.Tensor, mode: str = "log") -> torch.Tensor:
    """In-batch classification loss over a (B, B) score matrix.

    Row ``i`` holds query ``i`` against every key in the batch; the diagonal
    is the positive. ``log`` mode is the mean negative log-softmax of the
    positive, ``literal`` mode the mean negative softmax probability.
    """
    if scores.dim() != 2 or scores.shape[0] != scores.shape[1]:
        raise nx.DimensionError(f"matcher_loss: expected square scores, got {tuple(scores.shape)}")
    if scores.shape[0] < 2:
        raise ValueError("matcher_loss needs a batch of at least 2 for in-batch negatives")
    logp = torch.log_softmax(scores, dim=-1).diagonal()
    if mode == "log":
        return -logp.mean()
    if mode == "literal":
        return -logp.exp().mean()
    raise ValueError(f"unknown loss mode {mode!r}")


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class MatcherConfig:
    kind: str = "CP"
    dim: int = 64
    layers: int = 2
    heads: int = 4
    epochs: int = 4
    batch_size: int = 64
    lr: float = 1e-3
    neighbors_per_side: int = 5
    loss_mode: str = "log"
    dtype: str = "float32"
    seed: int = 0
    max_steps: int | None = None


@dataclass
class MatcherRun:
    model: MatchModel
    losses: list[float] = field(default_factory=list)


class _BatchBuilder:
    """Collects unique documents of a batch and index lists into them."""

    def __init__(self):
        self.index: dict[str, int] = {}

    def __call__(self, nid: str) -> int:
        return self.index.setdefault(nid, len(self.index))


def training_batch(graph: TextGraph, tasks: Sequence[MatchTask], per_side: int,
                   rng: np.random.Generator):
    """Docs, query/key indices and randomly sub-sampled neighbor index lists."""
    b = _BatchBuilder()
    qi, ki, qn, kn = [], [], [], []
    for t in tasks:
        qi.append(b(t.query))
        ki.append(b(t.positive_key))
        for owner, out in ((t.query, qn), (t.positive_key, kn)):
            pool = t.neighbors[owner]
            pick = rng.choice(len(pool), size=min(per_side, len(pool)), replace=False)
            out.append([b(pool[j]) for j in sorted(pick)])
    docs = [graph.nodes[n] for n in b.index]
    return docs, qi, qn, ki, kn


def batch_loss(model: MatchModel, graph: TextGraph, tasks: Sequence[MatchTask],
               per_side: int, rng: np.random.Generator, mode: str = "log") -> torch.Tensor:
    docs, qi, qn, ki, kn = training_batch(graph, tasks, per_side, rng)
    theta = model.encode(docs)
    return matcher_loss(cross_scores(model, theta, qi, qn, ki, kn), mode)


def train_matcher(graph: TextGraph, tasks: Sequence[MatchTask],
                  config: MatcherConfig = MatcherConfig()) -> MatcherRun:
    if not tasks:
        raise ValueError("train_matcher needs a non-empty training split")
    torch.manual_seed(config.seed)
    dtype = getattr(torch, config.dtype)
    model = MatchModel(graph.vocab_size, config.kind, config.dim, config.layers, config.heads,
                       graph.max_len, dtype=dtype, seed=config.seed)
    store = nx.ParamStore.from_module(model)
    rng = np.random.default_rng(config.seed)
    run = MatcherRun(model)
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(tasks))
        for s in range(0, len(order) - 1, config.batch_size):
            batch = [tasks[i] for i in order[s:s + config.batch_size]]
            if len(batch) < 2:
                continue
            loss = batch_loss(model, graph, batch, config.neighbors_per_side, rng, config.loss_mode)
            if not torch.isfinite(loss):
                raise TrainingError(f"matcher loss diverged at step {step}")
            store.zero_grad()
            loss.backward()
            nx.adam_step(store, lr=config.lr)
            run.losses.append(loss.item())
            step += 1
            if config.max_steps is not None and step >= config.max_steps:
                return run
        log.info("matcher epoch %d: mean loss %.4f", epoch,
                 float(np.mean(run.losses[-max(1, len(order) // config.batch_size):])))
    return run


class PairScorer:
    """Scores (query, neighbors, key, neighbors) tuples with cached encodings.

    A document's encoding does not depend on its neighbors, so the graph is
    encoded once up front.
    """

    def __init__(self, model: MatchModel, graph: TextGraph):
        self.model, self.graph = model, graph
        self.index = {n: i for i, n in enumerate(graph.ids)}
        with torch.no_grad():
            self.theta = model.encode([graph.nodes[n] for n in graph.ids])

    def scores(self, pairs: Sequence[tuple[str, Sequence[str], str, Sequence[str]]],
               chunk: int = 4096) -> np.ndarray:
        ix = self.index
        out = []
        with torch.no_grad():
            for s in range(0, len(pairs), chunk):
                part = pairs[s:s + chunk]
                out.append(pair_scores(
                    self.model, self.theta,
                    [ix[q] for q, _, _, _ in part], [[ix[n] for n in qn] for _, qn, _, _ in part],
                    [ix[k] for _, _, k, _ in part], [[ix[n] for n in kn] for _, _, _, kn in part],
                ).double().numpy())
        return np.concatenate(out) if out else np.zeros(0)

    def __call__(self, q: str, q_nbrs: Sequence[str], k: str, k_nbrs: Sequence[str]) -> float:
        return float(self.scores([(q, q_nbrs, k, k_nbrs)])[0])
