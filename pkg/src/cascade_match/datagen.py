"""Synthetic planted-topic textual graphs.

Each node holds one topic, or two for "hub" nodes, and a latent position on
a ring of ``topic_vocab`` slots inside each of its topics. Topic tokens are
drawn around that position, so nearby nodes share vocabulary. Edges between
nodes that share a topic are likelier the closer their positions are, with
mean probability ``intra_p``; all other pairs connect with ``inter_p``.

A node's own text therefore pins down its topic but only roughly locates it
on the ring. Same-topic neighbors refine that estimate, while cross-topic
neighbors (frequent among 2-hop neighbors) are pure noise. Hubs mix two
topics, so which of their neighbors helps depends on the counterpart.
Setting ``locality=None`` recovers a plain stochastic block model with
uniform topic tokens.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .graphstore import MatchTask, TextGraph, make_graph


@dataclass(frozen=True)
class GenConfig:
    num_nodes: int = 2000
    num_topics: int = 16
    tokens_per_doc: int = 12
    topic_vocab: int = 64
    noise_vocab: int = 256
    noise_frac: float = 0.25
    intra_p: float = 0.145
    inter_p: float = 0.0001
    multi_topic_frac: float = 0.05
    locality: float | None = 3.0
    token_spread: float | None = 7.0
    local_frac: float = 1.0
    stub_frac: float = 0.25
    stub_noise: float = 0.9
    intra_mix: float = 0.0
    hub_reach: int | None = None
    seed: int = 0

    def validate(self) -> None:
        if self.num_topics < 2:
            raise ValueError("num_topics must be >= 2")
        if not 0 <= self.inter_p < self.intra_p <= 1:
            raise ValueError("need 0 <= inter_p < intra_p <= 1")
        if not 0 <= self.multi_topic_frac <= 1:
            raise ValueError("multi_topic_frac must lie in [0, 1]")
        if not 0 <= self.noise_frac <= 1:
            raise ValueError("noise_frac must lie in [0, 1]")
        if self.num_nodes < 2 or self.tokens_per_doc < 1 or self.topic_vocab < 1:
            raise ValueError("num_nodes >= 2, tokens_per_doc >= 1 and topic_vocab >= 1 required")
        if self.noise_frac > 0 and self.noise_vocab < 1:
            raise ValueError("noise_vocab must be positive when noise_frac > 0")
        if self.locality is not None and self.locality <= 0:
            raise ValueError("locality must be positive or None")
        if not (0 <= self.local_frac <= 1 and 0 <= self.intra_mix <= 1):
            raise ValueError("local_frac and intra_mix must lie in [0, 1]")
        if not (0 <= self.stub_frac < 1 and 0 <= self.stub_noise <= 1):
            raise ValueError("stub_frac must lie in [0, 1) and stub_noise in [0, 1]")
        if self.stub_frac * self.stub_noise > self.noise_frac:
            raise ValueError("stubs alone exceed the mean noise fraction")
        if self.hub_reach is not None and not 1 <= self.hub_reach <= self.num_topics // 2:
            raise ValueError("hub_reach must lie in [1, num_topics // 2] or be None")


@dataclass(frozen=True)
class GroundTruth:
    topics: Mapping[str, tuple[int, ...]]
    positions: Mapping[str, tuple[float, ...]] | None = None

    def __post_init__(self):
        for nid, ts in self.topics.items():
            if not ts:
                raise ValueError(f"node {nid!r} has no topic")

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for nid, ts in self.topics.items():
                fh.write(json.dumps({"id": nid, "topics": list(ts)}) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "GroundTruth":
        topics = {}
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    topics[rec["id"]] = tuple(rec["topics"])
        return cls(topics)


def _ring_dist(a: np.ndarray, b: np.ndarray, size: float) -> np.ndarray:
    d = np.abs(a[:, None] - b[None, :]) % size
    return np.minimum(d, size - d)


def generate_graph(config: GenConfig = GenConfig()) -> tuple[TextGraph, GroundTruth]:
    config.validate()
    rng = np.random.default_rng(config.seed)
    n, T, V = config.num_nodes, config.num_topics, config.topic_vocab
    ids = [f"n{i:05d}" for i in range(n)]

    primary = rng.integers(0, T, size=n)
    is_hub = rng.random(n) < config.multi_topic_frac
    if config.hub_reach is None:
        shift = rng.integers(1, T, size=n)
    else:
        # second topic within hub_reach steps of the first on a ring of topics
        r = config.hub_reach
        shift = rng.integers(1, r + 1, size=n) * rng.choice([-1, 1], size=n)
    second = (primary + shift) % T
    topics = [(int(p), int(s)) if h else (int(p),)
              for p, s, h in zip(primary, second, is_hub)]
    pos = rng.uniform(0, V, size=(n, T))

    member = np.zeros((n, T), dtype=bool)
    for i, ts in enumerate(topics):
        member[i, list(ts)] = True

    # stubs are mostly noise; the rest absorb the remainder so the mean stays noise_frac
    if config.stub_frac > 0:
        is_stub = rng.random(n) < config.stub_frac
        rest = (config.noise_frac - config.stub_frac * config.stub_noise) / (1 - config.stub_frac)
        noise = np.where(is_stub, config.stub_noise, rest)
    else:
        noise = np.full(n, config.noise_frac)

    texts = {}
    for i in range(n):
        toks = []
        for _ in range(config.tokens_per_doc):
            if rng.random() < noise[i]:
                toks.append(f"z{rng.integers(config.noise_vocab):03d}")
                continue
            t = topics[i][rng.integers(len(topics[i]))]
            if config.token_spread is None or (
                    config.local_frac < 1 and rng.random() >= config.local_frac):
                slot = int(rng.integers(V))
            else:
                slot = int(math.floor(pos[i, t] + rng.normal(0, config.token_spread))) % V
            toks.append(f"t{t:02d}w{slot:02d}")
        texts[ids[i]] = " ".join(toks)

    if config.locality is None:
        zeta = 1.0
    else:
        ell = config.locality
        zeta = math.sqrt(2 * math.pi) * ell * math.erf(V / 2 / (math.sqrt(2) * ell)) / V
    prob = np.full((n, n), config.inter_p)
    shared_p = np.zeros((n, n))
    shared = np.zeros((n, n), dtype=bool)
    for t in range(T):
        idx = np.flatnonzero(member[:, t])
        if config.locality is None:
            block = np.full((len(idx), len(idx)), config.intra_p)
        else:
            d = _ring_dist(pos[idx, t], pos[idx, t], V)
            kernel = np.exp(-d ** 2 / (2 * ell ** 2)) / zeta
            mix = config.intra_mix
            block = np.minimum(1.0, config.intra_p * ((1 - mix) * kernel + mix))
        sub = np.ix_(idx, idx)
        shared_p[sub] = np.maximum(shared_p[sub], block)
        shared[sub] = True
    prob = np.where(shared, shared_p, prob)
    draws = rng.random((n, n))
    iu, ju = np.triu_indices(n, k=1)
    hit = draws[iu, ju] < prob[iu, ju]
    edges = [(ids[a], ids[b]) for a, b in zip(iu[hit], ju[hit])]

    graph = make_graph(texts, edges, max_len=max(32, config.tokens_per_doc))
    gt = GroundTruth({ids[i]: topics[i] for i in range(n)},
                     {ids[i]: tuple(float(pos[i, t]) for t in topics[i]) for i in range(n)})
    return graph, gt


def usefulness_oracle(gt: GroundTruth, task: MatchTask, neighbor: str,
                      owner: str | None = None, counterpart: str | None = None) -> bool:
    """Does ``neighbor`` share a topic with the counterpart of its owner?

    ``owner`` defaults to the query; the query's counterpart defaults to the
    positive key and a key's counterpart is always the query.
    """
    owner = task.query if owner is None else owner
    if counterpart is None:
        counterpart = task.positive_key if owner == task.query else task.query
    for x in (neighbor, counterpart):
        if x not in gt.topics:
            raise KeyError(f"unknown node {x!r}")
    return bool(set(gt.topics[neighbor]) & set(gt.topics[counterpart]))


def config_dict(config: GenConfig) -> dict:
    return asdict(config)
