"""Weak labels for neighbor usefulness, read off a trained matcher.

A neighbor is labeled ``+`` when joining it to its owner raises the
matcher's score of the positive pair, ``-`` otherwise (ties are ``-``).
The opposite side is always left bare while one side is annotated.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .graphstore import MatchTask, TextGraph, _seed_for
from .matcher import MatchModel, PairScorer

SIDES = ("query", "key")


@dataclass(frozen=True)
class NeighborLabel:
    side: str
    neighbor: str
    label: str
    margin: float
    step: int | None = None

    def __post_init__(self):
        if self.side not in SIDES:
            raise ValueError(f"side must be one of {SIDES}")
        if (self.label == "+") != (self.margin > 0):
            raise ValueError(f"label {self.label!r} inconsistent with margin {self.margin}")


@dataclass
class AnnotationSet:
    mode: str
    labels: dict[str, list[NeighborLabel]] = field(default_factory=dict)
    tasks: dict[str, MatchTask] = field(default_factory=dict)

    def add(self, task: MatchTask, labels: Iterable[NeighborLabel]) -> None:
        self.tasks[task.id] = task
        self.labels[task.id] = list(labels)

    def merge(self, other: "AnnotationSet") -> "AnnotationSet":
        if other.mode != self.mode:
            raise ValueError("cannot merge annotation sets of different modes")
        self.labels.update(other.labels)
        self.tasks.update(other.tasks)
        return self

    def side(self, task_id: str, side: str) -> list[NeighborLabel]:
        return [lab for lab in self.labels[task_id] if lab.side == side]

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for tid, labs in self.labels.items():
                for lab in labs:
                    fh.write(json.dumps({"task": tid, "side": lab.side, "neighbor": lab.neighbor,
                                         "label": lab.label, "margin": lab.margin,
                                         "step": lab.step, "mode": self.mode}) + "\n")

    @classmethod
    def load(cls, path: str | Path, tasks: Iterable[MatchTask] = ()) -> "AnnotationSet":
        by_id = {t.id: t for t in tasks}
        labels: dict[str, list[NeighborLabel]] = defaultdict(list)
        mode = "one-step"
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                r = json.loads(line)
                mode = r.get("mode", mode)
                labels[r["task"]].append(
                    NeighborLabel(r["side"], r["neighbor"], r["label"], r["margin"], r["step"]))
        return cls(mode, dict(labels), {t: by_id[t] for t in labels if t in by_id})


def _owner(task: MatchTask, side: str) -> tuple[str, str]:
    return ((task.query, task.positive_key) if side == "query"
            else (task.positive_key, task.query))


def _pair(task: MatchTask, side: str, joined: Sequence[str]):
    q, k = task.query, task.positive_key
    return (q, tuple(joined), k, ()) if side == "query" else (q, (), k, tuple(joined))


def annotate_one_step(model: MatchModel, task: MatchTask, graph: TextGraph | None = None,
                      scorer: PairScorer | None = None) -> AnnotationSet:
    """Label every neighbor of a positive pair by its solo effect on the score."""
    scorer = scorer or PairScorer(model, graph)
    pairs = [_pair(task, "query", ())]
    order = []
    for side in SIDES:
        owner, _ = _owner(task, side)
        for nb in task.neighbors[owner]:
            pairs.append(_pair(task, side, (nb,)))
            order.append((side, nb))
    s = scorer.scores(pairs)
    base = s[0]
    labels = []
    for (side, nb), v in zip(order, s[1:]):
        margin = float(v - base)
        labels.append(NeighborLabel(side, nb, "+" if margin > 0 else "-", margin))
    out = AnnotationSet("one-step")
    out.add(task, labels)
    return out


def greedy_side(score_fn, candidates: Sequence[str], k: int):
    """Greedy forward selection shared by annotation.

    ``score_fn(list_of_joined_sets)`` returns one score per set. Returns the
    accepted ids with their margins and, for every other candidate, its margin
    against the best competitor at the last step it was scored.
    """
    accepted: list[tuple[str, float]] = []
    remaining = list(candidates)
    current = float(score_fn([()])[0])
    last_margin = {}
    for _ in range(k):
        if not remaining:
            break
        prefix = tuple(a for a, _ in accepted)
        scores = np.asarray(score_fn([prefix + (c,) for c in remaining]), dtype=float)
        best = int(np.argmax(scores))  # first maximum = lowest index
        bar = max(current, float(scores[best]))
        improved = scores[best] > current
        for j, c in enumerate(remaining):
            if improved and j == best:
                continue
            rival = current if not improved else float(scores[best])
            last_margin[c] = float(scores[j]) - (bar if j != best else rival)
        if not improved:
            break
        accepted.append((remaining[best], float(scores[best]) - current))
        current = float(scores[best])
        del remaining[best]
    return accepted, {c: min(last_margin.get(c, 0.0), 0.0) for c in remaining}


def annotate_multi_step(model: MatchModel, task: MatchTask, k: int,
                        graph: TextGraph | None = None,
                        scorer: PairScorer | None = None) -> AnnotationSet:
    """Greedy annotation: a neighbor is ``+`` when accepted within ``k`` steps."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scorer = scorer or PairScorer(model, graph)
    labels = []
    for side in SIDES:
        owner, _ = _owner(task, side)

        def score_fn(sets, side=side):
            return scorer.scores([_pair(task, side, s) for s in sets])

        accepted, rejected = greedy_side(score_fn, task.neighbors[owner], k)
        for step, (nb, margin) in enumerate(accepted):
            labels.append(NeighborLabel(side, nb, "+", margin, step))
        for nb in task.neighbors[owner]:
            if nb in rejected:
                labels.append(NeighborLabel(side, nb, "-", rejected[nb], None))
    out = AnnotationSet("multi-step")
    out.add(task, labels)
    return out


def annotate(model: MatchModel, graph: TextGraph, tasks: Sequence[MatchTask],
             mode: str = "one-step", k: int = 5) -> AnnotationSet:
    scorer = PairScorer(model, graph)
    out = AnnotationSet(mode)
    for t in tasks:
        if mode == "one-step":
            out.merge(annotate_one_step(model, t, scorer=scorer))
        elif mode == "multi-step":
            out.merge(annotate_multi_step(model, t, k, scorer=scorer))
        else:
            raise ValueError(f"unknown annotation mode {mode!r}")
    return out


@dataclass(frozen=True)
class PairRecord:
    task: str
    side: str
    owner: str
    counterpart: str
    positive: str
    negative: str
    prefix: tuple[str, ...] = ()


@dataclass
class PairDataset:
    records: list[PairRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def split(self, holdout: float, seed: int = 0) -> tuple["PairDataset", "PairDataset"]:
        """Split by task so held-out pairs come from unseen tasks."""
        tids = sorted({r.task for r in self.records})
        rng = np.random.default_rng(seed)
        held = set(rng.choice(tids, size=int(round(holdout * len(tids))), replace=False).tolist()) \
            if tids else set()
        return (PairDataset([r for r in self.records if r.task not in held]),
                PairDataset([r for r in self.records if r.task in held]))


def build_pairs(ann: AnnotationSet, per_task_cap: int = 50, seed: int = 0) -> PairDataset:
    """Cross positive with negative labels per task and side, capped per task."""
    out = []
    for tid in ann.labels:
        task = ann.tasks.get(tid)
        q, k = tid.split("|", 1) if task is None else (task.query, task.positive_key)
        for side in SIDES:
            owner, counterpart = (q, k) if side == "query" else (k, q)
            labs = ann.side(tid, side)
            pos = sorted([lab for lab in labs if lab.label == "+"],
                         key=lambda lab: (lab.step if lab.step is not None else -1))
            neg = [lab for lab in labs if lab.label == "-"]
            if not pos or not neg:
                continue
            accepted = [lab.neighbor for lab in pos]
            cands = []
            for p in pos:
                prefix = tuple(accepted[:p.step]) if p.step is not None else ()
                for n in neg:
                    cands.append(PairRecord(tid, side, owner, counterpart,
                                            p.neighbor, n.neighbor, prefix))
            if len(cands) > per_task_cap:
                rng = _seed_for(seed, "pairs", tid, side)
                keep = np.sort(rng.choice(len(cands), size=per_task_cap, replace=False))
                cands = [cands[i] for i in keep]
            out.extend(cands)
    return PairDataset(out)
