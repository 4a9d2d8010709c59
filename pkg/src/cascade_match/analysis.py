"""Accuracy-vs-k curves, selector/annotator agreement and their reports."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .datagen import GroundTruth, usefulness_oracle
from .graphstore import MatchTask, TextGraph, _seed_for
from .matcher import MatchModel, PairScorer
from .pipeline import SelectFn, cascade_scores, evaluate
from .selector import SelectorIndex, SelectorModel
from .supervision import AnnotationSet

METHODS = ("random", "popularity", "similarity-lite", "cdsm", "oracle")


def _ranked(scores: Sequence[float]) -> list[int]:
    return [int(i) for i in np.argsort(-np.asarray(scores, dtype=float), kind="stable")]


def method_rankings(method: str, graph: TextGraph, index: SelectorIndex | None = None,
                    gt: GroundTruth | None = None, seed: int = 0):
    """Full best-first ordering of an owner's neighbor list for one method."""
    if method == "random":
        def rank(task, owner, cp):
            n = len(task.neighbors[owner])
            return [int(i) for i in _seed_for(seed, "random", task.id, owner).permutation(n)]
    elif method == "popularity":
        def rank(task, owner, cp):
            return _ranked([graph.degree(n) for n in task.neighbors[owner]])
    elif method == "similarity-lite":
        def rank(task, owner, cp):
            return _ranked([index.sim(owner, n) for n in task.neighbors[owner]])
    elif method == "cdsm":
        def rank(task, owner, cp):
            nbrs = task.neighbors[owner]
            if index.model.mode.value == "multi-step":
                return [i for i, _ in index.multi_step(owner, nbrs, cp, len(nbrs))]
            return _ranked(index.one_step(nbrs, cp))
    elif method == "oracle":
        def rank(task, owner, cp):
            # useful neighbors first, the rest after, each in list order
            useful = [usefulness_oracle(gt, task, n, owner, cp) for n in task.neighbors[owner]]
            return _ranked([1.0 if u else 0.0 for u in useful])
    else:
        raise ValueError(f"unknown selection method {method!r}")
    return rank


def prefix_select(rank, k: int) -> SelectFn:
    memo: dict = {}

    def select(task: MatchTask, owner: str, cp: str):
        key = (task.id, owner, cp)
        if key not in memo:
            memo.clear()
            memo[key] = rank(task, owner, cp)
        return memo[key][:k]

    return select


@dataclass
class CurveRow:
    method: str
    k: int
    p_at_1: float
    ndcg: float


def curve_analysis(selector: SelectorModel | None, matcher: MatchModel,
                   tasks: Sequence[MatchTask], k_values: Sequence[int], graph: TextGraph,
                   gt: GroundTruth | None = None, methods: Sequence[str] = METHODS,
                   seed: int = 0) -> list[CurveRow]:
    """P@1 and NDCG per (method, k), every method keeping its top ``k`` neighbors."""
    scorer = PairScorer(matcher, graph)
    index = SelectorIndex(selector, graph) if selector is not None else None
    rows = []
    for m in methods:
        if m == "oracle" and gt is None:
            continue
        if m in ("cdsm", "similarity-lite") and index is None:
            continue
        rank = method_rankings(m, graph, index, gt, seed)
        orders: dict = {}

        def cached(task, owner, cp, rank=rank, orders=orders):
            key = (task.id, owner, cp)
            if key not in orders:
                orders[key] = rank(task, owner, cp)
            return orders[key]

        for k in k_values:
            def select(task, owner, cp, k=k):
                return cached(task, owner, cp)[:k]
            met = evaluate(tasks, lambda t: cascade_scores(t, select, scorer))
            rows.append(CurveRow(m, int(k), met.p_at_1, met.ndcg))
    return rows


def peak(rows: Sequence[CurveRow], method: str) -> tuple[int, float]:
    pts = sorted((r.k, r.p_at_1) for r in rows if r.method == method)
    best = max(pts, key=lambda kv: (kv[1], -kv[0]))
    return best


# ---------------------------------------------------------------------------
# agreement
# ---------------------------------------------------------------------------

BUCKETS = ("1-10", "11-20", "21+")


def _bucket(pos: int) -> str:
    return BUCKETS[0] if pos <= 10 else BUCKETS[1] if pos <= 20 else BUCKETS[2]


@dataclass
class AgreementReport:
    histogram: dict
    random_expectation: float
    lists: int
    skipped: int

    @property
    def top_mass(self) -> float:
        return self.histogram[BUCKETS[0]]


def agreement_analysis(selector: SelectorModel | SelectorIndex, annotations: AnnotationSet,
                       tasks: Sequence[MatchTask] | None = None,
                       graph: TextGraph | None = None, top: int = 10) -> AgreementReport:
    """Where the selector's top picks sit in the annotator's usefulness ranking.

    Each task side is one list; neighbors are ranked by annotation margin
    (ties by list position). Lists shorter than ``top`` are skipped.
    """
    index = selector if isinstance(selector, SelectorIndex) else SelectorIndex(selector, graph)
    tasks = list(tasks) if tasks is not None else list(annotations.tasks.values())
    counts = dict.fromkeys(BUCKETS, 0)
    expect, lists, skipped = [], 0, 0
    for t in tasks:
        for side, owner, cp in (("query", t.query, t.positive_key), ("key", t.positive_key, t.query)):
            nbrs = t.neighbors[owner]
            if len(nbrs) < top:
                skipped += 1
                continue
            margin = {lab.neighbor: lab.margin for lab in annotations.side(t.id, side)}
            ann_order = _ranked([margin[n] for n in nbrs])
            ann_pos = {i: p for p, i in enumerate(ann_order, 1)}
            if index.model.mode.value == "multi-step":
                sel = [i for i, _ in index.multi_step(owner, nbrs, cp, top)]
            else:
                sel = _ranked(index.one_step(nbrs, cp))[:top]
            for i in sel:
                counts[_bucket(ann_pos[i])] += 1
            expect.append(top / len(nbrs))
            lists += 1
    total = sum(counts.values()) or 1
    hist = {b: counts[b] / total for b in BUCKETS}
    return AgreementReport(hist, float(np.mean(expect)) if expect else math.nan, lists, skipped)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def write_csv(path: str | Path, rows: Sequence[Mapping]) -> None:
    rows = list(rows)
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True))


def _svg(fig) -> str:
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    return buf.getvalue()


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "cascade-match"
    import matplotlib.pyplot as plt
    return plt


def curves_svg(path: str | Path, rows: Sequence[CurveRow], metric: str = "p_at_1") -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for m in dict.fromkeys(r.method for r in rows):
        pts = sorted((r.k, getattr(r, metric)) for r in rows if r.method == m)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=m)
    ax.set_xlabel("neighbors kept per side (k)")
    ax.set_ylabel(metric)
    ax.legend(fontsize=8)
    fig.tight_layout()
    Path(path).write_text(_svg(fig))
    plt.close(fig)


def agreement_svg(path: str | Path, report: AgreementReport) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.bar(list(report.histogram), list(report.histogram.values()), color="#4c72b0")
    ax.axhline(report.random_expectation, color="gray", linestyle="--", label="random, top bucket")
    ax.set_xlabel("annotator rank of selector's top-10")
    ax.set_ylabel("share")
    ax.legend(fontsize=8)
    fig.tight_layout()
    Path(path).write_text(_svg(fig))
    plt.close(fig)


def agreement_dict(report: AgreementReport) -> dict:
    return {"histogram": report.histogram, "random_expectation": report.random_expectation,
            "lists": report.lists, "skipped": report.skipped,
            "ratio_to_random": report.top_mass / report.random_expectation
            if report.random_expectation else None}
