"""Three-stage training, cascaded inference, evaluation and cost accounting."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .datagen import GenConfig, GroundTruth, generate_graph
from .encoders import pad_batch
from .graphstore import (MatchTask, TextGraph, build_tasks, load_graph,
                         read_tasks, split_edges, write_graph, write_splits, write_tasks)
from .matcher import MatchModel, MatcherConfig, PairScorer, match_score, train_matcher
from .selector import (SelectorConfig, SelectorIndex, SelectorMode, SelectorModel,
                       TruncationKind, TruncationPolicy, train_selector,
                       truncate, truncate_group)
from .supervision import AnnotationSet, annotate, build_pairs

log = logging.getLogger(__name__)


class DependencyError(FileNotFoundError):
    """A stage input is missing; ``producer`` names the stage that writes it."""

    def __init__(self, stage: str, path: Path, producer: str):
        self.stage, self.path, self.producer = stage, Path(path), producer
        super().__init__(f"{stage}: missing input {Path(path).name} (run '{producer}' first)")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        super().__init__(f"stage {stage} failed: {cause}")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class TaskConfig:
    cap: int = 50
    num_negatives: int = 29
    splits: tuple[float, float, float] = (0.8, 0.1, 0.1)
    max_test_tasks: int | None = 1000


@dataclass
class AnnotationConfig:
    mode: str = "multi-step"
    k: int = 5
    per_task_cap: int = 20
    max_tasks: int | None = 6000


@dataclass
class EvalConfig:
    k_values: tuple[int, ...] = (0, 1, 3, 5, 10, 20, 50)
    methods: tuple[str, ...] = ("random", "popularity", "similarity-lite", "cdsm", "oracle")
    timing_tasks: int = 1000
    timing_docs: int = 1000


@dataclass
class RunConfig:
    seed: int = 0
    workers: int = 1
    data: GenConfig = field(default_factory=GenConfig)
    tasks: TaskConfig = field(default_factory=TaskConfig)
    matcher: MatcherConfig = field(default_factory=MatcherConfig)
    annotation: AnnotationConfig = field(default_factory=AnnotationConfig)
    selector: SelectorConfig = field(default_factory=SelectorConfig)
    policy: dict = field(default_factory=lambda: {"kind": "FixedK", "k": 5})
    eval: EvalConfig = field(default_factory=EvalConfig)

    def resolved(self) -> "RunConfig":
        """Copy with every component seed tied to the root seed."""
        return dataclasses.replace(
            self,
            data=dataclasses.replace(self.data, seed=self.seed),
            matcher=dataclasses.replace(self.matcher, seed=self.seed),
            selector=dataclasses.replace(self.selector, seed=self.seed),
        )

    def truncation(self) -> TruncationPolicy:
        return TruncationPolicy.from_dict(self.policy)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunConfig":
        return _build(cls, d, "")


def _build(cls, d: Mapping, prefix: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in d.items():
        if key not in fields:
            raise KeyError(f"unknown config key {prefix + key!r}")
        sub = _NESTED.get((cls, key))
        if sub is not None:
            kwargs[key] = _build(sub, value, f"{prefix}{key}.")
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


_NESTED = {(RunConfig, "data"): GenConfig, (RunConfig, "tasks"): TaskConfig,
           (RunConfig, "matcher"): MatcherConfig, (RunConfig, "annotation"): AnnotationConfig,
           (RunConfig, "selector"): SelectorConfig, (RunConfig, "eval"): EvalConfig}


def apply_override(d: dict, dotted: str, value) -> dict:
    """Set ``a.b.c = value`` in a nested config dict; unknown keys raise KeyError."""
    *path, last = dotted.split(".")
    node = d
    for part in path:
        if part not in node or not isinstance(node[part], dict):
            raise KeyError(f"unknown config key {dotted!r}")
        node = node[part]
    if last not in node:
        raise KeyError(f"unknown config key {dotted!r}")
    node[last] = value
    return d


# ---------------------------------------------------------------------------
# artifacts and manifest
# ---------------------------------------------------------------------------


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class Manifest:
    run_id: str
    config: dict
    stages: dict[str, dict] = field(default_factory=dict)

    @classmethod
    def open(cls, out: Path, config: RunConfig) -> "Manifest":
        path = out / "manifest.json"
        if path.exists():
            d = json.loads(path.read_text())
            m = cls(d["run_id"], config.to_dict(), d.get("stages", {}))
        else:
            m = cls(f"run-seed{config.seed}", config.to_dict())
        return m

    def record(self, stage: str, out: Path, artifacts: Sequence[str],
               reports: Sequence[str] = (), started: float | None = None) -> None:
        self.stages.pop(stage, None)  # re-running a stage moves it to the end
        self.stages[stage] = {
            "artifacts": [{"path": a, "sha256": file_hash(out / a)} for a in artifacts],
            "reports": [{"path": r, "sha256": file_hash(out / r)} for r in reports],
            "started": started if started is not None else time.time(),
            "finished": time.time(),
        }

    def artifacts(self, stages: Sequence[str] | None = None) -> list[tuple[str, str, str]]:
        keep = self.stages if stages is None else [s for s in self.stages if s in stages]
        return [(s, a["path"], a["sha256"]) for s in keep for a in self.stages[s]["artifacts"]]

    def save(self, out: Path) -> None:
        for stage, rec in self.stages.items():
            for a in rec["artifacts"] + rec["reports"]:
                if not (out / a["path"]).exists():
                    raise FileNotFoundError(f"manifest lists missing file {a['path']}")
        # stages keep execution order
        (out / "manifest.json").write_text(json.dumps(asdict(self), indent=2))


# stage -> files it writes; used both for writing and for dependency errors
PRODUCERS = {
    "nodes.jsonl": "generate-data", "edges.tsv": "generate-data",
    "ground_truth.jsonl": "generate-data", "splits.jsonl": "generate-data",
    "tasks_train.jsonl": "generate-data", "tasks_test.jsonl": "generate-data",
    "matcher.ckpt": "train-matcher", "annotations.jsonl": "annotate",
    "selector.ckpt": "train-selector",
}

HYBRID_STAGES = ("train_matcher", "annotate", "train_selector")


def require(stage: str, out: Path, name: str) -> Path:
    path = out / name
    if not path.exists():
        raise DependencyError(stage, path, PRODUCERS[name])
    return path


@dataclass
class Workspace:
    """Loaded inputs of a run directory, read lazily."""
    out: Path
    config: RunConfig
    _cache: dict = field(default_factory=dict)

    def _get(self, key, stage, loader):
        if key not in self._cache:
            self._cache[key] = loader(require(stage, self.out, key))
        return self._cache[key]

    def graph(self, stage: str) -> TextGraph:
        require(stage, self.out, "edges.tsv")
        return self._get("nodes.jsonl", stage, lambda p: load_graph(
            p, self.out / "edges.tsv", max_len=max(32, self.config.data.tokens_per_doc)))

    def ground_truth(self, stage: str) -> GroundTruth:
        return self._get("ground_truth.jsonl", stage, GroundTruth.load)

    def tasks(self, stage: str, split: str) -> list[MatchTask]:
        return self._get(f"tasks_{split}.jsonl", stage, read_tasks)

    def matcher(self, stage: str) -> MatchModel:
        return self._get("matcher.ckpt", stage, MatchModel.load)

    def selector(self, stage: str) -> SelectorModel:
        return self._get("selector.ckpt", stage, SelectorModel.load)

    def annotations(self, stage: str) -> AnnotationSet:
        return self._get("annotations.jsonl", stage,
                         lambda p: AnnotationSet.load(p, self.tasks(stage, "train")))


def _write_curve(path: Path, losses: Sequence[float]) -> None:
    with open(path, "w") as fh:
        fh.write("step,loss\n")
        for i, v in enumerate(losses):
            fh.write(f"{i},{v!r}\n")


def _set_workers(n: int) -> None:
    torch.set_num_threads(max(1, n))


def stage_generate_data(config: RunConfig, out: Path, manifest: Manifest) -> None:
    started = time.time()
    cfg = config.resolved()
    graph, gt = generate_graph(cfg.data)
    write_graph(graph, out / "nodes.jsonl", out / "edges.tsv")
    gt.save(out / "ground_truth.jsonl")
    splits = split_edges(graph, cfg.tasks.splits, cfg.seed)
    write_splits(out / "splits.jsonl", splits)
    write_tasks(out / "tasks_train.jsonl",
                build_tasks(graph, splits["train"], 0, cfg.tasks.cap, cfg.seed))
    test = splits["test"][:cfg.tasks.max_test_tasks]
    write_tasks(out / "tasks_test.jsonl",
                build_tasks(graph, test, cfg.tasks.num_negatives, cfg.tasks.cap, cfg.seed + 1))
    manifest.record("generate_data", out, ["nodes.jsonl", "edges.tsv", "ground_truth.jsonl",
                                           "splits.jsonl", "tasks_train.jsonl",
                                           "tasks_test.jsonl"], started=started)


def stage_train_matcher(config: RunConfig, out: Path, manifest: Manifest,
                        ws: Workspace | None = None) -> MatchModel:
    started = time.time()
    ws = ws or Workspace(out, config)
    graph, tasks = ws.graph("train_matcher"), ws.tasks("train_matcher", "train")
    run = train_matcher(graph, tasks, config.resolved().matcher)
    run.model.save(out / "matcher.ckpt")
    _write_curve(out / "matcher_curve.csv", run.losses)
    manifest.record("train_matcher", out, ["matcher.ckpt"], ["matcher_curve.csv"], started)
    ws._cache["matcher.ckpt"] = run.model
    return run.model


def annotation_subset(tasks: Sequence[MatchTask], limit: int | None, seed: int) -> list[MatchTask]:
    if limit is None or limit >= len(tasks):
        return list(tasks)
    keep = np.sort(np.random.default_rng(seed).choice(len(tasks), size=limit, replace=False))
    return [tasks[i] for i in keep]


def stage_annotate(config: RunConfig, out: Path, manifest: Manifest,
                   ws: Workspace | None = None) -> AnnotationSet:
    started = time.time()
    ws = ws or Workspace(out, config)
    model = ws.matcher("annotate")
    graph = ws.graph("annotate")
    a = config.annotation
    tasks = annotation_subset(ws.tasks("annotate", "train"), a.max_tasks, config.seed)
    ann = annotate(model, graph, tasks, a.mode, a.k)
    ann.save(out / "annotations.jsonl")
    manifest.record("annotate", out, ["annotations.jsonl"], started=started)
    ws._cache["annotations.jsonl"] = ann
    return ann


def stage_train_selector(config: RunConfig, out: Path, manifest: Manifest,
                         ws: Workspace | None = None) -> SelectorModel:
    started = time.time()
    ws = ws or Workspace(out, config)
    ann = ws.annotations("train_selector")
    graph = ws.graph("train_selector")
    pairs = build_pairs(ann, config.annotation.per_task_cap, config.seed)
    cfg = config.resolved().selector
    if ann.mode == "multi-step" and cfg.mode != "multi-step":
        cfg = dataclasses.replace(cfg, mode="multi-step")
    run = train_selector(graph, pairs, cfg)
    run.model.save(out / "selector.ckpt")
    _write_curve(out / "selector_curve.csv", run.losses)
    (out / "selector_report.json").write_text(json.dumps(
        {"pairs": len(pairs), "heldout_pairs": run.heldout_pairs,
         "heldout_accuracy": run.heldout_accuracy}, indent=2))
    manifest.record("train_selector", out, ["selector.ckpt"],
                    ["selector_curve.csv", "selector_report.json"], started)
    ws._cache["selector.ckpt"] = run.model
    return run.model


def hybrid_optimize(config: RunConfig, out: str | Path):
    """Train the matcher, annotate with it, then train the selector.

    Data are generated first when ``out`` holds none. Returns the three
    models and the manifest recording them.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _set_workers(config.workers)
    manifest = Manifest.open(out, config)
    ws = Workspace(out, config)
    if not (out / "nodes.jsonl").exists():
        stage_generate_data(config, out, manifest)
    results = []
    for name, fn in zip(HYBRID_STAGES, (stage_train_matcher, stage_annotate, stage_train_selector)):
        try:
            results.append(fn(config, out, manifest, ws))
        except DependencyError:
            raise
        except Exception as exc:
            manifest.save(out)
            raise StageError(name, exc) from exc
        manifest.save(out)
    return results[0], results[1], results[2], manifest


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class Metrics:
    p_at_1: float
    ndcg: float
    records: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        return {"p_at_1": self.p_at_1, "ndcg": self.ndcg, "tasks": len(self.records)}


def rank_of_positive(candidates: Sequence[str], scores: Sequence[float], positive: str) -> int:
    """1-based rank of ``positive``; ties resolve by node id, independent of input order."""
    order = sorted(range(len(candidates)), key=lambda i: (-float(scores[i]), candidates[i]))
    return next(r for r, i in enumerate(order, 1) if candidates[i] == positive)


def evaluate(tasks: Sequence[MatchTask],
             scorer: Callable[[MatchTask], Sequence[float]]) -> Metrics:
    """P@1 and NDCG of a scorer returning one score per ``task.candidates``."""
    if not tasks:
        raise ValueError("evaluate needs at least one task")
    recs = []
    for t in tasks:
        scores = scorer(t)
        if len(scores) != len(t.candidates) or not len(scores):
            raise ValueError(f"scorer returned {len(scores)} scores for {len(t.candidates)} candidates")
        r = rank_of_positive(t.candidates, scores, t.positive_key)
        recs.append({"task": t.id, "rank": r, "ndcg": 1.0 / math.log2(r + 1)})
    return Metrics(float(np.mean([r["rank"] == 1 for r in recs])),
                   float(np.mean([r["ndcg"] for r in recs])), recs)


# A selection function maps (task, owner, counterpart) to indices into the
# owner's neighbor list, best first.
SelectFn = Callable[[MatchTask, str, str], Sequence[int]]


def cascade_scores(task: MatchTask, select: SelectFn, scorer: PairScorer) -> np.ndarray:
    """Matcher scores of every candidate after neighbor selection."""
    q = task.query
    pairs = []
    for c in task.candidates:
        qsel = sorted(select(task, q, c))
        ksel = sorted(select(task, c, q))
        pairs.append((q, [task.neighbors[q][i] for i in qsel],
                      c, [task.neighbors[c][i] for i in ksel]))
    return scorer.scores(pairs)


def policy_select(index: SelectorIndex, policy: TruncationPolicy) -> SelectFn:
    """Selection by the trained selector under a truncation policy."""
    multi = index.model.mode is SelectorMode.MULTI_STEP
    cache: dict[tuple[str, str], dict] = {}

    def overall(task: MatchTask, owner: str, counterpart: str):
        # the query's list is ranked once per candidate; key lists are ranked together
        key = (task.id, "query" if owner == task.query else "key")
        if key not in cache:
            if key[1] == "query":
                groups = [index.one_step(task.neighbors[task.query], c) for c in task.candidates]
                members = task.candidates
            else:
                groups = [index.one_step(task.neighbors[c], task.query) for c in task.candidates]
                members = task.candidates
            sels = truncate_group(groups, policy)
            cache.clear()
            cache[key] = dict(zip(members, sels))
        member = counterpart if owner == task.query else owner
        return cache[key][member].indices

    def select(task: MatchTask, owner: str, counterpart: str) -> Sequence[int]:
        nbrs = task.neighbors[owner]
        if not nbrs:
            return ()
        if policy.kind is TruncationKind.OVERALL:
            if multi:
                raise ValueError("OverallRanking needs a one-step selector")
            return overall(task, owner, counterpart)
        if multi:
            limit = policy.k if policy.kind is TruncationKind.FIXED_K else len(nbrs)
            steps = index.multi_step(owner, nbrs, counterpart, min(limit, policy.hard_cap))
            if policy.kind is TruncationKind.FIXED_K:
                return [i for i, _ in steps]
            bar = policy.tau if policy.kind is TruncationKind.ABSOLUTE else index.sim(owner, counterpart)
            chosen = []
            for i, s in steps:  # stop at the first step that fails the threshold
                if not s > bar:
                    break
                chosen.append(i)
            return chosen
        scores = index.one_step(nbrs, counterpart)
        ctx = index.sim(owner, counterpart) if policy.kind is TruncationKind.RELEVANCE else None
        return truncate(scores, policy, ctx).indices

    return select


def run_cascade(task: MatchTask, selector: SelectorModel, matcher: MatchModel,
                policy: TruncationPolicy, graph: TextGraph) -> list[tuple[str, float]]:
    """Select neighbors with the light model, then score every candidate with the matcher.

    Documents are encoded afresh for this task. Returns candidates sorted by
    score, best first, ties by candidate position.
    """
    docs = graph.nodes
    owners = (task.query, *task.candidates)
    needed = sorted({n for o in owners for n in task.neighbors[o]} | set(owners))
    local = TextGraph({n: docs[n] for n in needed}, {n: () for n in needed},
                      graph.vocab, graph.max_len)
    with torch.no_grad():
        index = SelectorIndex(selector, local)
        select = policy_select(index, policy)
        scores = []
        for c in task.candidates:
            qsel = sorted(select(task, task.query, c))
            ksel = sorted(select(task, c, task.query))
            s = match_score(matcher, docs[task.query],
                            [docs[task.neighbors[task.query][i]] for i in qsel],
                            docs[c], [docs[task.neighbors[c][i]] for i in ksel])
            scores.append(float(s))
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return [(task.candidates[i], scores[i]) for i in order]


def full_neighbor_ranking(task: MatchTask, matcher: MatchModel,
                          graph: TextGraph) -> list[tuple[str, float]]:
    docs = graph.nodes
    qn = [docs[n] for n in task.neighbors[task.query]]
    scores = []
    with torch.no_grad():
        for c in task.candidates:
            scores.append(float(match_score(matcher, docs[task.query], qn, docs[c],
                                            [docs[n] for n in task.neighbors[c]])))
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return [(task.candidates[i], scores[i]) for i in order]


# ---------------------------------------------------------------------------
# cost model
# ---------------------------------------------------------------------------


@dataclass
class CostReport:
    n: int
    k: int
    T_s: float
    T_m: float
    T_h: float
    all_neighbors: float
    heuristic: float
    cdsm: float
    measured_cascade: float | None = None
    measured_full: float | None = None

    def __post_init__(self):
        if self.k > self.n:
            raise ValueError("k must not exceed n")
        if min(self.T_s, self.T_m, self.T_h) < 0:
            raise ValueError("times must be non-negative")


def cost_model(n: int, k: int, T_s: float, T_m: float, T_h: float = 0.0,
               measured_cascade: float | None = None,
               measured_full: float | None = None) -> CostReport:
    return CostReport(n, k, T_s, T_m, T_h, n * T_m, n * T_h + k * T_m, n * T_s + k * T_m,
                      measured_cascade, measured_full)


def per_document_time(encoder: torch.nn.Module, docs: Sequence, repeats: int = 3,
                      batch_size: int = 1024) -> float:
    """Mean seconds per document of the encoder's forward pass; best of ``repeats``.

    Token padding happens once up front, so only the encoder itself is timed.
    """
    batches = [pad_batch(docs[i:i + batch_size]) for i in range(0, len(docs), batch_size)]
    with torch.no_grad():
        encoder(batches[0][:32])  # warm-up
        best = math.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            for b in batches:
                encoder(b)
            best = min(best, time.perf_counter() - t0)
    return best / len(docs)


def wallclock(fn: Callable[[MatchTask], object], tasks: Sequence[MatchTask]) -> float:
    t0 = time.perf_counter()
    for t in tasks:
        fn(t)
    return time.perf_counter() - t0
