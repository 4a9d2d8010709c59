"""Counterpart-conditioned neighbor selection for graph-based text matching.

A light CNN selector picks, per matching task, the few neighbors worth
feeding to a heavier transformer matcher. The package covers synthetic
data, both models, weak supervision of the selector by the matcher,
cascaded inference and the evaluation suites.
"""

from .datagen import GenConfig, GroundTruth, generate_graph, usefulness_oracle
from .graphstore import (Document, MatchTask, NeighborList, TextGraph, Vocabulary,
                         build_tasks, load_graph, sample_neighbors)
from .matcher import (AggregatorKind, MatchModel, MatcherConfig, aggregate, match_score,
                      matcher_loss, train_matcher)
from .pipeline import (CostReport, Metrics, RunConfig, cost_model, evaluate, hybrid_optimize,
                       run_cascade)
from .selector import (SelectionResult, SelectorConfig, SelectorModel, TruncationPolicy,
                       rank_multi_step, rank_one_step, selector_loss, sim, train_selector,
                       truncate)
from .supervision import (AnnotationSet, NeighborLabel, PairDataset, annotate_multi_step,
                          annotate_one_step, build_pairs)

__all__ = [
    "GenConfig",
    "GroundTruth",
    "generate_graph",
    "usefulness_oracle",
    "Document",
    "MatchTask",
    "NeighborList",
    "TextGraph",
    "Vocabulary",
    "build_tasks",
    "load_graph",
    "sample_neighbors",
    "AggregatorKind",
    "MatchModel",
    "MatcherConfig",
    "aggregate",
    "match_score",
    "matcher_loss",
    "train_matcher",
    "CostReport",
    "Metrics",
    "RunConfig",
    "cost_model",
    "evaluate",
    "hybrid_optimize",
    "run_cascade",
    "SelectionResult",
    "SelectorConfig",
    "SelectorModel",
    "TruncationPolicy",
    "rank_multi_step",
    "rank_one_step",
    "selector_loss",
    "sim",
    "train_selector",
    "truncate",
    "AnnotationSet",
    "NeighborLabel",
    "PairDataset",
    "annotate_multi_step",
    "annotate_one_step",
    "build_pairs",
]

__version__ = "0.1.0"
