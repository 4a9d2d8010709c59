"""
Truncation policies and what the cascade costs
==============================================

Train a small cascade and see what the selector keeps under each truncation
policy. Then check its picks against the matcher's own usefulness ranking
and measure the encoder time the cascade saves.
"""

import tempfile
from pathlib import Path

import torch

from cascade_match.analysis import agreement_analysis
from cascade_match.cli import load_config
from cascade_match.matcher import PairScorer
from cascade_match.pipeline import (Workspace, cascade_scores, cost_model, evaluate,
                                    full_neighbor_ranking, hybrid_optimize, per_document_time,
                                    policy_select, run_cascade, wallclock)
from cascade_match.selector import SelectorIndex, TruncationPolicy
from cascade_match.supervision import annotate

torch.set_num_threads(1)

# One-step annotation trains a one-step selector, the only kind the overall
# ranking policy accepts.
cfg = load_config(None, [
    "annotation.mode=one-step", "data.num_nodes=400", "data.num_topics=4", "data.intra_p=0.15",
    "tasks.max_test_tasks=100", "matcher.dim=32", "matcher.layers=1",
    "matcher.epochs=3", "annotation.max_tasks=300", "selector.dim=32",
])
out = Path(tempfile.mkdtemp(prefix="cascade-policies-"))
matcher, _, selector, _ = hybrid_optimize(cfg, out)
ws = Workspace(out, cfg)
graph, tasks = ws.graph("demo"), ws.tasks("demo", "test")

# %%
# Each policy decides how many of the ranked neighbors survive. Thresholds
# compare selector scores with a fixed bar or with the light similarity of
# the pair itself; the overall ranking pools the query's lists for every
# candidate and keeps a global top p.
index = SelectorIndex(selector, graph)
scorer = PairScorer(matcher, graph)
policies = {
    "FixedK k=5": TruncationPolicy.fixed_k(5),
    "AbsoluteThreshold tau=0": TruncationPolicy.absolute(0.0),
    "OverallRanking p=150": TruncationPolicy.overall(150),
    "RelevanceThreshold": TruncationPolicy.relevance(),
}
for name, policy in policies.items():
    select = policy_select(index, policy)
    kept = [len(select(t, t.query, t.positive_key)) for t in tasks]
    met = evaluate(tasks, lambda t, s=select: cascade_scores(t, s, scorer))
    print(f"{name:24s} P@1 {met.p_at_1:.3f}  NDCG {met.ndcg:.3f}  "
          f"query neighbors kept {sum(kept) / len(kept):.1f}")

# %%
# Agreement: for every test pair the matcher labels each neighbor by how much
# it moves the score, and we ask where the selector's top ten fall in that
# ordering. Random picks land in the first bucket at rate 10/n.
report = agreement_analysis(selector, annotate(matcher, graph, tasks), tasks, graph)
print({b: round(v, 3) for b, v in report.histogram.items()},
      f"random expectation {report.random_expectation:.3f} over {report.lists} lists")

# %%
# Cost: per-document encode time of each model, then the modeled and measured
# totals for n = 50 neighbors of which k = 5 reach the matcher.
docs = [graph.nodes[n] for n in graph.ids]
T_s, T_m = per_document_time(selector.encoder, docs), per_document_time(matcher.encoder, docs)
policy = TruncationPolicy.fixed_k(5)
rep = cost_model(50, 5, T_s, T_m, 0.0,
                 wallclock(lambda t: run_cascade(t, selector, matcher, policy, graph), tasks[:30]),
                 wallclock(lambda t: full_neighbor_ranking(t, matcher, graph), tasks[:30]))
print(f"T_s {T_s * 1e6:.1f} us  T_m {T_m * 1e6:.1f} us per document")
print(f"modeled per list: all neighbors {rep.all_neighbors * 1e3:.2f} ms, "
      f"cascade {rep.cdsm * 1e3:.2f} ms")
print(f"measured on 30 tasks: cascade {rep.measured_cascade:.1f} s, "
      f"all neighbors {rep.measured_full:.1f} s")
