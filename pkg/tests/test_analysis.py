import numpy as np
import pytest

from cascade_match.analysis import (BUCKETS, agreement_analysis, agreement_dict, curve_analysis,
                                    method_rankings, peak, CurveRow)
from cascade_match.pipeline import Workspace
from cascade_match.selector import SelectorIndex
from cascade_match.supervision import AnnotationSet, NeighborLabel


@pytest.fixture(scope="module")
def loaded(tiny_run):
    cfg, out, matcher, ann, selector, _ = tiny_run
    ws = Workspace(out, cfg)
    return ws.graph("t"), ws.tasks("t", "test"), ws.ground_truth("t"), matcher, selector


def test_k0_identical_across_methods(loaded):
    graph, tasks, gt, matcher, selector = loaded
    rows = curve_analysis(selector, matcher, tasks, (0, 2), graph, gt)
    assert {r.method for r in rows} == {"random", "popularity", "similarity-lite", "cdsm", "oracle"}
    zero = {(r.p_at_1, r.ndcg) for r in rows if r.k == 0}
    assert len(zero) == 1


def test_full_k_identical_across_methods(loaded):
    graph, tasks, gt, matcher, selector = loaded
    rows = curve_analysis(selector, matcher, tasks[:8], (50,), graph, gt)
    assert len({r.p_at_1 for r in rows}) == 1


def test_rankings_are_permutations(loaded):
    graph, tasks, gt, _, selector = loaded
    index = SelectorIndex(selector, graph)
    t = tasks[0]
    for m in ("random", "popularity", "similarity-lite", "cdsm", "oracle"):
        order = method_rankings(m, graph, index, gt)(t, t.query, t.positive_key)
        assert sorted(order) == list(range(len(t.neighbors[t.query])))
    with pytest.raises(ValueError):
        method_rankings("bogus", graph)


def test_oracle_puts_useful_first(loaded):
    graph, tasks, gt, _, _ = loaded
    from cascade_match.datagen import usefulness_oracle
    rank = method_rankings("oracle", graph, gt=gt)
    for t in tasks[:5]:
        flags = [usefulness_oracle(gt, t, t.neighbors[t.query][i], t.query, t.positive_key)
                 for i in rank(t, t.query, t.positive_key)]
        assert flags == sorted(flags, reverse=True)


def test_peak_prefers_smaller_k_on_ties():
    rows = [CurveRow("cdsm", k, p, p) for k, p in ((0, 0.5), (5, 0.7), (10, 0.7), (50, 0.6))]
    assert peak(rows, "cdsm") == (5, 0.7)


def _self_annotation(index, tasks, noise=None):
    ann = AnnotationSet("one-step")
    rng = np.random.default_rng(0)
    for t in tasks:
        labs = []
        for side, owner, cp in (("query", t.query, t.positive_key), ("key", t.positive_key, t.query)):
            nb = t.neighbors[owner]
            s = index.one_step(nb, cp) if noise is None else rng.standard_normal(len(nb))
            labs += [NeighborLabel(side, n, "+" if v > 0 else "-", float(v)) for n, v in zip(nb, s)]
        ann.add(t, labs)
    return ann


def test_agreement_perfect_and_random(loaded):
    graph, tasks, _, _, selector = loaded
    index = SelectorIndex(selector, graph)
    perfect = agreement_analysis(index, _self_annotation(index, tasks), tasks)
    assert perfect.lists > 0 and perfect.histogram[BUCKETS[0]] == 1.0
    rand = agreement_analysis(index, _self_annotation(index, tasks, noise=True), tasks)
    assert sum(rand.histogram.values()) == pytest.approx(1.0)
    assert rand.top_mass < perfect.top_mass
    d = agreement_dict(perfect)
    assert d["ratio_to_random"] == pytest.approx(1.0 / perfect.random_expectation)


def test_random_expectation_is_top_over_length(loaded):
    graph, tasks, _, _, selector = loaded
    index = SelectorIndex(selector, graph)
    rep = agreement_analysis(index, _self_annotation(index, tasks), tasks)
    lens = [len(t.neighbors[o]) for t in tasks for o in (t.query, t.positive_key)]
    assert rep.lists == sum(n >= 10 for n in lens)
    assert rep.skipped == sum(n < 10 for n in lens)
    assert rep.random_expectation == pytest.approx(np.mean([10 / n for n in lens if n >= 10]))
