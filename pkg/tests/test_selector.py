import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from torch import nn

from cascade_match.datagen import usefulness_oracle
from cascade_match.graphstore import Document, build_tasks, split_edges
from cascade_match.selector import (ConfigurationError, SelectorConfig, SelectorIndex,
                                    SelectorModel, SelectorPair, TruncationPolicy, UnifiedList,
                                    pairwise_loss, rank_multi_step, rank_one_step, selector_loss,
                                    sim, train_selector, truncate, truncate_group)
from cascade_match.supervision import PairDataset, PairRecord

D = torch.float64


class Lookup(nn.Module):
    """Encoder stand-in: a document's vector is a table row picked by its first token."""

    def __init__(self, table):
        super().__init__()
        self.table = torch.as_tensor(table, dtype=D)
        self.dim = self.table.shape[1]
        self.embedding = self.table

    def forward(self, tokens):
        return self.table[tokens[:, 0]]


def _doc(i):
    return Document(f"d{i}", (i,))


def _stub(table, mode="one-step", seed=0):
    table = np.asarray(table, dtype=float)
    m = SelectorModel(5, dim=table.shape[1], mode=mode, dtype=D, seed=seed)
    m.encoder = Lookup(table)
    return m


def test_one_step_example():
    m = _stub([[0, 0], [1, 0], [1, 0], [0, 1]])
    s = rank_one_step(m, _doc(1), _doc(1), [_doc(2), _doc(3)], side="query")
    np.testing.assert_array_equal(s.numpy(), [1.0, 0.0])


def test_one_step_uses_the_right_counterpart():
    m = _stub([[0, 0], [1, 0], [0, 1], [1, 1]])
    assert float(rank_one_step(m, _doc(1), _doc(2), [_doc(3)], "query")[0]) == 1.0
    assert float(rank_one_step(m, _doc(1), _doc(2), [_doc(3)], "key")[0]) == 1.0
    assert float(rank_one_step(m, _doc(1), _doc(2), [_doc(1)], "key")[0]) == 1.0
    assert float(rank_one_step(m, _doc(1), _doc(2), [_doc(1)], "query")[0]) == 0.0


@pytest.fixture(scope="module")
def real():
    return SelectorModel(30, dim=8, dtype=D, seed=3)


def _docs(rng, n):
    return [Document(str(i), tuple(int(t) for t in rng.integers(1, 30, size=int(rng.integers(1, 9)))))
            for i in range(n)]


def test_one_step_pointwise(real):
    rng = np.random.default_rng(0)
    Q, K, *nb = _docs(rng, 8)
    full = rank_one_step(real, Q, K, nb)
    for i in range(len(nb)):
        assert torch.equal(rank_one_step(real, Q, K, [nb[i]])[0], full[i])


def test_batched_index_matches_one_by_one(real):
    from cascade_match.graphstore import make_graph
    g = make_graph({f"v{i}": " ".join(f"w{j}" for j in range(i % 5 + 1)) for i in range(12)}, [])
    m = SelectorModel(g.vocab_size, dim=8, dtype=D, seed=1)
    idx = SelectorIndex(m, g)
    nbrs = [f"v{i}" for i in range(2, 12)]
    batch = idx.one_step(nbrs, "v1")
    single = rank_one_step(m, g.nodes["v0"], g.nodes["v1"], [g.nodes[n] for n in nbrs]).numpy()
    np.testing.assert_allclose(batch, single, rtol=1e-12)


def test_sim_symmetry_and_self_neighbor(real):
    rng = np.random.default_rng(1)
    Q, K = _docs(rng, 2)
    assert sim(real, Q, K) == sim(real, K, Q)
    twin = Document("twin", Q.tokens)
    assert float(rank_one_step(real, Q, K, [twin], "query")[0]) == sim(real, Q, K)


def test_scale_equivariance():
    rng = np.random.default_rng(2)
    table = np.abs(rng.standard_normal((9, 4)))
    a, b = _stub(table), _stub(3.0 * table)
    nb = [_doc(i) for i in range(2, 9)]
    sa, sb = rank_one_step(a, _doc(0), _doc(1), nb), rank_one_step(b, _doc(0), _doc(1), nb)
    np.testing.assert_allclose(sb.numpy(), 9.0 * sa.numpy(), rtol=1e-12)
    assert list(np.argsort(-sa.numpy(), kind="stable")) == list(np.argsort(-sb.numpy(), kind="stable"))


def _multi_oracle(m, Q, K, nbrs, k):
    """Exhaustive per-step argmax, every candidate scored on its own."""
    enc = lambda d: m.encoder(torch.tensor([d.tokens]))[0]  # noqa: E731
    rq, rk = enc(Q), enc(K)
    vecs = [enc(n) for n in nbrs]
    chosen = []
    for _ in range(min(k, len(nbrs))):
        best, best_s = None, -math.inf
        for i in range(len(nbrs)):
            if i in chosen:
                continue
            pooled = torch.stack([vecs[j] for j in chosen] + [vecs[i]]).max(0).values
            s = float(torch.dot(m.phi_w @ torch.cat([rq, pooled]) + m.phi_b, rk))
            if s > best_s:
                best, best_s = i, s
        chosen.append(best)
    return chosen


def test_multi_step_matches_oracle():
    rng = np.random.default_rng(3)
    for trial in range(40):
        m = SelectorModel(30, dim=6, mode="multi-step", dtype=D, seed=trial)
        n, k = int(rng.integers(1, 7)), int(rng.integers(1, 4))
        Q, K, *nb = _docs(rng, n + 2)
        with torch.no_grad():
            got = [i for i, _ in rank_multi_step(m, Q, K, nb, k)]
            assert got == _multi_oracle(m, Q, K, nb, k)
        assert len(got) == min(k, n)


def test_multi_step_exhausts_and_handles_duplicates():
    table = np.array([[1.0, 0.0], [0.5, 0.5], [0.2, 0.9], [0.2, 0.9], [0.9, 0.1]])
    m = _stub(table, mode="multi-step", seed=4)
    nb = [_doc(2), _doc(3), _doc(4)]
    sel = rank_multi_step(m, _doc(0), _doc(1), nb, k=5)
    assert sorted(i for i, _ in sel) == [0, 1, 2]
    # once one twin is in, adding the other leaves the pooled state unchanged
    with torch.no_grad():
        r = m.encoder(torch.tensor([[0], [1], [2]]))
        first = float(m.phi(r[0], r[2]) @ r[1])
        again = float(m.phi(r[0], torch.maximum(r[2], r[2])) @ r[1])
    assert first == again


def test_multi_step_requires_multi_mode(real):
    with pytest.raises(ConfigurationError):
        rank_multi_step(real, _doc(1), _doc(1), [_doc(2)], 1)


# --- truncation -----------------------------------------------------------

def test_truncation_examples():
    s = [0.9, 0.5, 0.1]
    assert truncate(s, TruncationPolicy.fixed_k(2)).indices == (0, 1)
    assert set(truncate(s, TruncationPolicy.absolute(0.4)).indices) == {0, 1}
    assert truncate(s, TruncationPolicy.absolute(0.95)).indices == ()
    assert truncate(s, TruncationPolicy.relevance(), 0.3).indices == (0, 1)
    groups = [[0.9, 0.2], [0.8, 0.7]]
    got = truncate_group(groups, TruncationPolicy.overall(3))
    assert [g.indices for g in got] == [(0,), (0, 1)]
    assert truncate(groups[1], TruncationPolicy.overall(3), UnifiedList(groups, 1)).indices == (0, 1)


def test_ties_go_to_lower_index():
    assert truncate([1.0] * 8, TruncationPolicy.fixed_k(5)).indices == (0, 1, 2, 3, 4)


def test_missing_context_and_bad_policies():
    with pytest.raises(ConfigurationError):
        truncate([1.0], TruncationPolicy.relevance())
    with pytest.raises(ConfigurationError):
        truncate([1.0], TruncationPolicy.overall(1))
    with pytest.raises(ConfigurationError):
        TruncationPolicy("FixedK", tau=0.3)
    with pytest.raises(ConfigurationError):
        TruncationPolicy("FixedK", k=3, hard_cap=0)
    p = TruncationPolicy.absolute(0.2, hard_cap=7)
    assert TruncationPolicy.from_dict(p.to_dict()) == p


scores = st.lists(st.floats(-5, 5, allow_nan=False), min_size=0, max_size=60)


@settings(max_examples=200, deadline=None)
@given(scores, st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 60), st.integers(0, 60))
def test_truncation_monotone_and_capped(s, t1, t2, k1, k2):
    t1, t2 = sorted((t1, t2))
    k1, k2 = sorted((k1, k2))
    a1 = set(truncate(s, TruncationPolicy.absolute(t1)).indices)
    a2 = set(truncate(s, TruncationPolicy.absolute(t2)).indices)
    f1 = set(truncate(s, TruncationPolicy.fixed_k(k1)).indices)
    f2 = set(truncate(s, TruncationPolicy.fixed_k(k2)).indices)
    assert a2 <= a1 and f1 <= f2
    assert max(len(a1), len(f2)) <= 20


# --- loss and training -----------------------------------------------------

def test_selector_loss_closed_forms(real):
    rng = np.random.default_rng(5)
    o, c, n = _docs(rng, 3)
    pair = SelectorPair(o, c, n, n)
    with torch.no_grad():
        assert abs(float(selector_loss(real, pair, "literal")) - (-0.5)) <= 1e-12
        assert abs(float(selector_loss(real, pair, "log")) - (-math.log(0.5))) <= 1e-12
    big = torch.tensor([200.0], dtype=D)
    assert abs(float(pairwise_loss(big, "literal")) + 1) < 1e-12
    assert float(pairwise_loss(big, "log")) < 1e-12


def test_multi_step_loss_uses_prefix():
    m = SelectorModel(30, dim=6, mode="multi-step", dtype=D, seed=0)
    rng = np.random.default_rng(6)
    o, c, p, n, x = _docs(rng, 5)
    with torch.no_grad():
        assert float(selector_loss(m, SelectorPair(o, c, p, n, (x,)))) != \
            float(selector_loss(m, SelectorPair(o, c, p, n)))


def _oracle_pairs(g, gt, tasks, per_task=6):
    recs = []
    for t in tasks:
        for owner, cp in ((t.query, t.positive_key), (t.positive_key, t.query)):
            good = [n for n in t.neighbors[owner] if usefulness_oracle(gt, t, n, owner, cp)]
            bad = [n for n in t.neighbors[owner] if not usefulness_oracle(gt, t, n, owner, cp)]
            for p, q in list(zip(good, bad))[:per_task]:
                recs.append(PairRecord(t.id, "query" if owner == t.query else "key", owner, cp, p, q))
    return PairDataset(recs)


@pytest.fixture(scope="module")
def oracle_pairs(small_graph):
    g, gt = small_graph
    tasks = build_tasks(g, split_edges(g, seed=0)["train"][:300], num_negatives=0)
    return g, _oracle_pairs(g, gt, tasks)


def test_training_beats_chance_on_heldout(oracle_pairs):
    g, pairs = oracle_pairs
    run = train_selector(g, pairs, SelectorConfig(dim=16, epochs=8, lr=3e-3, holdout=0.2))
    assert run.heldout_pairs > 0 and run.heldout_accuracy > 0.5


def test_toy_loss_strictly_decreases(oracle_pairs):
    g, pairs = oracle_pairs
    toy = PairDataset(pairs.records[:10])
    run = train_selector(g, toy, SelectorConfig(dim=16, epochs=10, batch_size=10, lr=1e-3,
                                                holdout=0.0, dtype="float64"))
    assert all(b < a for a, b in zip(run.losses, run.losses[1:]))


def test_training_is_deterministic(oracle_pairs, tmp_path):
    g, pairs = oracle_pairs
    cfg = SelectorConfig(dim=8, mode="multi-step", epochs=1, max_steps=4)
    train_selector(g, pairs, cfg).model.save(tmp_path / "a")
    train_selector(g, pairs, cfg).model.save(tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    back = SelectorModel.load(tmp_path / "a")
    assert back.mode.value == "multi-step" and back.phi_w is not None


def test_phi_only_in_multi_step():
    assert SelectorModel(5, dim=4).phi_w is None
    assert SelectorModel(5, dim=4, mode="multi-step").phi_w.shape == (4, 8)
