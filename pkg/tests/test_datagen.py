import numpy as np
import pytest

from cascade_match.datagen import GenConfig, GroundTruth, generate_graph, usefulness_oracle
from cascade_match.graphstore import MatchTask, sample_neighbors


def _mismatch_share(g, gt):
    edges = g.edges()
    return np.mean([not set(gt.topics[u]) & set(gt.topics[v]) for u, v in edges]), len(edges)


def test_default_size_and_degree():
    g, gt = generate_graph(GenConfig())
    assert len(g.nodes) == 2000 and len(gt.topics) == 2000
    g.validate()
    deg = np.mean([g.degree(n) for n in g.nodes])
    assert 17 <= deg <= 47  # neighbor-rich, like the real corpora


def test_intra_edges_dominate():
    g, gt = generate_graph(GenConfig(num_nodes=600, intra_p=0.02, inter_p=0.001, seed=3))
    share, _ = _mismatch_share(g, gt)
    assert share < 0.5


def test_no_hubs_means_mismatch_only_from_inter_p():
    cfg = GenConfig(num_nodes=800, multi_topic_frac=0.0, seed=4)
    g, gt = generate_graph(cfg)
    topics = np.array([gt.topics[n][0] for n in g.ids])
    counts = np.bincount(topics, minlength=cfg.num_topics)
    cross_pairs = (len(topics) ** 2 - np.sum(counts ** 2)) / 2
    mismatched = sum(1 for u, v in g.edges() if gt.topics[u] != gt.topics[v])
    mean, sd = cfg.inter_p * cross_pairs, np.sqrt(cfg.inter_p * cross_pairs)
    assert abs(mismatched - mean) < 4 * sd + 1


def test_seeded_generation_is_reproducible(tmp_path):
    a, ga = generate_graph(GenConfig(num_nodes=300, seed=9))
    b, gb = generate_graph(GenConfig(num_nodes=300, seed=9))
    assert a.edges() == b.edges() and a.vocab == b.vocab
    ga.save(tmp_path / "a")
    gb.save(tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    assert GroundTruth.load(tmp_path / "a").topics == ga.topics


@pytest.mark.parametrize("bad", [dict(num_topics=1), dict(inter_p=0.2, intra_p=0.1),
                                 dict(multi_topic_frac=1.5), dict(locality=0.0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        GenConfig(**bad).validate()


def test_oracle_definition():
    gt = GroundTruth({"q": (3,), "k": (3,), "a": (3,), "b": (1,), "h": (1, 3)})
    t = MatchTask("q", "k", (), {"q": ("a", "b", "h"), "k": ()})
    assert usefulness_oracle(gt, t, "a") is True
    assert usefulness_oracle(gt, t, "b") is False
    assert usefulness_oracle(gt, t, "h") is True
    with pytest.raises(KeyError):
        usefulness_oracle(gt, t, "zz")


def test_hub_usefulness_depends_on_counterpart(small_graph):
    g, gt = small_graph
    found = False
    for h in g.ids:
        if len(gt.topics[h]) != 2:
            continue
        a, b = gt.topics[h]
        ca = next((n for n in g.ids if gt.topics[n] == (a,)), None)
        cb = next((n for n in g.ids if gt.topics[n] == (b,)), None)
        nbrs = sample_neighbors(g, h).neighbors
        t = MatchTask(h, ca, (), {h: nbrs})
        ua = {n for n in nbrs if usefulness_oracle(gt, t, n, h, ca)}
        ub = {n for n in nbrs if usefulness_oracle(gt, t, n, h, cb)}
        if ua != ub:
            found = True
            break
    assert found


def _noise_share(g):
    return np.array([np.mean([g.vocab.itos[t].startswith("z") for t in g.nodes[n].tokens]) for n in g.ids])


def test_stubs_keep_mean_noise_and_split_in_two():
    cfg = GenConfig(num_nodes=1500, noise_frac=0.3, stub_frac=0.25, stub_noise=0.9, seed=5)
    g, _ = generate_graph(cfg)
    share = _noise_share(g)
    assert abs(share.mean() - 0.3) < 0.02
    # stubs near 0.9, the rest near 0.1: almost nobody sits in the middle
    assert np.mean((share > 0.35) & (share < 0.65)) < 0.05
    assert abs(np.mean(share >= 0.65) - 0.25) < 0.04


def test_hub_reach_limits_second_topic():
    cfg = GenConfig(num_nodes=800, multi_topic_frac=0.5, hub_reach=1, seed=6)
    _, gt = generate_graph(cfg)
    pairs = [ts for ts in gt.topics.values() if len(ts) == 2]
    assert pairs
    assert all(min((a - b) % 16, (b - a) % 16) == 1 for a, b in pairs)


@pytest.mark.parametrize("bad", [dict(local_frac=1.2), dict(intra_mix=-0.1), dict(stub_frac=1.0),
                                 dict(stub_frac=0.5, stub_noise=0.9, noise_frac=0.25),
                                 dict(hub_reach=0), dict(hub_reach=9)])
def test_new_knob_validation(bad):
    with pytest.raises(ValueError):
        GenConfig(**bad).validate()
