import pytest
import torch

from cascade_match.datagen import GenConfig, generate_graph

torch.set_num_threads(1)

SMALL = GenConfig(num_nodes=240, num_topics=4, intra_p=0.3, inter_p=0.002, seed=11)


@pytest.fixture(scope="session")
def small_graph():
    return generate_graph(SMALL)


def tiny_config(seed=0):
    """A run config small enough to train end to end in seconds."""
    from cascade_match.cli import load_config
    return load_config(None, [
        f"seed={seed}", "data.num_nodes=160", "data.num_topics=4", "data.intra_p=0.3",
        "data.inter_p=0.002", "tasks.num_negatives=9", "tasks.max_test_tasks=20",
        "matcher.kind=Mean", "matcher.dim=16", "matcher.layers=1", "matcher.heads=2",
        "matcher.epochs=4", "matcher.lr=0.003",
        "matcher.batch_size=32", "annotation.mode=one-step", "annotation.max_tasks=40",
        "selector.dim=16", "selector.epochs=1", "eval.k_values=[0,2,50]",
        "eval.timing_tasks=5", "eval.timing_docs=50",
    ])


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    from cascade_match.pipeline import hybrid_optimize
    out = tmp_path_factory.mktemp("run")
    cfg = tiny_config()
    matcher, ann, selector, manifest = hybrid_optimize(cfg, out)
    return cfg, out, matcher, ann, selector, manifest


_RESULTS = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record the outcome of one acceptance criterion for the end-of-run summary."""
    results = request.config.stash.setdefault(_RESULTS, {})

    def record(number, ok, detail=""):
        results[number] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        ok, detail = results[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
