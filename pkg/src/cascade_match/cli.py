"""Command-line front end.

Every subcommand reads a JSON run config (``--config``), applies dotted
``--set key=value`` overrides and writes artifacts plus ``manifest.json``
under ``--out``. Failures exit nonzero after printing one JSON error line.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import analysis
from .pipeline import (DependencyError, Manifest, RunConfig, StageError, Workspace, _set_workers,
                       apply_override, cost_model, evaluate, full_neighbor_ranking, hybrid_optimize,
                       per_document_time, policy_select, cascade_scores, run_cascade,
                       stage_annotate, stage_generate_data, stage_train_matcher,
                       stage_train_selector, wallclock)
from .matcher import PairScorer
from .selector import SelectorIndex

EXIT_USAGE, EXIT_DEPENDENCY, EXIT_FAILURE = 2, 3, 1


class UsageError(ValueError):
    pass


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path: str | None, overrides: list[str]) -> RunConfig:
    base = RunConfig().to_dict()
    if path:
        user = json.loads(Path(path).read_text())
        for key, value in _flatten(user):
            _override(base, key, value)
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        _override(base, key, _parse_value(value))
    try:
        return RunConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _override(d: dict, key: str, value) -> None:
    try:
        apply_override(d, key, value)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from exc


def _flatten(d: dict, prefix: str = ""):
    for k, v in d.items():
        # policy is replaced whole: its keys depend on its kind
        if isinstance(v, dict) and k != "policy":
            yield from _flatten(v, f"{prefix}{k}.")
        else:
            yield f"{prefix}{k}", v


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_generate_data(cfg, out, manifest, ws):
    stage_generate_data(cfg, out, manifest)


def cmd_train_matcher(cfg, out, manifest, ws):
    stage_train_matcher(cfg, out, manifest, ws)


def cmd_annotate(cfg, out, manifest, ws):
    stage_annotate(cfg, out, manifest, ws)


def cmd_train_selector(cfg, out, manifest, ws):
    stage_train_selector(cfg, out, manifest, ws)


def cmd_evaluate(cfg, out, manifest, ws):
    started = time.time()
    stage = "evaluate"
    matcher = ws.matcher(stage)
    selector = ws.selector(stage)
    graph, tasks = ws.graph(stage), ws.tasks(stage, "test")
    scorer = PairScorer(matcher, graph)
    policy = cfg.truncation()
    select = policy_select(SelectorIndex(selector, graph), policy)
    rows = []
    for name, fn in (("no-neighbors", lambda t, o, c: ()),
                     ("all-neighbors", lambda t, o, c: range(len(t.neighbors[o]))),
                     ("cdsm", select)):
        met = evaluate(tasks, lambda t, fn=fn: cascade_scores(t, fn, scorer))
        rows.append({"method": name, **met.summary(), "policy": ""})
    rows[-1]["policy"] = json.dumps(policy.to_dict(), sort_keys=True)
    analysis.write_csv(out / "metrics.csv", rows)
    analysis.write_json(out / "metrics.json", rows)
    manifest.record(stage, out, ["metrics.csv", "metrics.json"], started=started)


def cmd_curves(cfg, out, manifest, ws):
    started = time.time()
    stage = "curves"
    rows = analysis.curve_analysis(ws.selector(stage), ws.matcher(stage), ws.tasks(stage, "test"),
                                   cfg.eval.k_values, ws.graph(stage), ws.ground_truth(stage),
                                   cfg.eval.methods, cfg.seed)
    dicts = [vars(r) for r in rows]
    analysis.write_csv(out / "curves.csv", dicts)
    analysis.write_json(out / "curves.json", dicts)
    analysis.curves_svg(out / "curves.svg", rows)
    manifest.record(stage, out, ["curves.csv", "curves.json", "curves.svg"], started=started)


def cmd_agreement(cfg, out, manifest, ws):
    started = time.time()
    stage = "agreement"
    from .supervision import annotate
    graph, tasks = ws.graph(stage), ws.tasks(stage, "test")
    ann = annotate(ws.matcher(stage), graph, tasks, "one-step")
    rep = analysis.agreement_analysis(ws.selector(stage), ann, tasks, graph)
    analysis.write_json(out / "agreement.json", analysis.agreement_dict(rep))
    analysis.agreement_svg(out / "agreement.svg", rep)
    manifest.record(stage, out, ["agreement.json", "agreement.svg"], started=started)


def cmd_cost(cfg, out, manifest, ws):
    started = time.time()
    stage = "cost"
    graph, matcher, selector = ws.graph(stage), ws.matcher(stage), ws.selector(stage)
    tasks = ws.tasks(stage, "test")[:cfg.eval.timing_tasks]
    docs = [graph.nodes[n] for n in graph.ids[:cfg.eval.timing_docs]]
    T_s = per_document_time(selector.encoder, docs)
    T_m = per_document_time(matcher.encoder, docs)
    policy = cfg.truncation()
    cascade = wallclock(lambda t: run_cascade(t, selector, matcher, policy, graph), tasks)
    full = wallclock(lambda t: full_neighbor_ranking(t, matcher, graph), tasks)
    k = policy.k if policy.k is not None else policy.hard_cap
    rep = cost_model(cfg.tasks.cap, min(k, cfg.tasks.cap), T_s, T_m, 0.0, cascade, full)
    analysis.write_json(out / "cost.json", vars(rep))
    analysis.write_csv(out / "cost.csv", [vars(rep)])
    manifest.record(stage, out, ["cost.json", "cost.csv"], started=started)


def cmd_all(cfg, out, manifest, ws):
    hybrid_optimize(cfg, out)
    manifest.stages.update(Manifest.open(out, cfg).stages)
    cmd_evaluate(cfg, out, manifest, Workspace(out, cfg))


COMMANDS = {
    "generate-data": (cmd_generate_data, "write a synthetic graph, splits and ranking tasks"),
    "train-matcher": (cmd_train_matcher, "train the graph-based matcher"),
    "annotate": (cmd_annotate, "label neighbor usefulness with the trained matcher"),
    "train-selector": (cmd_train_selector, "train the neighbor selector on the labels"),
    "evaluate": (cmd_evaluate, "P@1 and NDCG of the cascade on the test tasks"),
    "curves": (cmd_curves, "accuracy against the number of kept neighbors"),
    "agreement": (cmd_agreement, "selector picks against annotator ranks"),
    "cost": (cmd_cost, "per-document encode times and cascade wall-clock"),
    "all": (cmd_all, "generate, train, annotate, train the selector, evaluate"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cascade-match", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a dotted config key (repeatable)")
        p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--workers", type=int, default=None, help="torch threads (default 1)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _error(kind: str, message: str, **extra) -> None:
    print(json.dumps({"error": kind, "message": message, **extra}), file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        if args.workers is not None:
            cfg.workers = args.workers
    except (UsageError, OSError, json.JSONDecodeError) as exc:
        _error("usage", str(exc))
        return EXIT_USAGE
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _set_workers(cfg.workers)
    manifest = Manifest.open(out, cfg)
    try:
        COMMANDS[args.command][0](cfg, out, manifest, Workspace(out, cfg))
    except DependencyError as exc:
        _error("dependency", str(exc), stage=exc.stage, missing=exc.path.name,
               producer=exc.producer)
        return EXIT_DEPENDENCY
    except StageError as exc:
        _error("stage", str(exc), stage=exc.stage)
        return EXIT_FAILURE
    except Exception as exc:  # noqa: BLE001 - surfaced as a machine-readable record
        _error(type(exc).__name__, str(exc), stage=args.command)
        return EXIT_FAILURE
    manifest.save(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
