"""Command-line entry point: ``asyncmp <subcommand> ...``.

Exit codes: 0 success, 1 acceptance failure, 2 usage error,
3 numeric or protocol failure. Failures print one JSON line to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import bench, idproto
from .engine import format_record, read_trace
from .errors import (AmpError, ContractViolation, InvalidArgument, NumericFailure, OutOfDomain,
                     ParseError, ProtocolFailure, ProtocolViolation)
from .models import AmpModel, RunSettings, accuracy_of, load_model_config, train
from .verify import verify_mlp, verify_sim

EXIT_OK, EXIT_ACCEPTANCE, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2, 3

log = logging.getLogger("asyncmp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _sizes(text: str) -> list[int]:
    try:
        out = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not out or min(out) < 1:
        raise argparse.ArgumentTypeError("sizes must be positive")
    return out


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True, default=str))


def _print_config(args) -> None:
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    _emit({"config": cfg})


# ------------------------------------------------------------ subcommands

def cmd_verify_sim(args) -> int:
    rep = verify_sim(args.graphs, args.max_n, args.layers, args.seed, args.max_degree)
    _emit(rep.to_dict())
    return EXIT_OK if rep.passed else EXIT_ACCEPTANCE


def cmd_verify_mlp(args) -> int:
    rep = verify_mlp(args.samples, args.seed)
    _emit(rep.to_dict())
    return EXIT_OK if rep.passed else EXIT_ACCEPTANCE


def cmd_id_assign(args) -> int:
    if args.general:
        from .verify import random_bounded_graph
        import random
        if args.n is None:
            raise InvalidArgument("--general needs --n")
        rng = random.Random(args.seed)
        failures = 0
        for t in range(args.trials):
            g = random_bounded_graph(args.n, max(1, args.n - 1), rng)
            ids = idproto.assign_ids_general(g, seed=args.seed * 1_000_033 + t)
            failures += sorted(ids.values()) != list(range(g.n))
        report = {"n": args.n, "trials": args.trials, "uniqueness_failures": failures}
    else:
        report = idproto.protocol_report(args.k, args.trials, args.seed, args.surrender_trials)
    if args.trace_out:
        res = idproto.run_star(args.k, args.seed, record_trace=True)
        res.trace.write_jsonl(args.trace_out)
    _emit(report)
    bad = report["uniqueness_failures"] + report.get("completeness_failures", 0)
    return EXIT_ACCEPTANCE if bad else EXIT_OK


def _task_instances(task: str, seed: int, dataset_dir: str | None):
    if task == "tu":
        if not dataset_dir:
            raise InvalidArgument("--dataset-dir is required for task 'tu'")
        return bench.load_tu_dataset(dataset_dir)
    return bench.expressiveness_instances(task, seed)


def cmd_train(args) -> int:
    model_cfg, extra = load_model_config(args.model)
    out_dir = bench.results_dir()
    if args.task in ("parity", "parity_multi"):
        exp = bench.parity_task(seeds=[args.seed], model=model_cfg, iterations=args.iterations or 1000,
                                k_tasks=3 if args.task == "parity_multi" else 1)
        train_set, _ = bench.parity_data(exp, args.seed)
        tcfg = exp.train_config(args.seed)
    else:
        exp = bench.ExperimentConfig(args.task, model_cfg.to_dict(), [args.seed],
                                     iterations=args.iterations or 300, budget_factor=5,
                                     fixed_budget=args.fixed_budget, dataset_dir=args.dataset_dir)
        train_set = _task_instances(args.task, args.seed, args.dataset_dir)
        tcfg = exp.train_config(args.seed)
    _emit({"experiment": asdict(exp)})
    model, history = train(train_set, model_cfg, tcfg)
    model.save(args.out, {"task": args.task, "seed": args.seed, "train": tcfg.to_dict(),
                          "experiment": asdict(exp)})
    rows = [{"seed": args.seed, "size": "train", "metric": "loss", "value": h.loss} for h in history]
    bench.write_csv(rows, out_dir / f"train_{args.task}_seed{args.seed}.csv")
    _emit({"checkpoint": str(args.out), "final_loss": history[-1].loss if history else None,
           "iterations": len(history)})
    return EXIT_OK


def cmd_eval(args) -> int:
    model, meta = AmpModel.load(args.ckpt)
    out_dir = bench.results_dir()
    exp_data = dict(meta.get("experiment") or {})
    if args.task in ("parity", "parity_multi"):
        exp = bench.ExperimentConfig.from_dict(exp_data) if exp_data else bench.parity_task(
            model=model.cfg, k_tasks=model.n_origins)
        exp.seeds = [meta.get("seed", args.seed)]
        if args.sizes:
            exp.test_sizes = args.sizes
        if args.graphs_per_size:
            exp.test_graphs_per_size = args.graphs_per_size
        rep, _ = bench.parity_seed_report(exp, exp.seeds[0], args.jobs, model=model)
        summary = bench.summarize(exp, [rep])
        rows = bench.report_rows(summary)
    else:
        insts = _task_instances(args.task, args.seed, args.dataset_dir or exp_data.get("dataset_dir"))
        settings = (bench.ExperimentConfig.from_dict(exp_data).run_settings() if exp_data
                    else RunSettings(budget_factor=5))
        preds = bench.evaluate(model, insts, settings, args.jobs, args.seed)
        acc = accuracy_of([p for ps in preds for p in ps])
        summary = {"schema_version": bench.SCHEMA_VERSION, "task": args.task, "accuracy": acc}
        rows = [{"seed": args.seed, "size": "all", "metric": "accuracy", "value": acc}]
    stem = f"eval_{args.task}_seed{args.seed}"
    bench.write_csv(rows, out_dir / f"{stem}.csv")
    bench.write_json(summary, out_dir / f"{stem}.json")
    _emit({"csv": str(out_dir / f"{stem}.csv"), "json": str(out_dir / f"{stem}.json"),
           "summary": summary.get("summary", summary.get("accuracy"))})
    return EXIT_OK


def cmd_inspect(args) -> int:
    records = read_trace(args.trace)
    shown = records if args.limit is None else records[:args.limit]
    for i, rec in enumerate(shown):
        print(format_record(i, rec))
    print(f"{len(records)} deliveries")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="asyncmp", description="Asynchronous message passing toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for independent runs")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("verify-sim", help="synchronizer vs synchronous oracle")
    s.add_argument("--graphs", type=int, default=50)
    s.add_argument("--max-n", type=int, default=12)
    s.add_argument("--max-degree", type=int, default=5)
    s.add_argument("--layers", type=int, default=3)
    s.add_argument("--seed", type=int, required=True)
    s.set_defaults(func=cmd_verify_sim)

    s = sub.add_parser("verify-mlp", help="exact MLP vs transition table")
    s.add_argument("--samples", type=int, default=10_000)
    s.add_argument("--seed", type=int, required=True)
    s.set_defaults(func=cmd_verify_mlp)

    s = sub.add_parser("id-assign", help="identifier protocol Monte Carlo")
    s.add_argument("--k", type=int, default=4)
    s.add_argument("--trials", type=int, default=1000)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--surrender-trials", type=int, default=100_000)
    s.add_argument("--general", action="store_true", help="random general graphs instead of stars")
    s.add_argument("--n", type=int, default=None)
    s.add_argument("--trace-out", type=Path, default=None, help="write one star run as JSONL")
    s.set_defaults(func=cmd_id_assign)

    tasks = ["parity", "parity_multi", "cycle_pair", "limits1", "limits2", "max", "mean",
             "skip_cycles", "triangles", "lcc", "tu"]
    s = sub.add_parser("train", help="train an AMP model")
    s.add_argument("--task", choices=tasks, required=True)
    s.add_argument("--model", type=Path, required=True, help="model config JSON")
    s.add_argument("--out", type=Path, required=True, help="checkpoint path")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--iterations", type=int, default=None)
    s.add_argument("--dataset-dir", default=None)
    s.add_argument("--fixed-budget", type=int, default=None)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--task", choices=tasks, required=True)
    s.add_argument("--ckpt", type=Path, required=True)
    s.add_argument("--sizes", type=_sizes, default=None)
    s.add_argument("--graphs-per-size", type=int, default=None)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--dataset-dir", default=None)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("inspect", help="replay a JSONL trace")
    s.add_argument("--trace", type=Path, required=True)
    s.add_argument("--limit", type=int, default=None)
    s.set_defaults(func=cmd_inspect)
    return p


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message, "exit_code": code}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        return _fail("usage", str(e), EXIT_USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        return _fail("usage", "--jobs must be >= 1", EXIT_USAGE)
    _print_config(args)
    try:
        return args.func(args)
    except (InvalidArgument, ParseError, OutOfDomain, FileNotFoundError, json.JSONDecodeError) as e:
        return _fail(type(e).__name__, str(e), EXIT_USAGE)
    except (NumericFailure, ProtocolFailure, ProtocolViolation, ContractViolation, AmpError) as e:
        return _fail(type(e).__name__, str(e), EXIT_FAILURE)


if __name__ == "__main__":
    sys.exit(main())
