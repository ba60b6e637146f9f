"""Command-line entry point: ``smf VERB --config PATH [--condition NAME] [--seed N] [--out DIR]``.

The thread count for BLAS comes from the ``SMF_NUM_THREADS`` environment
variable; nothing else is read from the environment.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import nullcontext

from .experiment import (CONDITIONS, Runner, collect_reports, emit_reports, frontiers, load_config,
                         parse_condition, read_results_csv, run_experiment, summarize)

logger = logging.getLogger("smf")

VERBS = ("generate-data", "pretrain-toy", "retrofit", "collect-stats", "train", "evaluate",
         "experiment", "pareto", "report")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="smf", description="Sparse memory finetuning experiments at toy scale.")
    ap.add_argument("verb", choices=VERBS)
    ap.add_argument("--config", required=True, help="YAML config of flat dotted keys")
    ap.add_argument("--condition", choices=CONDITIONS, help="restrict to one condition")
    ap.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    ap.add_argument("--out", help="output directory (overrides paths.out)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _threads():
    n = os.environ.get("SMF_NUM_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def _memory_conditions(conditions):
    return [c for c in conditions if parse_condition(c)[1] is not None]


def run(args) -> int:
    overrides = {"paths.out": args.out} if args.out else None
    cfg = load_config(args.config, overrides)
    conditions = [args.condition] if args.condition else cfg.conditions
    seeds = [args.seed] if args.seed is not None else cfg.seeds
    runner = Runner(cfg)

    if args.verb == "generate-data":
        runner.generate_data()
        print(f"wrote corpora to {cfg.data_dir}")
    elif args.verb == "pretrain-toy":
        runner.pretrain_base()
        print(f"wrote {runner.base_path}")
    elif args.verb in ("retrofit", "collect-stats"):
        archs = sorted({"replacement" if parse_condition(c)[0] == "replacement" else "additive"
                        for c in _memory_conditions(conditions)})
        if not archs:
            raise ValueError(f"{args.verb} needs a memory condition; got {conditions}")
        for arch in archs:
            for s in seeds:
                if args.verb == "retrofit":
                    runner.retrofit(arch, s)
                else:
                    runner.collect_stats(arch, s)
                print(f"{args.verb}: {arch} seed {s} done")
    elif args.verb == "train":
        for c in conditions:
            for s in seeds:
                runner.train(c, s)
                print(f"trained {c} seed {s} -> {runner.run_dir(c, s)}")
    elif args.verb == "evaluate":
        for c in conditions:
            for s in seeds:
                rep = runner.evaluate(c, s)
                print(f"{c} seed {s}: mc={rep.mc_accuracy:.4f} ppl={rep.perplexity:.4f} qa={rep.qa_accuracy:.4f}")
    elif args.verb == "experiment":
        summaries = run_experiment(cfg, conditions, seeds)
        _print_summaries(summaries)
        print(f"reports in {cfg.out}")
    elif args.verb == "report":
        reports = collect_reports(cfg, conditions, seeds)
        if not reports:
            raise FileNotFoundError(f"no report.json files under {cfg.out / 'runs'}")
        summaries = [summarize(c, r) for c, r in reports.items()]
        emit_reports(summaries, cfg.out)
        _print_summaries(summaries)
    elif args.verb == "pareto":
        path = cfg.out / "results.csv"
        if not path.exists():
            raise FileNotFoundError(f"{path} not found; run report or experiment first")
        summaries = read_results_csv(path)
        for axis, ps in frontiers(summaries).items():
            print(f"{axis}: frontier = {', '.join(ps.members)}")
            print(f"{axis}: dominated = {', '.join(ps.dominated) or '-'}")
    return 0


def _print_summaries(summaries) -> None:
    print(f"{'condition':18s} {'task acc':>15s} {'perplexity':>17s} {'qa acc':>15s}")
    for s in summaries:
        print(f"{s.condition:18s} {s.mc_mean:7.4f}±{s.mc_std:6.4f} {s.ppl_mean:9.4f}±{s.ppl_std:6.4f} "
              f"{s.qa_mean:7.4f}±{s.qa_std:6.4f}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        with _threads():
            return run(args)
    except (ValueError, FileNotFoundError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
