"""Command-line entry point: ``aprlab <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import data as dataset
from .errors import AprLabError, DataError
from .experiment import (
    compare,
    export_grid,
    grid_search,
    load_config,
    load_run,
    persist_split,
    run_single,
    write_report,
)
from .metrics import METRIC_ORDER, evaluate, relative_variation
from .model import load_model

log = logging.getLogger("aprlab")


class UsageError(AprLabError):
    exit_code = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _dump(obj):
    print(json.dumps(obj, indent=2))


def cmd_prepare(args):
    ds = dataset.load_interactions(args.input, args.format)
    split = dataset.temporal_leave_one_out(ds)
    dataset.save_split(split, args.out)
    stats = dataset.dataset_stats(ds)
    stats["test_users"] = len(split.test)
    stats["train_interactions"] = len(split.train)
    (Path(args.out) / "stats.json").write_text(json.dumps(stats, indent=2) + "\n")
    _dump(stats)


def cmd_synth(args):
    ds = dataset.generate_synthetic(args.users, args.items, args.interactions, args.head_share, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset.write_interactions(ds, out / "interactions.tsv")
    stats = dataset.dataset_stats(ds)
    (out / "stats.json").write_text(json.dumps(stats, indent=2) + "\n")
    _dump(stats)


def _config(args):
    overrides = {"out": getattr(args, "out", None)}
    return load_config(args.config, overrides)


def cmd_train(args):
    config = _config(args)
    eta = args.eta if args.eta is not None else config.eta[0]
    eps = args.eps if args.eps is not None else config.eps[0]
    alpha = args.alpha if args.alpha is not None else config.alpha[0]
    seed = args.seed if args.seed is not None else config.seeds[0]
    persist_split(config)
    rec = run_single(config, args.kind, eta, eps, alpha, seed)
    print(f"run directory: {rec.run_dir}")
    _dump({name: rec.report.values.get(name) for name in METRIC_ORDER})


def cmd_grid(args):
    config = _config(args)
    persist_split(config)
    results = grid_search(config, jobs=args.jobs)
    export_grid(results, config)
    for res in results:
        print(f"seed {res.seed}: {res.n_runs} runs, best BPR {res.best_bpr.key}, "
              f"best APR {res.best_apr.key if res.best_apr else '-'}")
        for key, msg in res.failed.items():
            print(f"  diverged: {key}")
        if res.best_apr is not None:
            print(compare(res.best_bpr, res.best_apr).to_text())
    print(f"reports written to {Path(config.out) / 'report'}")


def cmd_evaluate(args):
    model = load_model(args.model)
    split = dataset.load_split(args.split)
    report = evaluate(model, split, args.k)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        write_report(report, args.out)
    sys.stdout.write(report.to_json())


def cmd_attack(args):
    from .experiment import attack_eval

    model = load_model(args.model)
    split = dataset.load_split(args.split)
    clean = evaluate(model, split, args.k)
    attacked = attack_eval(model, split, args.eps, args.k, seed=args.seed)
    rows = {
        name: {"clean": clean.values.get(name), "attacked": attacked.values.get(name),
               "rv_pct": relative_variation(clean.values.get(name), attacked.values.get(name))}
        for name in METRIC_ORDER
    }
    _dump({"eps": args.eps, "k": args.k, "metrics": rows})


def cmd_compare(args):
    table = compare(load_run(args.base), load_run(args.cand))
    sys.stdout.write(table.to_text())
    if args.csv:
        Path(args.csv).write_text(table.to_csv())


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="aprlab", description="BPR vs APR matrix factorization laboratory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("prepare", help="temporal leave-one-out split of a rating log")
    s.add_argument("--input", required=True)
    s.add_argument("--format", default="tsv", choices=["tsv"])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("synth", help="generate two-tier synthetic feedback")
    s.add_argument("--users", type=int, required=True)
    s.add_argument("--items", type=int, required=True)
    s.add_argument("--interactions", type=int, required=True)
    s.add_argument("--head-share", type=float, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train and evaluate one configuration")
    s.add_argument("--config", required=True)
    s.add_argument("--kind", choices=["bpr", "apr"], default="bpr")
    s.add_argument("--eta", type=float)
    s.add_argument("--eps", type=float)
    s.add_argument("--alpha", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("grid", help="full BPR/APR grid search")
    s.add_argument("--config", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out")
    s.set_defaults(func=cmd_grid)

    s = sub.add_parser("evaluate", help="metrics of a saved model on a saved split")
    s.add_argument("--model", required=True)
    s.add_argument("--split", required=True)
    s.add_argument("--k", type=int, default=50)
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("attack", help="metrics under a full-model FGSM perturbation")
    s.add_argument("--model", required=True)
    s.add_argument("--split", required=True)
    s.add_argument("--eps", type=float, required=True)
    s.add_argument("--k", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_attack)

    s = sub.add_parser("compare", help="relative variation between two run directories")
    s.add_argument("--base", required=True)
    s.add_argument("--cand", required=True)
    s.add_argument("--csv")
    s.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return exc.exit_code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except AprLabError as exc:
        print(f"aprlab: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        # config/argument values that parsed but make no sense
        code = DataError.exit_code if isinstance(exc, OSError) else UsageError.exit_code
        print(f"aprlab: {exc}", file=sys.stderr)
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
