"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error (missing or
corrupt inputs, checkpoint mismatch), 4 numerical abort, 5 missing runs.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import experiment as ex
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DegenerateInputError,
    FingerprintError,
    FormatError,
    MissingRunsError,
    NumericalError,
)
from .tuning import STRATEGIES

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL, EXIT_MISSING = 0, 2, 3, 4, 5


def load_config(args):
    if args.config:
        config = ex.ExperimentConfig.load(args.config)
    else:
        config = ex.PRESETS[args.preset]()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out"] = args.out
    return config.replace(**changes) if changes else config


def _resolved_config_path(config):
    """Persist the resolved config at the run root so subprocesses see the same one."""
    os.makedirs(config.out, exist_ok=True)
    path = os.path.join(config.out, "config.json")
    config.save(path)
    return path


def _print_rows(rows):
    for row in rows:
        print(",".join(str(v) for v in row))


def cmd_generate(args, config):
    manifest = ex.cmd_generate(config, force=args.force)
    for cid, entry in manifest["centers"].items():
        print(f"{cid}: {len(entry['train'])} train / {len(entry['test'])} test, folds {[len(f) for f in entry['folds']]}")
    return EXIT_OK


def _center(args, config):
    return args.center or config.holdouts[0]


def cmd_pretrain(args, config):
    _, log, train_ids = ex.cmd_pretrain(config, _center(args, config))
    means = log.epoch_means()
    if means:
        print(f"pretrained on {len(train_ids)} samples: loss {means[0]:.4f} -> {means[-1]:.4f}")
    return EXIT_OK


def cmd_finetune(args, config):
    strategy = args.strategy or "deep_prompt"
    folds = range(config.folds) if args.fold is None else [args.fold]
    for fold in folds:
        r = ex.cmd_finetune(config, strategy, _center(args, config), fold)
        print(f"{r.center} {r.strategy} fold{r.fold}: old {r.old_center_mean:.4f} new {r.new_center_mean:.4f} learnable {r.learnable}")
    return EXIT_OK


def cmd_evaluate(args, config):
    if not args.checkpoint:
        raise ConfigError("evaluate needs --checkpoint")
    reports = ex.cmd_evaluate(config, args.checkpoint, _center(args, config), args.part, args.backbone, args.out_dir)
    for r in reports:
        print(f"{r.sample_id}: GTVp {r.scores['GTVp']:.4f} GTVn {r.scores['GTVn']:.4f} mean {r.mean:.4f}")
    print(f"mean {np.mean([r.mean for r in reports]):.4f}")
    return EXIT_OK


def cmd_compare(args, config):
    strategies = args.strategy_list or list(STRATEGIES)
    path = _resolved_config_path(config)
    matrix, missing = ex.cmd_compare(config, strategies, run=args.run, jobs=args.jobs, config_path=path)
    print(matrix.to_csv(), end="")
    if missing:
        raise MissingRunsError(f"{len(missing)} run cells missing (first: {missing[0]}); rerun with --run")
    return EXIT_OK


def cmd_ablate(args, config):
    rows, missing = ex.cmd_ablate(config, args.axis, args.center, run=args.run)
    print(",".join([ex.ABLATION_HEADERS[args.axis], "avg_dice", "GTVp", "GTVn"]))
    _print_rows([[r[0]] + ["NA" if v is None else f"{v:.4f}" for v in r[1:]] for r in rows])
    if missing:
        raise MissingRunsError(f"{len(missing)} ablation rows missing ({missing}); rerun with --run")
    return EXIT_OK


def cmd_stats(args, config):
    rows = ex.cmd_stats(config)
    for r in rows:
        print(
            f"{r['reference']} vs {r['other']} (n={r['n']}): "
            f"wilcoxon old p={r['wilcoxon_old_p']} new p={r['wilcoxon_new_p']}; t new p={r['t_new_p']}"
        )
    if any(r["n"] == 0 for r in rows):
        print("error: no completed run pairs for some comparisons; run compare --run first", file=sys.stderr)
        return EXIT_MISSING
    return EXIT_OK


def cmd_count_params(args, config):
    print("strategy,learnable,total,fraction")
    for s, count, total, frac in ex.count_table(config):
        print(f"{s},{count},{total},{frac:.6f}")
    return EXIT_OK


def cmd_gradcheck(args, config):
    report = ex.gradcheck_shallow(seed=0 if args.seed is None else args.seed)
    print(f"checked {sum(report.checked.values())} coordinates, max relative error {report.worst:.3e} (tol {report.tol:.0e})")
    return EXIT_OK if report.passed else EXIT_NUMERICAL


COMMANDS = {
    "generate": cmd_generate,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "ablate": cmd_ablate,
    "stats": cmd_stats,
    "count-params": cmd_count_params,
    "gradcheck": cmd_gradcheck,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON (default: the --preset)")
    common.add_argument("--preset", choices=sorted(ex.PRESETS), default="paper", help="built-in config when --config is absent")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--out", help="override the output root")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="promptseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="generate, preprocess and split synthetic centers")
    p.add_argument("--force", action="store_true", help="replace an existing data directory")

    p = sub.add_parser("pretrain", parents=[common], help="train the base model without the holdout center")
    p.add_argument("--center", help="holdout (new) center id")

    p = sub.add_parser("finetune", parents=[common], help="fine-tune one strategy on the holdout center")
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--center")
    p.add_argument("--fold", type=int, help="fold index (default: all folds)")

    p = sub.add_parser("evaluate", parents=[common], help="Dice of a checkpoint on one center")
    p.add_argument("--checkpoint")
    p.add_argument("--backbone", help="full checkpoint a delta is applied to (default: the center's pretrained model)")
    p.add_argument("--center")
    p.add_argument("--part", choices=("test", "train"), default="test")
    p.add_argument("--out-dir", help="write per-sample Dice CSV here")

    p = sub.add_parser("compare", parents=[common], help="old/new-center comparison matrix")
    p.add_argument("--strategy", dest="strategy_list", action="append", choices=STRATEGIES, help="restrict columns (repeatable)")
    p.add_argument("--run", action="store_true", help="execute missing run cells")
    p.add_argument("--jobs", type=int, default=1, help="parallel run-cell processes when --run is given")

    p = sub.add_parser("ablate", parents=[common], help="prompt ablation tables")
    p.add_argument("--axis", choices=ex.ABLATION_AXES, required=True)
    p.add_argument("--center")
    p.add_argument("--run", action="store_true", help="execute missing ablation runs")

    sub.add_parser("stats", parents=[common], help="Wilcoxon and t tests over completed runs")
    sub.add_parser("count-params", parents=[common], help="learnable parameters per strategy")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the shallow-prompt model")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args)
        return COMMANDS[args.command](args, config)
    except MissingRunsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, FormatError, FingerprintError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ContractError, DegenerateInputError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
