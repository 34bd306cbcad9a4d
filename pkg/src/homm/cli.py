"""Command-line entry point.

Every subcommand works on a run directory (``--out``).  ``train`` creates it;
the evaluation subcommands reload ``resolved-config`` and ``checkpoint.bin``
from it and append to ``metrics.csv``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, load_config
from .domains import cards

log = logging.getLogger("homm")

SUBCOMMANDS = ("train", "eval", "meta-eval", "sweep", "continual", "integrate", "oracle",
               "export-embeddings")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file overriding the profile defaults")
    common.add_argument("--seed", type=int, help="overrides HOMM_SEED and the config")
    common.add_argument("--out", help="run directory")
    common.add_argument("--profile", choices=("desk", "paper"))
    common.add_argument("--domain", choices=("poly", "cards"))
    common.add_argument("--ablation", choices=("separate-z", "conditioned-f"))
    common.add_argument("--cue", choices=("examples", "language"), default="examples")
    common.add_argument("--epochs", type=int, help="override the number of training epochs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="homm", description="Homoiconic meta-mapping experiments")
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "oracle":
            sp.add_argument("--game", choices=cards.GAMES, action="append")
            sp.add_argument("--variant", action="append", help="e.g. straight_flush+losers")
            sp.add_argument("--rule", choices=("rank", "opponent"), default="rank")
            sp.add_argument("--hands", action="store_true", help="print per-hand table")
        if name == "integrate":
            sp.add_argument("--replay-ratio", type=float)
            sp.add_argument("--integrate-epochs", type=int, default=20)
        if name == "sweep":
            sp.add_argument("--counts", default="1,2,5,10,20,50")
    return p


def _resolve_config(args):
    out = Path(args.out) if args.out else None
    cfg_path = args.config
    if cfg_path is None and out is not None and (out / "resolved-config").exists() \
            and args.command != "train":
        cfg_path = out / "resolved-config"
    cfg = load_config(cfg_path, domain=args.domain, profile=args.profile)
    seed = os.environ.get("HOMM_SEED")
    if seed is not None and args.seed is None and cfg_path is None:
        cfg.seed = int(seed)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.ablation:
        cfg.ablation = args.ablation
    if args.cue == "language" and args.command == "train":
        cfg.language = True
    if args.epochs is not None:
        cfg.data.epochs = args.epochs
    if out is not None:
        cfg.out = str(out)
    return cfg.validate()


def _load_run(args):
    from .harness import Experiment

    cfg = _resolve_config(args)
    exp = Experiment(cfg)
    ckpt = Path(cfg.out) / "checkpoint.bin"
    if not ckpt.exists():
        raise FileNotFoundError(f"{ckpt} not found; run `homm train --out {cfg.out}` first")
    meta = load_checkpoint(exp.model, ckpt)
    exp.epoch = meta["epoch"]
    metrics = Path(cfg.out) / "metrics.csv"
    if metrics.exists():
        with open(metrics) as fh:
            for r in csv.DictReader(fh):
                r["epoch"] = int(r["epoch"])
                r["value"] = float(r["value"])
                exp.metrics.rows.append(r)
    return exp


def _summarize(rows, keys=("protocol", "task_split", "mapping_split", "metric")) -> None:
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r["value"])
    for k, v in sorted(groups.items()):
        label = " ".join(x for x in k if x)
        print(f"{label:60s} n={len(v):4d} mean={np.mean(v):.4f}")


def cmd_oracle(args) -> int:
    """CSV table of oracle values; ``--hands`` adds per-hand win probabilities and bets."""
    variants = [cards.GameVariant(g) for g in (args.game or [])]
    variants += [cards.GameVariant.from_name(v) for v in (args.variant or [])]
    if not variants:
        variants = cards.all_variants()
    rows = cards.oracle_table(variants, args.rule)
    fields = list(rows[0]) if args.hands else [
        "variant", "optimal_expected_reward", "ignore_losers_reward", "ignore_switch_suit_reward"]
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["rule"] + fields)
    for r in rows:
        writer.writerow([args.rule] + [f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]
                                       for k in fields])
    return 0


def cmd_train(args) -> int:
    from .harness import Experiment, evaluate_basic, write_outputs

    cfg = _resolve_config(args)
    exp = Experiment(cfg)
    exp.train(log_every=max(1, cfg.data.epochs // 20))
    evaluate_basic(exp)
    write_outputs(exp, cfg.out)
    _summarize(exp.metrics.select(protocol="basic"))
    return 0


def cmd_eval(args) -> int:
    from .harness import evaluate_basic, evaluate_meta_classification, write_outputs

    exp = _load_run(args)
    rows = evaluate_basic(exp).rows + evaluate_meta_classification(exp).rows
    write_outputs(exp, exp.cfg.out)
    _summarize(rows)
    return 0


def cmd_meta_eval(args) -> int:
    from .harness import evaluate_meta_mapping_zero_shot, write_outputs

    exp = _load_run(args)
    if args.cue == "language" and exp.model.L is None:
        raise ConfigError("this run was trained without language; retrain with --cue language")
    rows = evaluate_meta_mapping_zero_shot(exp, args.cue).rows
    write_outputs(exp, exp.cfg.out)
    _summarize(rows)
    return 0


def cmd_sweep(args) -> int:
    from .harness import sample_efficiency_sweep, sweep_means, write_outputs

    exp = _load_run(args)
    counts = [int(c) for c in args.counts.split(",")]
    res = sample_efficiency_sweep(exp, counts=counts)
    write_outputs(exp, exp.cfg.out)
    for proto in ("sweep", "sweep_untrained"):
        for n, v in sweep_means(res, proto).items():
            print(f"{proto:16s} n={n:3d} mean={v:.4f}")
    return 0


def cmd_continual(args) -> int:
    from .harness import continual_embedding_learning, new_task_specs, write_outputs

    exp = _load_run(args)
    new = new_task_specs(exp, exp.cfg.continual.n_new)
    for mode in ("warm", "random", "untrained-net"):
        r = continual_embedding_learning(exp, new, mode)
        print(f"{mode:14s} start {r.curve[0]:.4f} end {r.curve[-1]:.4f} target {r.target:.4f} "
              f"steps-to-target {r.steps_to_target} old-tasks-unchanged {r.old_unchanged}")
    write_outputs(exp, exp.cfg.out)
    return 0


def cmd_integrate(args) -> int:
    from .harness import finetune_all_with_replay, new_task_specs, write_outputs

    exp = _load_run(args)
    new = new_task_specs(exp, exp.cfg.continual.n_new)
    res = finetune_all_with_replay(exp, new, args.replay_ratio, args.integrate_epochs)
    write_outputs(exp, exp.cfg.out)
    for r in res.rows:
        print(f"epoch {r['epoch']:3d} {r['metric']:16s} {r['value']:.4f}")
    return 0


def cmd_export(args) -> int:
    from .harness import export_embeddings

    exp = _load_run(args)
    path = Path(exp.cfg.out) / "embeddings.csv"
    n = export_embeddings(exp, path)
    print(f"wrote {n} rows to {path}")
    return 0


HANDLERS = {"train": cmd_train, "eval": cmd_eval, "meta-eval": cmd_meta_eval, "sweep": cmd_sweep,
            "continual": cmd_continual, "integrate": cmd_integrate, "oracle": cmd_oracle,
            "export-embeddings": cmd_export}


def cli_main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.command not in ("oracle",) and not args.out:
        parser.print_usage(sys.stderr)
        print("homm: error: --out is required", file=sys.stderr)
        return 2
    try:
        return HANDLERS[args.command](args)
    except (ConfigError, CheckpointError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"homm: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main())
