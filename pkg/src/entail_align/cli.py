"""Command-line interface.

Subcommands: prepare, train, align, evaluate, sweep, run.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .config import ExperimentConfig, artifact_root
from .errors import ConfigError, DataError, TrainingDivergedError
from .inference import evaluate, read_predictions
from .kg import load_links
from .pipeline import (
    prepare_real,
    prepare_synthetic,
    run_alignment,
    run_experiment,
    run_sweep,
    run_training,
)

logger = logging.getLogger("entail_align")


def _add_common(parser):
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config key (repeatable)")
    parser.add_argument("--run-dir", help="artifact directory (default: $ENTAIL_ALIGN_ROOT/exp-<hash>)")


def _load_config(args):
    if args.config:
        config = ExperimentConfig.load(args.config, overrides=args.overrides)
    else:
        config = ExperimentConfig.from_overrides(args.overrides)
    return config


def _run_dir(args, config):
    return args.run_dir or os.path.join(artifact_root(), f"exp-{config.config_hash()}")


def build_parser():
    parser = argparse.ArgumentParser(prog="entail-align",
                                     description="Entity alignment via textual entailment")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="generate or normalize a dataset workspace")
    _add_common(p)
    p.add_argument("--rel1"), p.add_argument("--attr1")
    p.add_argument("--rel2"), p.add_argument("--attr2")
    p.add_argument("--links")

    p = sub.add_parser("train", help="train an aligner on a prepared workspace")
    _add_common(p)
    p.add_argument("--resume", action="store_true", help="continue from the last checkpoint")

    p = sub.add_parser("align", help="rank and re-rank test queries with a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", help="checkpoint path (default: <run-dir>/checkpoint_best.npz)")

    p = sub.add_parser("evaluate", help="recompute metrics from a predictions file")
    p.add_argument("--predictions", required=True)
    p.add_argument("--links", required=True, help="gold alignment links (2-column TSV)")
    p.add_argument("--ks", default="1,10")
    p.add_argument("--out", help="also write the JSON report here")

    p = sub.add_parser("sweep", help="evaluate across re-ranking thresholds or candidate counts")
    _add_common(p)
    p.add_argument("--axis", required=True, choices=("threshold", "candidates"))
    p.add_argument("--values", required=True, help="comma-separated sweep values")
    p.add_argument("--checkpoint")
    p.add_argument("--plot", action="store_true", help="write a metric-vs-value PNG")

    p = sub.add_parser("run", help="prepare + train + align + evaluate in one go")
    _add_common(p)
    p.add_argument("--resume", action="store_true")
    return parser


def _cmd_prepare(args):
    config = _load_config(args)
    config.validate(check_paths=False)
    data_dir = config.data_dir or os.path.join(_run_dir(args, config), "data")
    if args.rel1 or args.links:
        for name in ("rel1", "attr1", "rel2", "attr2", "links"):
            if not getattr(args, name):
                raise ConfigError(f"--{name} is required when preparing a real dataset")
        meta = prepare_real(config, data_dir, args.rel1, args.attr1, args.rel2, args.attr2, args.links)
    elif config.synthetic:
        meta = prepare_synthetic(config, data_dir)
    else:
        raise ConfigError("prepare needs either synthetic=true or the five dataset file flags")
    print(json.dumps({**meta, "data_dir": data_dir}, sort_keys=True, indent=2))
    return 0


def _cmd_train(args):
    config = _load_config(args)
    run_dir = _run_dir(args, config)
    config_hash = config.config_hash()
    if config.synthetic and not config.data_dir:
        config = config.replace(data_dir=os.path.join(run_dir, "data"))
    if config.synthetic and not os.path.exists(os.path.join(config.data_dir, "meta.json")):
        prepare_synthetic(config, config.data_dir)
    config.validate()
    out = run_training(config, run_dir, resume=args.resume, config_hash=config_hash)
    result = out["result"]
    print(json.dumps({
        "run_dir": run_dir,
        "checkpoint_best": out["checkpoint_best"],
        "best_epoch": result.best_epoch,
        "best_val_hits1": result.best_val_hits1,
        "inference_kind": result.inference_kind,
        "epochs": result.state.epoch,
        "stopped_early": result.stopped_early,
    }, sort_keys=True, indent=2))
    return 0


def _resolve_data_dir(args, config, run_dir):
    if config.synthetic and not config.data_dir:
        config = config.replace(data_dir=os.path.join(run_dir, "data"))
    config.validate()
    return config


def _cmd_align(args):
    config = _load_config(args)
    run_dir = _run_dir(args, config)
    config_hash = config.config_hash()
    config = _resolve_data_dir(args, config, run_dir)
    out = run_alignment(config, run_dir, checkpoint=args.checkpoint, config_hash=config_hash)
    sys.stdout.write(out["report"].to_table())
    print(f"reranked {out['reranked_count']} queries; predictions: {out['predictions']}")
    return 0


def _cmd_evaluate(args):
    results = read_predictions(args.predictions)
    gold = load_links(args.links, "test")
    ks = tuple(int(k) for k in args.ks.split(","))
    report = evaluate(results, gold, ks=ks)
    config_hash = ""
    with open(args.predictions, encoding="utf-8") as f:
        first = f.readline()
        if first.startswith("# config_hash="):
            config_hash = first.strip().split("=", 1)[1]
    reranked_count = sum(r.reranked for r in results)
    payload = report.to_json(config_hash=config_hash, reranked_count=reranked_count)
    sys.stdout.write(report.to_table())
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(payload)
    return 0


def _cmd_sweep(args):
    config = _load_config(args)
    run_dir = _run_dir(args, config)
    config_hash = config.config_hash()
    config = _resolve_data_dir(args, config, run_dir)
    values = [float(v) for v in args.values.split(",") if v.strip()]
    rows = run_sweep(config, run_dir, args.axis, values,
                     checkpoint=args.checkpoint, plot=args.plot, config_hash=config_hash)
    ks = sorted(rows[0]["hits_at"], key=int)
    print("value\t" + "\t".join(f"hits@{k}" for k in ks) + "\tmrr\treranked")
    for row in rows:
        cells = [f"{row['value']:g}"] + [f"{row['hits_at'][k]:.4f}" for k in ks]
        cells += [f"{row['mrr']:.4f}", str(row["reranked_count"])]
        print("\t".join(cells))
    return 0


def _cmd_run(args):
    config = _load_config(args)
    run_dir = _run_dir(args, config)
    out = run_experiment(config, run_dir, resume=args.resume)
    sys.stdout.write(out["report"].to_table())
    print(f"artifacts in {run_dir}")
    return 0


_COMMANDS = {
    "prepare": _cmd_prepare,
    "train": _cmd_train,
    "align": _cmd_align,
    "evaluate": _cmd_evaluate,
    "sweep": _cmd_sweep,
    "run": _cmd_run,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
