"""Command-line entry point: every pipeline stage as a subcommand.

Exit codes: 0 success, 1 validation/usage error, 2 runtime failure. All
randomness derives from one logged seed, so a repeated invocation with the
same inputs reproduces its outputs bit for bit.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import corpus as corpus_mod
from .corpus import CorpusError, make_splits, read_corpus_manifest, \
    read_recordings, write_corpus_manifest, write_recordings
from .evaluate import (
    ablate,
    evaluate_run,
    format_report_table,
    sweep_bar_chart_svg,
    sweep_pmask,
    write_report,
)
from .ict import IctConfig, build_ict_dataset, write_ict_dump
from .synth import SynthConfig, generate_synthetic_dataset
from .training import (
    TrainConfig,
    load_checkpoint,
    parse_config_file,
    save_checkpoint,
    train,
    write_config_file,
)

log = logging.getLogger("bpr")

MANIFEST = "passages.jsonl"
RECORDINGS = "recordings.bprs"
CHECKPOINT = "checkpoint.bprc"


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we want exit 1
        raise _UsageError(message)


def _setup_logging() -> None:
    level = os.environ.get("BPR_LOG_LEVEL", "info").lower()
    mapping = {"error": logging.ERROR, "info": logging.INFO,
               "debug": logging.DEBUG}
    if level not in mapping:
        raise _UsageError(f"BPR_LOG_LEVEL must be one of {sorted(mapping)}")
    logging.basicConfig(level=mapping[level],
                        format="%(levelname)s %(name)s: %(message)s")


def _load_dataset(data_dir: Path):
    corpus = read_corpus_manifest(data_dir / MANIFEST)
    recordings = read_recordings(data_dir / RECORDINGS, corpus)
    return corpus, recordings


def _resolve_config(args) -> TrainConfig:
    config = (
        parse_config_file(args.config) if args.config else TrainConfig()
    )
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    log.info("resolved config: %s", json.dumps(dataclasses.asdict(config)))
    return config


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    config = SynthConfig(
        n_passages=args.passages,
        n_subjects=args.subjects,
        noise_sd=args.sigma,
        seed=args.seed,
    )
    log.info("synth config: %s", json.dumps(dataclasses.asdict(config)))
    corpus, recordings = generate_synthetic_dataset(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_corpus_manifest(out / MANIFEST, corpus)
    write_recordings(out / RECORDINGS, recordings, corpus)
    (out / "synth_config.json").write_text(
        json.dumps(dataclasses.asdict(config), indent=2, sort_keys=True)
    )
    log.info("wrote %d passages, %d recordings to %s",
             corpus.n, len(recordings), out)
    return 0


def cmd_stats(args) -> int:
    corpus, recordings = _load_dataset(Path(args.data))
    keys = [r.key for r in recordings]
    plans = make_splits(keys, k=args.folds, seed=args.seed)
    stats = corpus_mod.corpus_stats(corpus, plans[0])
    print(corpus_mod.format_stats_table(stats))
    return 0


def cmd_ict_dump(args) -> int:
    corpus, recordings = _load_dataset(Path(args.data))
    config = IctConfig(p_mask=args.pmask, seed=args.seed)
    pairs = build_ict_dataset(
        corpus, recordings, [r.key for r in recordings], config
    )
    write_ict_dump(args.out, pairs)
    log.info("wrote %d pairs to %s", len(pairs), args.out)
    return 0


def cmd_train(args) -> int:
    corpus, recordings = _load_dataset(Path(args.data))
    config = _resolve_config(args)
    keys = [r.key for r in recordings]
    plans = make_splits(keys, k=args.folds, seed=config.seed)
    plan = plans[args.fold]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(corpus, recordings, plan, config,
                   log_path=out / "train_log.jsonl")
    save_checkpoint(out / CHECKPOINT, result.model)
    write_config_file(out / "config.txt", config)
    corpus_mod.write_splits(out / "splits.json", plans)
    log.info("best dev MRR %.4f at epoch %d; checkpoint at %s",
             result.best_dev_mrr, result.best_epoch, out / CHECKPOINT)
    if result.aborted:
        log.error("training aborted on non-finite loss")
        return 2
    return 0


def _checkpoint_path(raw: str) -> Path:
    path = Path(raw)
    return path / CHECKPOINT if path.is_dir() else path


def cmd_eval(args, conditions=None) -> int:
    corpus, recordings = _load_dataset(Path(args.data))
    model = load_checkpoint(_checkpoint_path(args.checkpoint))
    keys = [r.key for r in recordings]
    plans = make_splits(keys, k=args.folds, seed=model.config.seed)
    if conditions is None:
        conditions = tuple(args.conditions.split(","))
    report = evaluate_run(
        model, corpus, recordings, plans,
        protocol=args.protocol, conditions=conditions,
        seed=model.config.seed, with_overlap=args.with_overlap,
    )
    write_report(Path(args.out), report)
    print(format_report_table(report))
    return 0


def cmd_noise_eval(args) -> int:
    args.conditions = "signal,noise"
    return cmd_eval(args)


def cmd_ablate(args) -> int:
    corpus, recordings = _load_dataset(Path(args.data))
    config = _resolve_config(args)
    keys = [r.key for r in recordings]
    plan = make_splits(keys, k=args.folds, seed=config.seed)[args.fold]
    results = ablate(corpus, recordings, plan, config, args.axis)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        name: {
            "p_at_5": entry["metrics"].precision_at[5],
            "p_at_10": entry["metrics"].precision_at[10],
            "p_at_20": entry["metrics"].precision_at[20],
            "mrr": entry["metrics"].mrr,
            "best_dev_mrr": entry["best_dev_mrr"],
            "best_epoch": entry["best_epoch"],
        }
        for name, entry in results.items()
    }
    (out / f"ablation_{args.axis}.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True)
    )
    for name, row in payload.items():
        print(f"{name:<16} P@5 {row['p_at_5']:.3f}  MRR {row['mrr']:.3f}")
    return 0


def cmd_sweep_pmask(args) -> int:
    corpus, recordings = _load_dataset(Path(args.data))
    config = _resolve_config(args)
    keys = [r.key for r in recordings]
    plan = make_splits(keys, k=args.folds, seed=config.seed)[args.fold]
    results = sweep_pmask(corpus, recordings, plan, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        str(level): {
            "p_at_5": entry["signal"].precision_at[5],
            "mrr": entry["signal"].mrr,
            "overlap0_p_at_5": entry["overlap_0"].precision_at[5],
            "overlap0_mrr": entry["overlap_0"].mrr,
        }
        for level, entry in results.items()
    }
    (out / "pmask_sweep.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True)
    )
    if args.svg:
        svg = sweep_bar_chart_svg(
            {level: entry["signal"].precision_at[5]
             for level, entry in results.items()}
        )
        Path(args.svg).write_text(svg)
    for level, row in sorted(payload.items()):
        print(f"p_mask {level:<6} P@5 {row['p_at_5']:.3f}  "
              f"mismatch P@5 {row['overlap0_p_at_5']:.3f}")
    return 0


def cmd_validate(args) -> int:
    data_dir = Path(args.data)
    problems = []
    try:
        corpus = read_corpus_manifest(data_dir / MANIFEST)
    except (OSError, CorpusError) as exc:
        print(f"FAIL manifest: {exc}")
        return 1
    try:
        recordings = read_recordings(data_dir / RECORDINGS, corpus)
    except (OSError, CorpusError) as exc:
        print(f"FAIL recordings: {exc}")
        return 1
    dims = {r.feature_dim for r in recordings}
    if len(dims) > 1:
        problems.append(f"inconsistent feature dims {sorted(dims)}")
    seen = set()
    for rec in recordings:
        if rec.key in seen:
            problems.append(f"duplicate recording key {rec.key}")
        seen.add(rec.key)
    if problems:
        for p in problems:
            print(f"FAIL {p}")
        return 1
    print(f"OK {corpus.n} passages, {len(recordings)} recordings, "
          f"feature_dim={next(iter(dims)) if dims else 0}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="bpr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic paired dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--passages", type=int, default=200)
    p.add_argument("--subjects", type=int, default=3)
    p.add_argument("--sigma", type=float, default=0.5)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stats", help="print corpus and split statistics")
    p.add_argument("--data", required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("ict-dump", help="dump generated query/document pairs")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pmask", type=float, default=0.9)
    p.set_defaults(func=cmd_ict_dump)

    p = sub.add_parser("train", help="train a retrieval model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--fold", type=int, default=0)
    p.set_defaults(func=cmd_train)

    for name, func in (("eval", cmd_eval), ("noise-eval", cmd_noise_eval)):
        p = sub.add_parser(name, help="evaluate a checkpoint")
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--protocol", choices=("kfold", "loso"),
                       default="kfold")
        p.add_argument("--folds", type=int, default=5)
        p.add_argument("--conditions", default="signal,noise")
        p.add_argument("--with-overlap", action="store_true")
        p.set_defaults(func=func)

    p = sub.add_parser("ablate", help="run one ablation axis")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--axis", required=True,
                   choices=("encoder", "negatives", "loss", "pooling"))
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--fold", type=int, default=0)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-pmask",
                       help="train and evaluate across mask probabilities")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--svg", default=None)
    p.set_defaults(func=cmd_sweep_pmask)

    p = sub.add_parser("validate", help="check data files for format errors")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_validate)

    return parser


def dispatch(argv: list[str]) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (CorpusError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        log.exception("runtime failure: %s", exc)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
