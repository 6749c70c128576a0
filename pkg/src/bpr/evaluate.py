"""Evaluation protocols: per-fold and per-subject aggregation, the control
conditions (matched noise, text queries, BM25), overlap-controlled test
sets, the mask-probability sweep, and the ablation runner.

Evaluation is read-only with respect to checkpoints: the model is only ever
run in eval mode and all randomness is derived from explicit seeds.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .corpus import Corpus, CorpusError, Key, SignalRecording, SplitPlan
from .ict import (
    IctConfig,
    IctPair,
    build_ict_dataset,
    build_overlap_testsets,
    derive_rng,
)
from .retrieval import (
    Bm25Index,
    PassageIndex,
    RankedResult,
    RunMetrics,
    aggregate_metrics,
    bm25_rank,
    compute_metrics,
    make_noise_queries,
    rank_of_positive,
)
from .training import BprModel, TrainConfig, train

DEFAULT_CONDITIONS = ("signal", "noise")
ALL_CONDITIONS = ("signal", "noise", "text-query", "bm25-text")
PMASK_LEVELS = (0.5, 0.7, 0.9, 1.0)
K_VALUES = (5, 10, 20)


def _as_mapping(
    recordings: Sequence[SignalRecording] | Mapping[Key, SignalRecording]
) -> Mapping[Key, SignalRecording]:
    if isinstance(recordings, Mapping):
        return recordings
    return {r.key: r for r in recordings}


def encode_passage_index(
    model: BprModel, corpus: Corpus, passage_ids: Sequence[str]
) -> PassageIndex:
    """Encode each passage's original token sequence once."""
    pids = tuple(sorted(passage_ids))
    model.eval_mode()
    with torch.no_grad():
        matrix = model.encode_documents(
            [corpus[pid].tokens for pid in pids], keys=list(pids)
        )
    return PassageIndex(passage_ids=pids, matrix=matrix.cpu().numpy())


def _metrics_from_scores(
    pairs: Sequence[IctPair], sims: np.ndarray, pids: Sequence[str]
) -> RunMetrics:
    results = []
    for i, pair in enumerate(pairs):
        rank = rank_of_positive(sims[i], list(pids), pair.positive_passage_id)
        results.append(
            RankedResult(query_key=pair.key, ranking=(), positive_rank=rank)
        )
    return compute_metrics(results, K_VALUES)


def evaluate_condition(
    model: BprModel,
    corpus: Corpus,
    pairs: Sequence[IctPair],
    index: PassageIndex,
    condition: str,
    seed: int = 0,
) -> RunMetrics:
    model.eval_mode()
    if condition == "bm25-text":
        bm25 = Bm25Index(
            Corpus(passages={pid: corpus[pid] for pid in index.passage_ids})
        )
        results = [
            bm25_rank(
                corpus[p.positive_passage_id].tokens, bm25, k=max(K_VALUES),
                query_key=p.key, positive_id=p.positive_passage_id,
            )
            for p in pairs
        ]
        return compute_metrics(results, K_VALUES)

    with torch.no_grad():
        if condition == "signal":
            queries = model.encode_queries(pairs)
        elif condition == "noise":
            if model.config.query_encoder != "signal":
                raise CorpusError("noise condition needs the signal encoder")
            noise = make_noise_queries(
                [p.query_signal for p in pairs], derive_rng(seed, "noise")
            )
            fake = [replace(p, query_signal=m) for p, m in zip(pairs, noise)]
            queries = model.encode_queries(fake)
        elif condition == "text-query":
            queries = model.encode_documents(
                [corpus[p.positive_passage_id].tokens for p in pairs],
                keys=[p.positive_passage_id for p in pairs],
            )
        else:
            raise CorpusError(f"unknown condition {condition!r}")
        sims = (queries @ torch.from_numpy(index.matrix).to(queries.dtype).T)
    return _metrics_from_scores(pairs, sims.cpu().numpy(), index.passage_ids)


def evaluate_overlap_sweep(
    model: BprModel,
    corpus: Corpus,
    recordings: Mapping[Key, SignalRecording],
    test_keys: Sequence[Key],
    ict_config: IctConfig,
    levels: Sequence[float] = (0.0, 0.25, 0.5, 0.75, 1.0),
    seed: int = 0,
) -> dict[float, RunMetrics]:
    """Controlled lexical-overlap conditions.

    Base pairs are generated fully masked; per level, only the positive's
    document is modified (span tokens re-inserted) and re-encoded, while the
    distractor side of the index keeps the original passages.
    """
    base_cfg = replace(ict_config, p_mask=1.0)
    pairs = build_ict_dataset(corpus, recordings, test_keys, base_cfg, epoch=0)
    by_level = build_overlap_testsets(pairs, corpus, levels, seed=seed)
    index = encode_passage_index(
        model, corpus, sorted({pid for pid, _ in test_keys})
    )
    pos_col = {pid: i for i, pid in enumerate(index.passage_ids)}
    out: dict[float, RunMetrics] = {}
    model.eval_mode()
    with torch.no_grad():
        queries = model.encode_queries(pairs).cpu().numpy()
        for level in levels:
            docs = model.encode_documents(
                [p.document_tokens for p in by_level[level]]
            ).cpu().numpy()
            sims = queries @ index.matrix.T
            for i, pair in enumerate(pairs):
                col = pos_col[pair.positive_passage_id]
                sims[i, col] = queries[i] @ docs[i]
            out[level] = _metrics_from_scores(pairs, sims, index.passage_ids)
    return out


@dataclass
class EvalReport:
    protocol: str
    conditions: dict[str, list[RunMetrics]]
    aggregates: dict[str, dict]
    run_labels: list[str]
    overlap: dict[float, RunMetrics] | None = None

    def to_jsonable(self) -> dict:
        def run_dict(r: RunMetrics) -> dict:
            return {
                "n_queries": r.n_queries,
                "precision_at": {str(k): v for k, v in r.precision_at.items()},
                "mrr": r.mrr,
            }

        obj = {
            "protocol": self.protocol,
            "run_labels": self.run_labels,
            "conditions": {
                name: [run_dict(r) for r in runs]
                for name, runs in self.conditions.items()
            },
            "aggregates": self.aggregates,
        }
        if self.overlap is not None:
            obj["overlap"] = {
                str(level): run_dict(r) for level, r in self.overlap.items()
            }
        return obj


def evaluate_run(
    model: BprModel,
    corpus: Corpus,
    recordings: Sequence[SignalRecording] | Mapping[Key, SignalRecording],
    plans: Sequence[SplitPlan],
    protocol: str = "kfold",
    conditions: Sequence[str] = DEFAULT_CONDITIONS,
    ict_config: IctConfig | None = None,
    seed: int = 0,
    with_overlap: bool = False,
) -> EvalReport:
    """Evaluate a trained model's test-set retrieval under a protocol.

    kfold runs each plan's test partition; leave-one-subject-out groups one
    plan's test queries by subject. Either way each run encodes its test
    passages once, ranks every condition's queries against them, and the
    report aggregates mean +/- sd across runs.
    """
    if protocol not in ("kfold", "loso"):
        raise CorpusError(f"unknown protocol {protocol!r}")
    recordings = _as_mapping(recordings)
    if ict_config is None:
        ict_config = IctConfig(
            query_ratio=model.config.query_ratio,
            p_mask=model.config.p_mask,
            seed=model.config.seed,
        )

    if protocol == "kfold":
        groups = [(f"fold_{p.fold_id}", sorted(p.test)) for p in plans]
    else:
        test_keys = sorted(plans[0].test)
        subjects = sorted({sid for _, sid in test_keys})
        groups = [
            (sid, [k for k in test_keys if k[1] == sid]) for sid in subjects
        ]

    per_condition: dict[str, list[RunMetrics]] = {c: [] for c in conditions}
    labels = []
    for label, keys in groups:
        labels.append(label)
        pairs = build_ict_dataset(corpus, recordings, keys, ict_config, epoch=0)
        index = encode_passage_index(
            model, corpus, sorted({pid for pid, _ in keys})
        )
        for condition in conditions:
            per_condition[condition].append(
                evaluate_condition(model, corpus, pairs, index, condition,
                                   seed=seed)
            )

    aggregates = {c: aggregate_metrics(runs) for c, runs in per_condition.items()}
    overlap = None
    if with_overlap:
        overlap = evaluate_overlap_sweep(
            model, corpus, recordings, list(groups[0][1]), ict_config,
            seed=seed,
        )
    return EvalReport(
        protocol=protocol,
        conditions=per_condition,
        aggregates=aggregates,
        run_labels=labels,
        overlap=overlap,
    )


# ---------------------------------------------------------------------------
# Ablations and sweeps
# ---------------------------------------------------------------------------

ABLATION_AXES = ("encoder", "negatives", "loss", "pooling")


def _variants(base: TrainConfig, axis: str) -> dict[str, TrainConfig]:
    if axis == "encoder":
        return {
            "signal-encoder": replace(base, query_encoder="signal"),
            "text-encoder": replace(base, query_encoder="text"),
        }
    if axis == "negatives":
        return {
            "in-batch-only": replace(base, subject_aware=False),
            "subject-aware": replace(base, subject_aware=True),
        }
    if axis == "loss":
        return {
            "no-uniformity": replace(base, uniformity_weight=0.0),
            "with-uniformity": replace(base, uniformity_weight=0.1),
        }
    if axis == "pooling":
        return {p: replace(base, pooling=p) for p in ("mean", "max", "cls")}
    raise CorpusError(f"unknown ablation axis {axis!r}")


def ablate(
    corpus: Corpus,
    recordings: Sequence[SignalRecording] | Mapping[Key, SignalRecording],
    plan: SplitPlan,
    base_config: TrainConfig,
    axis: str,
) -> dict[str, dict]:
    """Train and evaluate every variant along one axis under identical seeds
    and data; returns per-variant test metrics and best dev MRR."""
    recordings = _as_mapping(recordings)
    out: dict[str, dict] = {}
    for name, config in _variants(base_config, axis).items():
        result = train(corpus, recordings, plan, config)
        report = evaluate_run(
            result.model, corpus, recordings, [plan],
            protocol="kfold", conditions=("signal",),
        )
        out[name] = {
            "config": asdict(config),
            "metrics": report.conditions["signal"][0],
            "best_dev_mrr": result.best_dev_mrr,
            "best_epoch": result.best_epoch,
        }
    return out


def sweep_pmask(
    corpus: Corpus,
    recordings: Sequence[SignalRecording] | Mapping[Key, SignalRecording],
    plan: SplitPlan,
    base_config: TrainConfig,
    levels: Sequence[float] = PMASK_LEVELS,
) -> dict[float, dict]:
    """Train one model per mask probability and measure retrieval both on
    the plain condition and under full lexical mismatch (overlap 0)."""
    recordings = _as_mapping(recordings)
    out: dict[float, dict] = {}
    for level in levels:
        config = replace(base_config, p_mask=level)
        result = train(corpus, recordings, plan, config)
        report = evaluate_run(
            result.model, corpus, recordings, [plan],
            protocol="kfold", conditions=("signal",), with_overlap=True,
        )
        out[level] = {
            "signal": report.conditions["signal"][0],
            "overlap_0": report.overlap[0.0],
            "best_dev_mrr": result.best_dev_mrr,
        }
    return out


# ---------------------------------------------------------------------------
# Report output
# ---------------------------------------------------------------------------

def format_report_table(report: EvalReport) -> str:
    lines = [
        "{:<14}{:>10}{:>10}{:>10}{:>10}".format(
            "Condition", "P@5", "P@10", "P@20", "MRR"
        )
    ]
    for name, agg in report.aggregates.items():
        lines.append(
            "{:<14}{:>10}{:>10}{:>10}{:>10}".format(
                name,
                *[
                    "{:.1f}+-{:.1f}".format(
                        100 * agg[key]["mean"], 100 * agg[key]["sd"]
                    )
                    for key in ("p_at_5", "p_at_10", "p_at_20", "mrr")
                ],
            )
        )
    if report.overlap is not None:
        lines.append("")
        lines.append("{:<14}{:>10}{:>10}{:>10}{:>10}".format(
            "Overlap", "P@5", "P@10", "P@20", "MRR"))
        for level, run in sorted(report.overlap.items()):
            lines.append(
                "{:<14}{:>10.1f}{:>10.1f}{:>10.1f}{:>10.1f}".format(
                    f"{level:.0%}",
                    100 * run.precision_at[5],
                    100 * run.precision_at[10],
                    100 * run.precision_at[20],
                    100 * run.mrr,
                )
            )
    return "\n".join(lines)


def write_report(out_dir: str | Path, report: EvalReport) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "results.json").write_text(
        json.dumps(report.to_jsonable(), indent=2, sort_keys=True)
    )
    (out_dir / "results.txt").write_text(format_report_table(report) + "\n")


def sweep_bar_chart_svg(
    values: Mapping[float, float], title: str = "P@5 by mask probability"
) -> str:
    """Minimal standalone SVG bar chart for sweep results."""
    width, height, pad = 480, 280, 40
    keys = sorted(values)
    bar_w = (width - 2 * pad) / max(1, len(keys)) * 0.7
    gap = (width - 2 * pad) / max(1, len(keys))
    peak = max(max(values.values()), 1e-9)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}">',
        f'<text x="{width / 2}" y="20" text-anchor="middle" '
        f'font-size="14">{title}</text>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" '
        f'y2="{height - pad}" stroke="black"/>',
    ]
    for i, key in enumerate(keys):
        h = (height - 2 * pad) * values[key] / peak
        x = pad + i * gap + (gap - bar_w) / 2
        y = height - pad - h
        parts.append(
            f'<rect x="{x:.1f}" y="{y:.1f}" width="{bar_w:.1f}" '
            f'height="{h:.1f}" fill="#4477aa"/>'
        )
        parts.append(
            f'<text x="{x + bar_w / 2:.1f}" y="{height - pad + 16}" '
            f'text-anchor="middle" font-size="12">{key}</text>'
        )
        parts.append(
            f'<text x="{x + bar_w / 2:.1f}" y="{y - 4:.1f}" '
            f'text-anchor="middle" font-size="11">{values[key]:.3f}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts)
