"""Scoring, exact top-k ranking, retrieval metrics, the BM25 lexical upper
bound, and matched-noise query generation.

Retrieval is exact full-corpus scoring; corpora here are small enough that
approximate indexing would only cost determinism. Ties break by ascending
passage id everywhere.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import Corpus, CorpusError, normalize_token


@dataclass(frozen=True)
class PassageIndex:
    passage_ids: tuple[str, ...]
    matrix: np.ndarray  # N x d, unit rows

    def __post_init__(self):
        if len(self.passage_ids) != len(set(self.passage_ids)):
            raise CorpusError("duplicate passage ids in index")
        if self.matrix.shape[0] != len(self.passage_ids):
            raise CorpusError("id list and matrix row count differ")

    @property
    def n(self) -> int:
        return len(self.passage_ids)


@dataclass(frozen=True)
class RankedResult:
    query_key: object
    ranking: tuple[tuple[str, float], ...]  # (passage_id, score), descending
    positive_rank: int | None = None  # 1-based, at full corpus depth


def score_pair(query_embedding: np.ndarray, passage_embedding: np.ndarray) -> float:
    a = np.asarray(query_embedding, dtype=np.float64)
    b = np.asarray(passage_embedding, dtype=np.float64)
    if a.shape != b.shape:
        raise CorpusError(f"embedding width mismatch: {a.shape} vs {b.shape}")
    return float(a @ b)


def _ranked_order(scores: np.ndarray, passage_ids: Sequence[str]) -> list[int]:
    return sorted(range(len(passage_ids)),
                  key=lambda i: (-scores[i], passage_ids[i]))


def rank_of_positive(
    scores: np.ndarray, passage_ids: Sequence[str], positive_id: str
) -> int:
    """1-based rank of the positive under descending score, id-ascending ties."""
    pos = passage_ids.index(positive_id)
    target = scores[pos]
    rank = 1
    for i, pid in enumerate(passage_ids):
        if i == pos:
            continue
        if scores[i] > target or (scores[i] == target and pid < positive_id):
            rank += 1
    return rank


def rank_top_k(
    query_embedding: np.ndarray,
    index: PassageIndex,
    k: int,
    query_key: object = None,
    positive_id: str | None = None,
) -> RankedResult:
    if k < 1:
        raise CorpusError("k must be >= 1")
    if index.n == 0:
        raise CorpusError("empty index")
    scores = index.matrix.astype(np.float64) @ np.asarray(
        query_embedding, dtype=np.float64
    )
    order = _ranked_order(scores, index.passage_ids)
    top = tuple(
        (index.passage_ids[i], float(scores[i])) for i in order[: min(k, index.n)]
    )
    positive_rank = None
    if positive_id is not None:
        positive_rank = rank_of_positive(scores, index.passage_ids, positive_id)
    return RankedResult(query_key=query_key, ranking=top,
                        positive_rank=positive_rank)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunMetrics:
    """Metrics of one evaluation run over a set of single-positive queries.

    Precision@k follows the hit-rate reading: the fraction of queries whose
    positive appears in the top k. Per-query reciprocal ranks are kept for
    paired significance testing.
    """

    n_queries: int
    precision_at: dict[int, float]
    mrr: float
    reciprocal_ranks: tuple[float, ...] = field(repr=False, default=())


def compute_metrics(
    results: Sequence[RankedResult], k_values: Sequence[int] = (5, 10, 20)
) -> RunMetrics:
    if not results:
        raise CorpusError("no ranked results")
    rr = []
    hits = {k: 0 for k in k_values}
    for res in results:
        if res.positive_rank is None:
            raise CorpusError(f"query {res.query_key!r} has no known positive")
        rr.append(1.0 / res.positive_rank)
        for k in k_values:
            if res.positive_rank <= k:
                hits[k] += 1
    n = len(results)
    return RunMetrics(
        n_queries=n,
        precision_at={k: hits[k] / n for k in k_values},
        mrr=float(sum(rr) / n),
        reciprocal_ranks=tuple(rr),
    )


def aggregate_metrics(runs: Sequence[RunMetrics]) -> dict:
    """Mean +/- population sd of each metric across runs (folds/subjects)."""
    if not runs:
        raise CorpusError("nothing to aggregate")
    out: dict = {"n_runs": len(runs)}
    ks = sorted(runs[0].precision_at)
    for k in ks:
        vals = np.array([r.precision_at[k] for r in runs])
        out[f"p_at_{k}"] = {"mean": float(vals.mean()), "sd": float(vals.std())}
    mrrs = np.array([r.mrr for r in runs])
    out["mrr"] = {"mean": float(mrrs.mean()), "sd": float(mrrs.std())}
    return out


def paired_bootstrap_ci(
    rr_a: Sequence[float],
    rr_b: Sequence[float],
    n_boot: int = 2000,
    seed: int = 0,
    alpha: float = 0.05,
) -> tuple[float, float]:
    """Percentile CI for mean(rr_a - rr_b) under paired query resampling."""
    a = np.asarray(rr_a, dtype=np.float64)
    b = np.asarray(rr_b, dtype=np.float64)
    if a.shape != b.shape or a.size == 0:
        raise CorpusError("paired bootstrap needs equal-length non-empty inputs")
    diff = a - b
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, diff.size, size=(n_boot, diff.size))
    means = diff[idx].mean(axis=1)
    return (
        float(np.quantile(means, alpha / 2)),
        float(np.quantile(means, 1 - alpha / 2)),
    )


# ---------------------------------------------------------------------------
# Matched-noise queries
# ---------------------------------------------------------------------------

def make_noise_queries(
    query_matrices: Sequence[np.ndarray], rng: np.random.Generator
) -> list[np.ndarray]:
    """Same-shape Gaussian draws with per-feature-column mean and sd matched
    to the pooled rows of the real queries."""
    if not query_matrices:
        raise CorpusError("no query matrices")
    pooled = np.concatenate([np.asarray(m) for m in query_matrices], axis=0)
    mean = pooled.mean(axis=0)
    sd = pooled.std(axis=0)
    return [
        (rng.normal(size=np.asarray(m).shape) * sd + mean).astype(np.float32)
        for m in query_matrices
    ]


# ---------------------------------------------------------------------------
# BM25
# ---------------------------------------------------------------------------

class Bm25Index:
    """Standard BM25 over normalized corpus tokens (k1=1.2, b=0.75, idf with
    0.5 smoothing floored at zero via the +1 inside the log)."""

    def __init__(self, corpus: Corpus, k1: float = 1.2, b: float = 0.75):
        self.k1 = k1
        self.b = b
        self.passage_ids = tuple(sorted(corpus.passages))
        self.term_freqs: dict[str, Counter] = {}
        self.doc_lens: dict[str, int] = {}
        df: Counter = Counter()
        for pid in self.passage_ids:
            terms = [
                t for t in (normalize_token(tok) for tok in corpus[pid].tokens)
                if t
            ]
            counts = Counter(terms)
            self.term_freqs[pid] = counts
            self.doc_lens[pid] = len(terms)
            df.update(counts.keys())
        self.df = dict(df)
        self.n_docs = len(self.passage_ids)
        self.avg_len = (
            sum(self.doc_lens.values()) / self.n_docs if self.n_docs else 0.0
        )

    def idf(self, term: str) -> float:
        df = self.df.get(term, 0)
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))

    def score(self, query_terms: Sequence[str], passage_id: str) -> float:
        counts = self.term_freqs[passage_id]
        length = self.doc_lens[passage_id]
        score = 0.0
        for term in query_terms:
            tf = counts.get(term, 0)
            if tf == 0:
                continue
            norm = self.k1 * (1 - self.b + self.b * length / self.avg_len)
            score += self.idf(term) * tf * (self.k1 + 1) / (tf + norm)
        return score


def bm25_rank(
    query_tokens: Sequence[str],
    index: Bm25Index,
    k: int,
    query_key: object = None,
    positive_id: str | None = None,
) -> RankedResult:
    if not query_tokens:
        raise CorpusError("empty query")
    terms = [t for t in (normalize_token(tok) for tok in query_tokens) if t]
    scores = np.array(
        [index.score(terms, pid) for pid in index.passage_ids], dtype=np.float64
    )
    order = _ranked_order(scores, index.passage_ids)
    top = tuple(
        (index.passage_ids[i], float(scores[i]))
        for i in order[: min(k, len(order))]
    )
    positive_rank = None
    if positive_id is not None:
        positive_rank = rank_of_positive(
            scores, list(index.passage_ids), positive_id
        )
    return RankedResult(query_key=query_key, ranking=top,
                        positive_rank=positive_rank)
