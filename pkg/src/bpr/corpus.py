"""Canonical data model and on-disk formats.

Two file formats are owned here:

* Corpus manifest: UTF-8 JSON-lines, one object per line with keys
  ``passage_id`` (str), ``text`` (str), ``tokens`` (list of str).
* Recordings container (little-endian binary): magic ``BPRS``, version u32,
  entry_count u64, then per entry
  ``passage_id`` (u16 length + UTF-8 bytes), ``subject_id`` (u16 + bytes),
  ``n_tokens`` u32, ``feature_dim`` u32, n_tokens*feature_dim float32
  row-major (token-major).

All types are immutable after construction; everything in this module is a
pure function of its inputs.
"""

from __future__ import annotations

import json
import math
import string
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

RECORDINGS_MAGIC = b"BPRS"
RECORDINGS_VERSION = 1

Key = tuple[str, str]  # (passage_id, subject_id)


class CorpusError(ValueError):
    """Invalid corpus content (bad invariants, duplicate ids, misalignment)."""


class FormatError(CorpusError):
    """Malformed on-disk data (bad magic, truncation, unparseable lines)."""


@dataclass(frozen=True)
class Passage:
    passage_id: str
    tokens: tuple[str, ...]
    text: str

    def __post_init__(self):
        if len(self.tokens) < 1:
            raise CorpusError(f"passage {self.passage_id!r} has no tokens")
        if " ".join(self.tokens) != " ".join(self.text.split()):
            raise CorpusError(
                f"passage {self.passage_id!r}: tokens do not reproduce text"
            )

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class Corpus:
    passages: Mapping[str, Passage]

    @property
    def n(self) -> int:
        return len(self.passages)

    @classmethod
    def from_passages(cls, passages: Iterable[Passage]) -> "Corpus":
        table: dict[str, Passage] = {}
        for p in passages:
            if p.passage_id in table:
                raise CorpusError(f"duplicate passage_id {p.passage_id!r}")
            table[p.passage_id] = p
        return cls(passages=table)

    def __getitem__(self, passage_id: str) -> Passage:
        return self.passages[passage_id]

    def __iter__(self):
        return iter(self.passages.values())


@dataclass(frozen=True)
class SignalRecording:
    """Per-(subject, passage) matrix of word-aligned feature vectors.

    One row per token of the referenced passage; width = channels * bands.
    """

    passage_id: str
    subject_id: str
    features: np.ndarray

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float32)
        if feats.ndim != 2:
            raise CorpusError("recording features must be a 2-D matrix")
        if not np.all(np.isfinite(feats)):
            raise CorpusError(
                f"recording ({self.passage_id}, {self.subject_id}) has "
                "non-finite values"
            )
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)

    @property
    def key(self) -> Key:
        return (self.passage_id, self.subject_id)

    @property
    def n_tokens(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class SplitPlan:
    fold_id: int
    train: frozenset[Key]
    dev: frozenset[Key]
    test: frozenset[Key]
    protocol: str = "kfold"

    def __post_init__(self):
        if self.train & self.dev or self.train & self.test or self.dev & self.test:
            raise CorpusError(f"fold {self.fold_id}: partitions overlap")

    def partition(self, name: str) -> frozenset[Key]:
        return {"train": self.train, "dev": self.dev, "test": self.test}[name]


# ---------------------------------------------------------------------------
# Manifest I/O
# ---------------------------------------------------------------------------

def read_corpus_manifest(path: str | Path) -> Corpus:
    path = Path(path)
    passages: list[Passage] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                passages.append(
                    Passage(
                        passage_id=record["passage_id"],
                        tokens=tuple(record["tokens"]),
                        text=record["text"],
                    )
                )
            except CorpusError:
                raise
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: malformed record: {exc}")
    if not passages:
        raise FormatError(f"{path}: empty manifest")
    return Corpus.from_passages(passages)


def write_corpus_manifest(path: str | Path, corpus: Corpus) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for p in corpus:
            fh.write(
                json.dumps(
                    {"passage_id": p.passage_id, "text": p.text,
                     "tokens": list(p.tokens)},
                    ensure_ascii=False,
                )
                + "\n"
            )


# ---------------------------------------------------------------------------
# Recordings container I/O
# ---------------------------------------------------------------------------

def write_recordings(
    path: str | Path,
    recordings: Sequence[SignalRecording],
    corpus: Corpus | None = None,
) -> None:
    """Write recordings in load-order; round-trips bit-exactly."""
    if recordings:
        dim = recordings[0].feature_dim
        for rec in recordings:
            if rec.feature_dim != dim:
                raise CorpusError("feature_dim must be constant across a dataset")
            if corpus is not None:
                if rec.passage_id not in corpus.passages:
                    raise CorpusError(f"recording references unknown passage "
                                      f"{rec.passage_id!r}")
                if rec.n_tokens != len(corpus[rec.passage_id]):
                    raise CorpusError(
                        f"recording ({rec.passage_id}, {rec.subject_id}): "
                        f"{rec.n_tokens} rows vs "
                        f"{len(corpus[rec.passage_id])} tokens"
                    )
    with Path(path).open("wb") as fh:
        fh.write(RECORDINGS_MAGIC)
        fh.write(struct.pack("<I", RECORDINGS_VERSION))
        fh.write(struct.pack("<Q", len(recordings)))
        for rec in recordings:
            for ident in (rec.passage_id, rec.subject_id):
                raw = ident.encode("utf-8")
                fh.write(struct.pack("<H", len(raw)))
                fh.write(raw)
            fh.write(struct.pack("<II", rec.n_tokens, rec.feature_dim))
            fh.write(
                np.ascontiguousarray(rec.features, dtype="<f4").tobytes()
            )


def read_recordings(
    path: str | Path, corpus: Corpus | None = None
) -> list[SignalRecording]:
    path = Path(path)
    data = path.read_bytes()
    offset = 0

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(data):
            raise FormatError(f"{path}: truncated at byte {offset}")
        chunk = data[offset:offset + n]
        offset += n
        return chunk

    if take(4) != RECORDINGS_MAGIC:
        raise FormatError(f"{path}: bad magic (expected BPRS)")
    (version,) = struct.unpack("<I", take(4))
    if version != RECORDINGS_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    (count,) = struct.unpack("<Q", take(8))

    recordings: list[SignalRecording] = []
    dim: int | None = None
    for _ in range(count):
        idents = []
        for _ in range(2):
            (n,) = struct.unpack("<H", take(2))
            idents.append(take(n).decode("utf-8"))
        passage_id, subject_id = idents
        n_tokens, feature_dim = struct.unpack("<II", take(8))
        if dim is None:
            dim = feature_dim
        elif feature_dim != dim:
            raise FormatError(f"{path}: inconsistent feature_dim")
        raw = take(n_tokens * feature_dim * 4)
        feats = np.frombuffer(raw, dtype="<f4").reshape(n_tokens, feature_dim)
        if corpus is not None:
            if passage_id not in corpus.passages:
                raise FormatError(f"{path}: unknown passage {passage_id!r}")
            if n_tokens != len(corpus[passage_id]):
                raise FormatError(
                    f"{path}: ({passage_id}, {subject_id}) row count "
                    f"{n_tokens} does not match passage length "
                    f"{len(corpus[passage_id])}"
                )
        recordings.append(
            SignalRecording(passage_id=passage_id, subject_id=subject_id,
                            features=feats.copy())
        )
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes")
    return recordings


# ---------------------------------------------------------------------------
# Token normalization and lexical overlap
# ---------------------------------------------------------------------------

def normalize_token(token: str) -> str:
    """Lowercase and strip surrounding punctuation."""
    return token.lower().strip(string.punctuation)


def _normalized_set(tokens: Iterable[str]) -> set[str]:
    return {t for t in (normalize_token(tok) for tok in tokens) if t}


def lexical_overlap(tokens_a: Iterable[str], tokens_b: Iterable[str]) -> float:
    """Jaccard similarity of the two unique normalized-token sets."""
    set_a, set_b = _normalized_set(tokens_a), _normalized_set(tokens_b)
    if not set_a or not set_b:
        raise CorpusError("empty token set after normalization")
    return len(set_a & set_b) / len(set_a | set_b)


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

def make_splits(
    keys: Sequence[Key],
    k: int = 5,
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> list[SplitPlan]:
    """Passage-keyed k-fold plans with train/dev/test ratios.

    Splitting is by passage_id, so a passage read by several subjects never
    straddles two partitions of the same fold. Fold i is a rotation of one
    seeded shuffle, giving k distinct test segments.
    """
    if k < 2:
        raise CorpusError("k must be >= 2")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise CorpusError(f"ratios must sum to 1, got {sum(ratios)}")
    if not keys:
        raise CorpusError("empty dataset")
    passage_ids = sorted({pid for pid, _ in keys})
    n = len(passage_ids)
    if n < k:
        raise CorpusError(f"fewer passages ({n}) than folds ({k})")

    rng = np.random.default_rng(seed)
    order = [passage_ids[i] for i in rng.permutation(n)]

    n_test = max(1, round(n * ratios[2]))
    n_dev = max(1, round(n * ratios[1]))
    if n_test + n_dev >= n:
        raise CorpusError("dataset too small for requested ratios")

    by_passage: dict[str, list[Key]] = {pid: [] for pid in passage_ids}
    for key in keys:
        by_passage[key[0]].append(key)

    def expand(pids: Iterable[str]) -> frozenset[Key]:
        return frozenset(key for pid in pids for key in by_passage[pid])

    plans = []
    for fold in range(k):
        shift = round(fold * n / k)
        rotated = order[shift:] + order[:shift]
        test_p = rotated[:n_test]
        dev_p = rotated[n_test:n_test + n_dev]
        train_p = rotated[n_test + n_dev:]
        plans.append(
            SplitPlan(
                fold_id=fold,
                train=expand(train_p),
                dev=expand(dev_p),
                test=expand(test_p),
                protocol="kfold",
            )
        )
    return plans


def make_loso_splits(
    keys: Sequence[Key],
    dev_ratio: float = 0.1,
    seed: int = 0,
) -> list[SplitPlan]:
    """Leave-one-subject-out plans: one fold per subject.

    The held-out subject's keys form the test set; the remaining subjects'
    keys are split train/dev by passage. Passage-level train/test overlap is
    inherent to this protocol (the same text may be read by several
    subjects); train and dev stay passage-disjoint.
    """
    subjects = sorted({sid for _, sid in keys})
    if len(subjects) < 2:
        raise CorpusError("leave-one-subject-out needs at least two subjects")
    plans = []
    for fold, held_out in enumerate(subjects):
        test = frozenset(key for key in keys if key[1] == held_out)
        rest = [key for key in keys if key[1] != held_out]
        pids = sorted({pid for pid, _ in rest})
        rng = np.random.default_rng(seed + fold)
        order = [pids[i] for i in rng.permutation(len(pids))]
        n_dev = max(1, round(len(order) * dev_ratio))
        dev_p = set(order[:n_dev])
        plans.append(
            SplitPlan(
                fold_id=fold,
                train=frozenset(k for k in rest if k[0] not in dev_p),
                dev=frozenset(k for k in rest if k[0] in dev_p),
                test=test,
                protocol="loso",
            )
        )
    return plans


def write_splits(path: str | Path, plans: Sequence[SplitPlan]) -> None:
    obj = {
        f"fold_{plan.fold_id}": {
            name: sorted(f"{pid}::{sid}" for pid, sid in plan.partition(name))
            for name in ("train", "dev", "test")
        }
        for plan in plans
    }
    Path(path).write_text(json.dumps(obj, indent=2), encoding="utf-8")


def read_splits(path: str | Path, protocol: str = "kfold") -> list[SplitPlan]:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    plans = []
    for name in sorted(obj, key=lambda s: int(s.split("_", 1)[1])):
        parts = {}
        for part in ("train", "dev", "test"):
            keys = []
            for item in obj[name][part]:
                pid, _, sid = item.partition("::")
                keys.append((pid, sid))
            parts[part] = frozenset(keys)
        plans.append(SplitPlan(fold_id=int(name.split("_", 1)[1]),
                               protocol=protocol, **parts))
    return plans


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitStats:
    n_queries: int
    n_passages: int
    n_words: int
    n_unique_words: int
    passage_len_mean: float
    passage_len_sd: float
    query_len_mean: float
    query_len_sd: float


@dataclass(frozen=True)
class CorpusStats:
    per_split: dict[str, SplitStats]
    overlap: dict[tuple[str, str], float]


def _mean_sd(values: Sequence[float]) -> tuple[float, float]:
    # Population formula (divide by n), matching "mean +/- sd" usage.
    if not values:
        return (0.0, 0.0)
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def corpus_stats(
    corpus: Corpus, plan: SplitPlan, query_ratio: float = 0.3
) -> CorpusStats:
    """Per-partition totals, length statistics, and pairwise lexical overlap.

    Query counts assume one query per (passage, subject) key; query lengths
    follow the span-length law ``max(1, floor(query_ratio * l))``.
    """
    per_split: dict[str, SplitStats] = {}
    token_sets: dict[str, set[str]] = {}
    for name in ("train", "dev", "test"):
        keys = plan.partition(name)
        pids = sorted({pid for pid, _ in keys})
        passages = [corpus[pid] for pid in pids]
        plens = [len(p) for p in passages]
        qlens = [max(1, math.floor(query_ratio * len(corpus[pid])))
                 for pid, _ in sorted(keys)]
        pl_mean, pl_sd = _mean_sd(plens)
        ql_mean, ql_sd = _mean_sd(qlens)
        per_split[name] = SplitStats(
            n_queries=len(keys),
            n_passages=len(passages),
            n_words=sum(plens),
            n_unique_words=len(
                _normalized_set(t for p in passages for t in p.tokens)
            ),
            passage_len_mean=pl_mean,
            passage_len_sd=pl_sd,
            query_len_mean=ql_mean,
            query_len_sd=ql_sd,
        )
        token_sets[name] = _normalized_set(
            t for p in passages for t in p.tokens
        )

    overlap: dict[tuple[str, str], float] = {}
    names = ("train", "dev", "test")
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            if token_sets[a] and token_sets[b]:
                overlap[(a, b)] = lexical_overlap(token_sets[a], token_sets[b])
    return CorpusStats(per_split=per_split, overlap=overlap)


def format_stats_table(stats: CorpusStats) -> str:
    rows = [
        ("Total queries", "n_queries", "{:d}"),
        ("Total passages", "n_passages", "{:d}"),
        ("Total words", "n_words", "{:d}"),
        ("Unique words", "n_unique_words", "{:d}"),
    ]
    names = ("train", "dev", "test")
    lines = ["{:<22}{:>10}{:>10}{:>10}".format("Metric", *[n.title() for n in names])]
    for label, attr, fmt in rows:
        vals = [fmt.format(getattr(stats.per_split[n], attr)) for n in names]
        lines.append("{:<22}{:>10}{:>10}{:>10}".format(label, *vals))
    for label, mean_attr, sd_attr in (
        ("Avg. passage length", "passage_len_mean", "passage_len_sd"),
        ("Avg. query length", "query_len_mean", "query_len_sd"),
    ):
        vals = [
            "{:.1f}+-{:.1f}".format(
                getattr(stats.per_split[n], mean_attr),
                getattr(stats.per_split[n], sd_attr),
            )
            for n in names
        ]
        lines.append("{:<22}{:>10}{:>10}{:>10}".format(label, *vals))
    lines.append("Lexical overlap:")
    for (a, b), value in sorted(stats.overlap.items()):
        lines.append(f"  {a}/{b}: {value:.3f}")
    return "\n".join(lines)
