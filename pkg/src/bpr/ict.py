"""Pseudo query/document pair generation via the inverse cloze task.

A contiguous token span of a passage becomes an implicit query, represented
by the matching rows of the word-aligned signal recording. With probability
``p_mask`` the span is removed from the document; otherwise the document is
kept intact, forcing the model to learn matching beyond exact token overlap.

Overlap-controlled test sets re-insert a chosen fraction of the removed span
tokens at their original positions, isolating lexical overlap as the only
variable across conditions.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import Corpus, CorpusError, Key, Passage, SignalRecording

OVERLAP_LEVELS = (0.0, 0.25, 0.5, 0.75, 1.0)


@dataclass(frozen=True)
class IctConfig:
    query_ratio: float = 0.3
    p_mask: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.query_ratio < 1.0:
            raise CorpusError("query_ratio must be in (0, 1)")
        if not 0.0 <= self.p_mask <= 1.0:
            raise CorpusError("p_mask must be in [0, 1]")


@dataclass(frozen=True)
class IctPair:
    query_signal: np.ndarray          # span_len x F, rows of the recording
    query_tokens: tuple[str, ...]
    document_tokens: tuple[str, ...]
    positive_passage_id: str
    subject_id: str
    span_start: int
    span_len: int
    masked: bool

    @property
    def key(self) -> Key:
        return (self.positive_passage_id, self.subject_id)


def query_span_length(l: int, query_ratio: float = 0.3) -> int:
    """floor(ratio * l), clamped to at least one token."""
    return max(1, math.floor(l * query_ratio))


def derive_rng(seed: int, *parts: object) -> np.random.Generator:
    """Deterministic per-item stream from a global seed and string parts."""
    digest = hashlib.blake2b(
        ":".join([str(seed), *map(str, parts)]).encode("utf-8"), digest_size=8
    ).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


def generate_ict_pair(
    passage: Passage,
    recording: SignalRecording,
    config: IctConfig,
    rng: np.random.Generator,
) -> IctPair:
    l = len(passage)
    if l < 2:
        raise CorpusError(f"passage {passage.passage_id!r} too short for a span")
    if recording.n_tokens != l:
        raise CorpusError(
            f"recording ({recording.passage_id}, {recording.subject_id}) "
            f"not aligned to passage {passage.passage_id!r}"
        )
    span_len = query_span_length(l, config.query_ratio)
    start = int(rng.integers(0, l - span_len + 1))
    masked = bool(rng.random() < config.p_mask)
    if masked:
        doc = passage.tokens[:start] + passage.tokens[start + span_len:]
        if not doc:
            # Masking would empty the document; keep the first token.
            doc = passage.tokens[:1]
    else:
        doc = passage.tokens
    return IctPair(
        query_signal=recording.features[start:start + span_len],
        query_tokens=passage.tokens[start:start + span_len],
        document_tokens=doc,
        positive_passage_id=passage.passage_id,
        subject_id=recording.subject_id,
        span_start=start,
        span_len=span_len,
        masked=masked,
    )


def build_ict_dataset(
    corpus: Corpus,
    recordings: Mapping[Key, SignalRecording] | Iterable[SignalRecording],
    keys: Iterable[Key],
    config: IctConfig,
    epoch: int = 0,
) -> list[IctPair]:
    """One pair per (passage, subject) key, in sorted key order.

    Spans are re-drawn per epoch from an epoch-salted per-key stream, so the
    build is deterministic for a fixed (seed, epoch) and parallelizable.
    """
    if not isinstance(recordings, Mapping):
        recordings = {rec.key: rec for rec in recordings}
    pairs = []
    for pid, sid in sorted(keys):
        rng = derive_rng(config.seed, pid, sid, epoch)
        pairs.append(
            generate_ict_pair(corpus[pid], recordings[(pid, sid)], config, rng)
        )
    return pairs


def reinsert_span_tokens(
    pair: IctPair, passage: Passage, level: float,
    rng: np.random.Generator,
) -> IctPair:
    """Copy of ``pair`` with round(level * span_len) query tokens restored."""
    n_back = round(level * pair.span_len)
    span = range(pair.span_start, pair.span_start + pair.span_len)
    if n_back >= pair.span_len:
        chosen = set(span)
    else:
        chosen = set(
            rng.choice(list(span), size=n_back, replace=False).tolist()
        )
    doc = tuple(
        tok
        for i, tok in enumerate(passage.tokens)
        if i not in span or i in chosen
    )
    return replace(pair, document_tokens=doc, masked=(n_back == 0))


def build_overlap_testsets(
    pairs: Sequence[IctPair],
    corpus: Corpus,
    levels: Sequence[float] = OVERLAP_LEVELS,
    seed: int = 0,
) -> dict[float, list[IctPair]]:
    """Per level, documents with that fraction of query tokens re-inserted.

    Every source pair must be masked (the 0% base); only the positives are
    modified, the rest of the corpus stays as-is. Token choice at partial
    levels is seeded per pair, so two runs agree.
    """
    for level in levels:
        if level not in OVERLAP_LEVELS:
            raise CorpusError(f"overlap level {level} not in {OVERLAP_LEVELS}")
    for pair in pairs:
        if not pair.masked:
            raise CorpusError("overlap test sets require masked source pairs")
    out: dict[float, list[IctPair]] = {}
    for level in levels:
        out[level] = [
            reinsert_span_tokens(
                pair,
                corpus[pair.positive_passage_id],
                level,
                derive_rng(seed, pair.key[0], pair.key[1], f"overlap-{level}"),
            )
            for pair in pairs
        ]
    return out


def write_ict_dump(path: str | Path, pairs: Sequence[IctPair]) -> None:
    """Debug dump; the signal matrices stay in memory only."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for pair in pairs:
            fh.write(
                json.dumps(
                    {
                        "passage_id": pair.positive_passage_id,
                        "subject_id": pair.subject_id,
                        "query_tokens": list(pair.query_tokens),
                        "document_tokens": list(pair.document_tokens),
                        "span_start": pair.span_start,
                        "masked": pair.masked,
                    }
                )
                + "\n"
            )
