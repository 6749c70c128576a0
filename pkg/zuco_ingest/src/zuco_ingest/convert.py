"""Conversion from per-subject mat/HDF5 task files to the corpus formats.

Input directory layout: one file per subject, ``<anything>.mat`` or
``<anything>.h5``. Both containers carry the same logical content:

* ``subject_id`` — string.
* a collection of sentences, each with ``sentence_id`` (string), ``words``
  (list of strings), ``features`` (n_words x 840 float matrix), and
  ``fixated`` (n_words boolean flags; a word is fixated if the reader's
  gaze landed on it at least once).

Feature rows are channel-major concatenations of the eight canonical
frequency bands (``BAND_ORDER``) over 105 channels, width exactly 840.

Output directory layout (the formats the retrieval engine reads):

* ``passages.jsonl`` — UTF-8 JSON lines with ``passage_id``, ``text``,
  ``tokens``.
* ``recordings.bprs`` — little-endian binary: magic ``BPRS``, version u32,
  entry count u64, then per entry passage id (u16 length + UTF-8 bytes),
  subject id (u16 + bytes), n_tokens u32, feature_dim u32, and
  n_tokens * feature_dim float32 values row-major.
* ``ingest_report.json`` — sentences kept/dropped per subject.

This package deliberately does not import the retrieval engine; it writes
and re-validates the files with its own code so the two sides check each
other.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import h5py
import numpy as np
import scipy.io

BAND_ORDER = (
    "theta1", "theta2", "alpha1", "alpha2",
    "beta1", "beta2", "gamma1", "gamma2",
)
N_CHANNELS = 105
FEATURE_WIDTH = N_CHANNELS * len(BAND_ORDER)  # 840

RECORDINGS_MAGIC = b"BPRS"
RECORDINGS_VERSION = 1

POLICIES = ("zero-fill", "drop-sentence")


class IngestError(ValueError):
    """Unparseable input, bad width, or token/feature misalignment."""


@dataclass(frozen=True)
class RawWordFeature:
    sentence_id: str
    word_index: int
    word: str
    features: np.ndarray  # width FEATURE_WIDTH
    subject_id: str
    fixated: bool

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float32)
        if feats.shape != (FEATURE_WIDTH,):
            raise IngestError(
                f"({self.sentence_id}, {self.subject_id}) word "
                f"{self.word_index}: feature width {feats.shape} != "
                f"({FEATURE_WIDTH},)"
            )
        object.__setattr__(self, "features", feats)


@dataclass(frozen=True)
class SentenceRecord:
    """One sentence as read by one subject."""

    sentence_id: str
    subject_id: str
    words: tuple[str, ...]
    features: np.ndarray  # n_words x FEATURE_WIDTH
    fixated: tuple[bool, ...]

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float32)
        if feats.ndim != 2 or feats.shape[1] != FEATURE_WIDTH:
            raise IngestError(
                f"({self.sentence_id}, {self.subject_id}): feature matrix "
                f"{feats.shape} must be n_words x {FEATURE_WIDTH}"
            )
        if not (len(self.words) == feats.shape[0] == len(self.fixated)):
            raise IngestError(
                f"({self.sentence_id}, {self.subject_id}): "
                f"{len(self.words)} words, {feats.shape[0]} feature rows, "
                f"{len(self.fixated)} fixation flags"
            )
        if not self.words:
            raise IngestError(
                f"({self.sentence_id}, {self.subject_id}): empty sentence"
            )
        if not np.all(np.isfinite(feats[np.asarray(self.fixated)])):
            raise IngestError(
                f"({self.sentence_id}, {self.subject_id}): non-finite "
                "features on fixated words"
            )
        object.__setattr__(self, "features", feats)

    def word_records(self) -> list[RawWordFeature]:
        return [
            RawWordFeature(
                sentence_id=self.sentence_id,
                word_index=i,
                word=self.words[i],
                features=self.features[i],
                subject_id=self.subject_id,
                fixated=self.fixated[i],
            )
            for i in range(len(self.words))
        ]


@dataclass
class ConversionReport:
    kept: dict[str, list[str]] = field(default_factory=dict)
    dropped: dict[str, list[str]] = field(default_factory=dict)
    policy: str = "zero-fill"

    def to_json(self) -> str:
        return json.dumps(
            {"policy": self.policy, "kept": self.kept,
             "dropped": self.dropped},
            indent=2, sort_keys=True,
        )


# ---------------------------------------------------------------------------
# Readers
# ---------------------------------------------------------------------------

def _mat_list(value) -> list:
    """Undo scipy's squeeze of single-element cell arrays."""
    if isinstance(value, np.ndarray):
        return list(value.ravel())
    return [value]


def _read_mat(path: Path) -> list[SentenceRecord]:
    try:
        mat = scipy.io.loadmat(
            path, squeeze_me=True, struct_as_record=False
        )
    except Exception as exc:
        raise IngestError(f"{path}: unparseable mat file: {exc}") from exc
    try:
        subject_id = str(mat["subject_id"])
        sentences = _mat_list(mat["sentences"])
        records = []
        for sent in sentences:
            records.append(
                SentenceRecord(
                    sentence_id=str(sent.sentence_id),
                    subject_id=subject_id,
                    words=tuple(str(w) for w in _mat_list(sent.words)),
                    features=np.atleast_2d(
                        np.asarray(sent.features, dtype=np.float32)
                    ),
                    fixated=tuple(
                        bool(f) for f in _mat_list(sent.fixated)
                    ),
                )
            )
        return records
    except (AttributeError, KeyError) as exc:
        raise IngestError(f"{path}: missing field: {exc}") from exc


def _read_h5(path: Path) -> list[SentenceRecord]:
    try:
        with h5py.File(path, "r") as fh:
            subject_id = fh.attrs["subject_id"]
            if isinstance(subject_id, bytes):
                subject_id = subject_id.decode("utf-8")
            records = []
            for sentence_id in sorted(fh["sentences"]):
                grp = fh["sentences"][sentence_id]
                words = tuple(
                    w.decode("utf-8") if isinstance(w, bytes) else str(w)
                    for w in grp["words"][()]
                )
                records.append(
                    SentenceRecord(
                        sentence_id=str(sentence_id),
                        subject_id=str(subject_id),
                        words=words,
                        features=np.asarray(
                            grp["features"][()], dtype=np.float32
                        ),
                        fixated=tuple(bool(f) for f in grp["fixated"][()]),
                    )
                )
            return records
    except IngestError:
        raise
    except (OSError, KeyError) as exc:
        raise IngestError(f"{path}: unparseable HDF5 file: {exc}") from exc


def read_subject_file(path: str | Path) -> list[SentenceRecord]:
    path = Path(path)
    if path.suffix == ".mat":
        return _read_mat(path)
    if path.suffix in (".h5", ".hdf5"):
        return _read_h5(path)
    raise IngestError(f"{path}: unsupported file type {path.suffix!r}")


# ---------------------------------------------------------------------------
# Conversion
# ---------------------------------------------------------------------------

def _apply_policy(
    records: list[SentenceRecord], policy: str, report: ConversionReport
) -> list[SentenceRecord]:
    kept: list[SentenceRecord] = []
    for rec in records:
        report.kept.setdefault(rec.subject_id, [])
        report.dropped.setdefault(rec.subject_id, [])
        if all(rec.fixated):
            kept.append(rec)
            report.kept[rec.subject_id].append(rec.sentence_id)
        elif policy == "drop-sentence":
            report.dropped[rec.subject_id].append(rec.sentence_id)
        else:  # zero-fill
            feats = rec.features.copy()
            feats[~np.asarray(rec.fixated)] = 0.0
            kept.append(
                SentenceRecord(
                    sentence_id=rec.sentence_id,
                    subject_id=rec.subject_id,
                    words=rec.words,
                    features=feats,
                    fixated=rec.fixated,
                )
            )
            report.kept[rec.subject_id].append(rec.sentence_id)
    return kept


def _collect_passages(
    records: Sequence[SentenceRecord],
) -> dict[str, tuple[str, ...]]:
    """Map sentence_id -> words, checking cross-subject agreement."""
    passages: dict[str, tuple[str, ...]] = {}
    for rec in records:
        seen = passages.get(rec.sentence_id)
        if seen is None:
            passages[rec.sentence_id] = rec.words
        elif seen != rec.words:
            raise IngestError(
                f"sentence {rec.sentence_id!r}: word sequences disagree "
                f"across subjects ({list(seen)} vs {list(rec.words)})"
            )
    return passages


def _write_manifest(path: Path, passages: dict[str, tuple[str, ...]]) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for sentence_id in sorted(passages):
            tokens = passages[sentence_id]
            fh.write(
                json.dumps(
                    {"passage_id": sentence_id, "text": " ".join(tokens),
                     "tokens": list(tokens)},
                    ensure_ascii=False,
                )
                + "\n"
            )


def _write_recordings(path: Path, records: Sequence[SentenceRecord]) -> None:
    ordered = sorted(records, key=lambda r: (r.sentence_id, r.subject_id))
    with path.open("wb") as fh:
        fh.write(RECORDINGS_MAGIC)
        fh.write(struct.pack("<I", RECORDINGS_VERSION))
        fh.write(struct.pack("<Q", len(ordered)))
        for rec in ordered:
            for ident in (rec.sentence_id, rec.subject_id):
                raw = ident.encode("utf-8")
                fh.write(struct.pack("<H", len(raw)))
                fh.write(raw)
            fh.write(
                struct.pack("<II", rec.features.shape[0], FEATURE_WIDTH)
            )
            fh.write(
                np.ascontiguousarray(rec.features, dtype="<f4").tobytes()
            )


def convert_task_files(
    input_dir: str | Path, output_dir: str | Path, policy: str = "zero-fill"
) -> ConversionReport:
    """Convert every subject file under ``input_dir`` into ``output_dir``.

    Outputs are fully sorted (passages by id, recordings by
    (sentence, subject)), so re-running on the same inputs is
    byte-identical.
    """
    if policy not in POLICIES:
        raise IngestError(f"unknown policy {policy!r}; choose from {POLICIES}")
    input_dir, output_dir = Path(input_dir), Path(output_dir)
    files = sorted(
        p for p in input_dir.iterdir()
        if p.suffix in (".mat", ".h5", ".hdf5")
    )
    if not files:
        raise IngestError(f"{input_dir}: no .mat or .h5 files")

    records: list[SentenceRecord] = []
    for path in files:
        records.extend(read_subject_file(path))

    report = ConversionReport(policy=policy)
    kept = _apply_policy(records, policy, report)
    if not kept:
        raise IngestError("policy dropped every recording")
    passages = _collect_passages(kept)

    output_dir.mkdir(parents=True, exist_ok=True)
    _write_manifest(output_dir / "passages.jsonl", passages)
    _write_recordings(output_dir / "recordings.bprs", kept)
    (output_dir / "ingest_report.json").write_text(
        report.to_json() + "\n", encoding="utf-8"
    )
    return report


# ---------------------------------------------------------------------------
# Output validation (independent re-reader)
# ---------------------------------------------------------------------------

def validate_output(output_dir: str | Path) -> list[str]:
    """Re-parse the emitted files and list every inconsistency found.

    Returns an empty list when everything checks out. Binary problems are
    reported with the byte offset at which parsing stopped.
    """
    output_dir = Path(output_dir)
    errors: list[str] = []

    manifest = output_dir / "passages.jsonl"
    token_counts: dict[str, int] = {}
    if not manifest.exists():
        errors.append(f"{manifest}: missing")
    else:
        for lineno, line in enumerate(
            manifest.read_text(encoding="utf-8").splitlines(), start=1
        ):
            try:
                obj = json.loads(line)
                pid, tokens, text = obj["passage_id"], obj["tokens"], obj["text"]
            except (json.JSONDecodeError, KeyError) as exc:
                errors.append(f"{manifest}:{lineno}: malformed record: {exc}")
                continue
            if pid in token_counts:
                errors.append(f"{manifest}:{lineno}: duplicate passage {pid!r}")
            if " ".join(tokens) != text:
                errors.append(
                    f"{manifest}:{lineno}: tokens do not reproduce text"
                )
            token_counts[pid] = len(tokens)

    recordings = output_dir / "recordings.bprs"
    if not recordings.exists():
        errors.append(f"{recordings}: missing")
        return errors
    data = recordings.read_bytes()
    offset = 0

    def take(n: int) -> bytes | None:
        nonlocal offset
        if offset + n > len(data):
            errors.append(f"{recordings}: truncated at byte {offset}")
            return None
        chunk = data[offset:offset + n]
        offset += n
        return chunk

    magic = take(4)
    if magic is None or magic != RECORDINGS_MAGIC:
        if magic is not None:
            errors.append(f"{recordings}: bad magic {magic!r}")
        return errors
    raw = take(4)
    if raw is None:
        return errors
    (version,) = struct.unpack("<I", raw)
    if version != RECORDINGS_VERSION:
        errors.append(f"{recordings}: unsupported version {version}")
        return errors
    raw = take(8)
    if raw is None:
        return errors
    (count,) = struct.unpack("<Q", raw)

    for index in range(count):
        idents = []
        for _ in range(2):
            raw = take(2)
            if raw is None:
                return errors
            (n,) = struct.unpack("<H", raw)
            raw = take(n)
            if raw is None:
                return errors
            idents.append(raw.decode("utf-8"))
        passage_id, subject_id = idents
        raw = take(8)
        if raw is None:
            return errors
        n_tokens, feature_dim = struct.unpack("<II", raw)
        if feature_dim != FEATURE_WIDTH:
            errors.append(
                f"{recordings}: entry {index} ({passage_id}, {subject_id}): "
                f"feature_dim {feature_dim} != {FEATURE_WIDTH}"
            )
        if passage_id not in token_counts:
            errors.append(
                f"{recordings}: entry {index}: unknown passage "
                f"{passage_id!r}"
            )
        elif n_tokens != token_counts[passage_id]:
            errors.append(
                f"{recordings}: entry {index} ({passage_id}, {subject_id}): "
                f"{n_tokens} rows vs {token_counts[passage_id]} tokens"
            )
        if take(n_tokens * feature_dim * 4) is None:
            return errors
    if offset != len(data):
        errors.append(
            f"{recordings}: {len(data) - offset} trailing bytes at "
            f"byte {offset}"
        )
    return errors
