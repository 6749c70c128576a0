"""Synthetic paired corpus generator.

Produces passages plus word-aligned signal recordings for multiple subjects
with a controllable semantic signal-to-noise ratio, so every pipeline
property is testable without proprietary recordings.

Generation model: every vocabulary word carries a fixed latent semantic
vector. Each passage draws a latent topic vector and samples its words with
probability proportional to exp(topic_sharpness * <latent_w, topic>), which
gives passages the topical coherence retrieval needs. The recording row for
word w under subject s is a subject-specific linear embedding of w's latent
vector into feature space plus Gaussian noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus, CorpusError, Passage, SignalRecording


@dataclass(frozen=True)
class SynthConfig:
    vocab_size: int = 50
    n_passages: int = 200
    length_range: tuple[int, int] = (8, 20)
    n_subjects: int = 3
    feature_dim: int = 64
    semantic_dim: int = 8
    noise_sd: float = 0.5
    subject_mixing: float = 0.3
    topic_sharpness: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 10:
            raise CorpusError("vocab_size must be >= 10")
        if self.semantic_dim < 1 or self.semantic_dim > self.feature_dim:
            raise CorpusError("need 1 <= semantic_dim <= feature_dim")
        if self.noise_sd < 0:
            raise CorpusError("noise_sd must be >= 0")
        if self.length_range[0] < 2 or self.length_range[0] > self.length_range[1]:
            raise CorpusError("invalid length_range")
        if self.n_passages < 1 or self.n_subjects < 1:
            raise CorpusError("need at least one passage and one subject")


@dataclass(frozen=True)
class SynthModel:
    """Frozen latent structure behind one generated dataset."""

    vocab: tuple[str, ...]
    word_latents: np.ndarray          # V x m, unit rows
    subject_mixes: dict[str, np.ndarray]  # subject -> F x m


def build_synth_model(config: SynthConfig) -> SynthModel:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5EED]))
    vocab = tuple(f"w{i:03d}" for i in range(config.vocab_size))
    latents = rng.normal(size=(config.vocab_size, config.semantic_dim))
    latents /= np.linalg.norm(latents, axis=1, keepdims=True)
    base = rng.normal(size=(config.feature_dim, config.semantic_dim))
    base /= np.sqrt(config.semantic_dim)
    mixes = {}
    for s in range(config.n_subjects):
        perturb = rng.normal(size=(config.feature_dim, config.semantic_dim))
        perturb /= np.sqrt(config.semantic_dim)
        mixes[f"s{s}"] = base + config.subject_mixing * perturb
    return SynthModel(vocab=vocab, word_latents=latents, subject_mixes=mixes)


def generate_synthetic_dataset(
    config: SynthConfig,
) -> tuple[Corpus, list[SignalRecording]]:
    """Deterministic per seed: identical config gives byte-identical output."""
    model = build_synth_model(config)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xDA7A]))
    lo, hi = config.length_range

    passages = []
    word_indices: dict[str, np.ndarray] = {}
    for i in range(config.n_passages):
        topic = rng.normal(size=config.semantic_dim)
        topic /= np.linalg.norm(topic)
        logits = config.topic_sharpness * model.word_latents @ topic
        probs = np.exp(logits - logits.max())
        probs /= probs.sum()
        length = int(rng.integers(lo, hi + 1))
        idx = rng.choice(config.vocab_size, size=length, p=probs)
        tokens = tuple(model.vocab[j] for j in idx)
        pid = f"p{i:04d}"
        word_indices[pid] = idx
        passages.append(Passage(passage_id=pid, tokens=tokens,
                                text=" ".join(tokens)))
    corpus = Corpus.from_passages(passages)

    recordings = []
    for p in passages:
        idx = word_indices[p.passage_id]
        for sid in sorted(model.subject_mixes):
            clean = model.word_latents[idx] @ model.subject_mixes[sid].T
            noise = rng.normal(size=clean.shape) * config.noise_sd
            recordings.append(
                SignalRecording(
                    passage_id=p.passage_id,
                    subject_id=sid,
                    features=(clean + noise).astype(np.float32),
                )
            )
    return corpus, recordings
