"""Losses, subject-aware batch construction, optimizer schedule, the
training loop, and the finite-difference gradient-check harness.

The contrastive objective is a masked in-batch softmax: each row contrasts
its diagonal positive against the unmasked off-diagonal negatives at
temperature tau. Batch items whose positive passage was read by a different
subject than the query's are masked out as negatives, so the model never
learns to separate subjects instead of content. A hypersphere-uniformity
penalty on the query embeddings counters representation collapse.
"""

from __future__ import annotations

import copy
import json
import math
import struct
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from .corpus import Corpus, CorpusError, FormatError, Key, SignalRecording
from .encoder import (
    EncoderConfig,
    HashedTextProvider,
    PassageAdapter,
    SequenceEncoder,
    TextProvider,
    encode_sequences,
    encode_text_batch,
)
from .ict import IctConfig, IctPair, build_ict_dataset, derive_rng

CHECKPOINT_MAGIC = b"BPRC"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    # Desk-scale defaults; paper_zuco_config() restores the full-scale values.
    batch_size: int = 16
    learning_rate: float = 1e-3
    weight_decay: float = 0.1
    warmup_epochs: int = 3
    max_epochs: int = 60
    patience: int = 5
    clip_norm: float = 1.0
    temperature: float = 0.07
    uniformity_weight: float = 0.1
    uniformity_both: bool = False
    p_mask: float = 0.9
    query_ratio: float = 0.3
    seed: int = 0
    input_dim: int = 64
    model_dim: int = 32
    output_dim: int = 32
    n_layers: int = 2
    n_heads: int = 4
    dropout: float = 0.1
    subject_aware: bool = True
    pooling: str = "cls"
    query_encoder: str = "signal"  # "signal" or "text" (ablation variant)

    def __post_init__(self):
        if self.temperature <= 0:
            raise CorpusError("temperature must be > 0")
        if self.uniformity_weight < 0:
            raise CorpusError("uniformity_weight must be >= 0")
        if self.batch_size < 2:
            raise CorpusError("batch_size must be >= 2")
        if self.query_encoder not in ("signal", "text"):
            raise CorpusError(f"unknown query_encoder {self.query_encoder!r}")


def paper_zuco_config(**overrides) -> TrainConfig:
    """Full-scale preset matching the real-recordings regime."""
    base = dict(
        batch_size=128,
        learning_rate=1e-6,
        weight_decay=0.1,
        warmup_epochs=10,
        max_epochs=100,
        patience=5,
        clip_norm=1.0,
        temperature=0.07,
        uniformity_weight=0.1,
        p_mask=0.9,
        input_dim=840,
        model_dim=512,
        output_dim=768,
        n_layers=3,
        n_heads=8,
        dropout=0.1,
    )
    base.update(overrides)
    return TrainConfig(**base)


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def parse_config_file(path: str | Path) -> TrainConfig:
    """Read ``key = value`` lines; unknown keys are rejected."""
    values: dict[str, object] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected 'key = value'")
        key, _, raw = (part.strip() for part in line.partition("="))
        if key not in _FIELD_TYPES:
            raise FormatError(f"{path}:{lineno}: unknown key {key!r}")
        kind = _FIELD_TYPES[key]
        if kind == "bool":
            if raw.lower() not in ("true", "false"):
                raise FormatError(f"{path}:{lineno}: bad bool {raw!r}")
            values[key] = raw.lower() == "true"
        elif kind == "int":
            values[key] = int(raw)
        elif kind == "float":
            values[key] = float(raw)
        else:
            values[key] = raw
    return TrainConfig(**values)  # type: ignore[arg-type]


def write_config_file(path: str | Path, config: TrainConfig) -> None:
    lines = [f"{k} = {v}" for k, v in asdict(config).items()]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Subject-passage exclusion and batches
# ---------------------------------------------------------------------------

class ExclusionIndex:
    """Lookup of (passage, subject) pairs that must never serve as negatives
    for a query on the same passage by a different subject."""

    def __init__(self, keys: Iterable[Key]):
        self._subjects: dict[str, set[str]] = {}
        for pid, sid in keys:
            self._subjects.setdefault(pid, set()).add(sid)

    def lookup(self, passage_id: str, subject_id: str) -> frozenset[Key]:
        others = self._subjects.get(passage_id, set())
        return frozenset(
            (passage_id, s) for s in others if s != subject_id
        )


def build_exclusion_index(keys: Iterable[Key]) -> ExclusionIndex:
    return ExclusionIndex(keys)


@dataclass(frozen=True)
class Batch:
    pairs: tuple[IctPair, ...]
    mask: np.ndarray  # B x B bool; False = excluded as negative

    @property
    def size(self) -> int:
        return len(self.pairs)


def batch_mask(
    pairs: Sequence[IctPair],
    index: ExclusionIndex,
    subject_aware: bool = True,
) -> np.ndarray:
    b = len(pairs)
    mask = np.ones((b, b), dtype=bool)
    if not subject_aware:
        return mask
    for i, pi in enumerate(pairs):
        excluded = index.lookup(pi.positive_passage_id, pi.subject_id)
        for j, pj in enumerate(pairs):
            if i != j and pj.key in excluded:
                mask[i, j] = False
    return mask


def sample_batch(
    pairs: Sequence[IctPair],
    config: TrainConfig,
    index: ExclusionIndex,
    rng: np.random.Generator,
) -> Batch:
    if len(pairs) < config.batch_size:
        raise CorpusError(
            f"dataset size {len(pairs)} < batch size {config.batch_size}"
        )
    idx = rng.choice(len(pairs), size=config.batch_size, replace=False)
    chosen = tuple(pairs[i] for i in idx)
    return Batch(pairs=chosen, mask=batch_mask(chosen, index, config.subject_aware))


def iterate_batches(
    pairs: Sequence[IctPair],
    config: TrainConfig,
    index: ExclusionIndex,
    rng: np.random.Generator,
) -> list[Batch]:
    """One epoch of batches: a seeded shuffle chunked without replacement.

    A trailing chunk smaller than the batch size is dropped.
    """
    if len(pairs) < config.batch_size:
        raise CorpusError(
            f"dataset size {len(pairs)} < batch size {config.batch_size}"
        )
    order = rng.permutation(len(pairs))
    batches = []
    for lo in range(0, len(pairs) - config.batch_size + 1, config.batch_size):
        chosen = tuple(pairs[i] for i in order[lo:lo + config.batch_size])
        batches.append(
            Batch(pairs=chosen,
                  mask=batch_mask(chosen, index, config.subject_aware))
        )
    return batches


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def contrastive_row_losses(
    sims: torch.Tensor, mask: torch.Tensor | np.ndarray, tau: float
) -> torch.Tensor:
    """Per-row -log softmax(diagonal | diagonal + unmasked off-diagonals)
    at temperature tau.

    Masked entries contribute to neither numerator nor denominator; a row
    with every off-diagonal masked degenerates to loss 0.
    """
    if tau <= 0:
        raise CorpusError("temperature must be > 0")
    mask_t = torch.as_tensor(np.asarray(mask), dtype=torch.bool,
                             device=sims.device)
    b = sims.shape[0]
    eye = torch.eye(b, dtype=torch.bool, device=sims.device)
    allowed = mask_t | eye
    logits = sims / tau
    neg_inf = torch.finfo(sims.dtype).min
    row_lse = torch.logsumexp(logits.masked_fill(~allowed, neg_inf), dim=1)
    return row_lse - logits.diagonal()


def contrastive_loss(
    sims: torch.Tensor, mask: torch.Tensor | np.ndarray, tau: float
) -> torch.Tensor:
    """Mean over rows of the masked-softmax contrastive term."""
    return contrastive_row_losses(sims, mask, tau).mean()


def count_degenerate_rows(mask: np.ndarray) -> int:
    """Rows with zero unmasked off-diagonal negatives."""
    b = mask.shape[0]
    off = mask & ~np.eye(b, dtype=bool)
    return int((~off.any(axis=1)).sum())


def uniformity_loss(embeddings: torch.Tensor) -> torch.Tensor:
    """log mean over ordered distinct pairs of exp(-2 * ||q_i - q_j||^2).

    0 for identical rows, bounded below by -8 for unit-norm inputs.
    """
    b = embeddings.shape[0]
    if b < 2:
        raise CorpusError("uniformity loss needs at least two embeddings")
    sq = torch.cdist(embeddings, embeddings).pow(2)
    vals = torch.exp(-2.0 * sq)
    # All B^2 entries minus the B diagonal ones (exp(0) = 1 each).
    mean = (vals.sum() - b) / (b * (b - 1))
    return torch.log(mean)


def total_loss(
    contrastive: torch.Tensor, uniformity: torch.Tensor, weight: float
) -> torch.Tensor:
    if weight < 0:
        raise CorpusError("uniformity weight must be >= 0")
    if weight == 0.0:
        return contrastive
    return contrastive + weight * uniformity


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------

def schedule_scale(epoch: int, config: TrainConfig) -> float:
    """Learning-rate multiplier for a 1-based epoch number.

    Linear warmup to the base rate over ``warmup_epochs``, then linear decay
    reaching 0 at ``max_epochs``.
    """
    if epoch <= config.warmup_epochs:
        return epoch / config.warmup_epochs
    span = config.max_epochs - config.warmup_epochs
    if span <= 0:
        return 1.0
    return max(0.0, (config.max_epochs - epoch) / span)


def make_optimizer(
    params: Iterable[torch.nn.Parameter], config: TrainConfig
) -> torch.optim.AdamW:
    # Decoupled weight decay with bias-corrected moment estimates.
    return torch.optim.AdamW(
        params,
        lr=config.learning_rate,
        betas=(0.9, 0.999),
        eps=1e-8,
        weight_decay=config.weight_decay,
    )


def clip_and_step(
    optimizer: torch.optim.Optimizer,
    params: Sequence[torch.nn.Parameter],
    clip_norm: float,
) -> bool:
    """Clip the global grad norm, then step; returns False (no step) if any
    gradient is non-finite after clipping."""
    torch.nn.utils.clip_grad_norm_(params, clip_norm)
    for p in params:
        if p.grad is not None and not torch.isfinite(p.grad).all():
            return False
    optimizer.step()
    return True


class EarlyStopper:
    """Stop when the dev metric fails to improve for ``patience`` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_metric = -math.inf
        self.best_epoch = -1
        self._since = 0

    def update(self, metric: float, epoch: int) -> bool:
        if metric > self.best_metric:
            self.best_metric = metric
            self.best_epoch = epoch
            self._since = 0
            return True
        self._since += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self._since >= self.patience


# ---------------------------------------------------------------------------
# Model bundle
# ---------------------------------------------------------------------------

@dataclass
class BprModel:
    config: TrainConfig
    query_encoder: SequenceEncoder
    adapter: PassageAdapter
    provider: TextProvider

    def train_mode(self) -> None:
        self.query_encoder.train()
        self.adapter.train()

    def eval_mode(self) -> None:
        self.query_encoder.eval()
        self.adapter.eval()

    def trainable_parameters(self) -> list[torch.nn.Parameter]:
        return list(self.query_encoder.parameters()) + list(
            self.adapter.parameters()
        )

    def query_features(self, pair: IctPair) -> torch.Tensor:
        """Input matrix for the query encoder: signal rows, or frozen token
        rows for the text-query ablation variant."""
        if self.config.query_encoder == "signal":
            return torch.from_numpy(np.array(pair.query_signal, copy=True))
        return self.provider.embed(pair.query_tokens)[1:]

    def encode_queries(self, pairs: Sequence[IctPair]) -> torch.Tensor:
        return encode_sequences(
            self.query_encoder,
            [self.query_features(p) for p in pairs],
            pooling=self.config.pooling,
        )

    def encode_documents(
        self, token_lists: Sequence[Sequence[str]],
        keys: Sequence[str] | None = None,
    ) -> torch.Tensor:
        return encode_text_batch(
            token_lists, self.provider, self.adapter,
            pooling=self.config.pooling, keys=keys,
        )


def build_model(
    config: TrainConfig,
    provider: TextProvider | None = None,
    dtype: torch.dtype = torch.float32,
) -> BprModel:
    torch.manual_seed(config.seed)
    if provider is None:
        provider = HashedTextProvider(
            config.output_dim, seed=config.seed, dtype=dtype
        )
    input_dim = (
        config.input_dim if config.query_encoder == "signal"
        else config.output_dim
    )
    encoder = SequenceEncoder(
        EncoderConfig(
            input_dim=input_dim,
            model_dim=config.model_dim,
            output_dim=config.output_dim,
            n_layers=config.n_layers,
            n_heads=config.n_heads,
            dropout=config.dropout,
        )
    )
    adapter = PassageAdapter(
        config.output_dim, n_heads=config.n_heads, dropout=config.dropout
    )
    if dtype != torch.float32:
        encoder.to(dtype)
        adapter.to(dtype)
    return BprModel(config=config, query_encoder=encoder, adapter=adapter,
                    provider=provider)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _named_tensors(model: BprModel) -> dict[str, torch.Tensor]:
    tensors = {}
    for prefix, module in (
        ("query_encoder", model.query_encoder),
        ("adapter", model.adapter),
    ):
        for name, param in module.named_parameters():
            tensors[f"{prefix}.{name}"] = param.detach()
    return tensors


def save_checkpoint(path: str | Path, model: BprModel) -> None:
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        config_raw = json.dumps(asdict(model.config), sort_keys=True).encode()
        fh.write(struct.pack("<I", len(config_raw)))
        fh.write(config_raw)
        tensors = _named_tensors(model)
        fh.write(struct.pack("<I", len(tensors)))
        for name, tensor in tensors.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            array = tensor.cpu().to(torch.float32).numpy()
            fh.write(struct.pack("<B", array.ndim))
            for dim in array.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def load_checkpoint(
    path: str | Path, provider: TextProvider | None = None
) -> BprModel:
    data = Path(path).read_bytes()
    offset = 0

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(data):
            raise FormatError(f"{path}: truncated at byte {offset}")
        chunk = data[offset:offset + n]
        offset += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic (expected BPRC)")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    (config_len,) = struct.unpack("<I", take(4))
    config = TrainConfig(**json.loads(take(config_len)))
    model = build_model(config, provider)
    (n_tensors,) = struct.unpack("<I", take(4))
    loaded: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        count = int(np.prod(shape)) if shape else 1
        loaded[name] = np.frombuffer(take(count * 4), dtype="<f4").reshape(shape)
    expected = _named_tensors(model)
    if set(loaded) != set(expected):
        raise FormatError(f"{path}: tensor names do not match the config")
    with torch.no_grad():
        for name, tensor in expected.items():
            if tuple(loaded[name].shape) != tuple(tensor.shape):
                raise FormatError(f"{path}: shape mismatch for {name}")
            tensor.copy_(torch.from_numpy(loaded[name].copy()))
    model.eval_mode()
    return model


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: BprModel
    history: list[dict]
    best_epoch: int
    best_dev_mrr: float
    aborted: bool = False


def _dev_mrr(model: BprModel, corpus: Corpus, pairs: Sequence[IctPair]) -> float:
    """Rank each dev query's positive among the dev passages (original text)."""
    from .retrieval import rank_of_positive

    pids = sorted({p.positive_passage_id for p in pairs})
    with torch.no_grad():
        docs = model.encode_documents(
            [corpus[pid].tokens for pid in pids], keys=pids
        )
        queries = model.encode_queries(pairs)
        sims = (queries @ docs.T).cpu().numpy()
    total = 0.0
    for i, pair in enumerate(pairs):
        rank = rank_of_positive(sims[i], pids, pair.positive_passage_id)
        total += 1.0 / rank
    return total / len(pairs)


def train(
    corpus: Corpus,
    recordings: Sequence[SignalRecording] | Mapping[Key, SignalRecording],
    plan,
    config: TrainConfig,
    provider: TextProvider | None = None,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Train the query encoder and adapter; the provider stays frozen.

    Per epoch the training pairs are rebuilt with an epoch-salted seed, dev
    retrieval MRR is evaluated, and early stopping keeps the best epoch's
    trainable tensors. Bit-deterministic for a fixed config and seed.
    """
    torch.manual_seed(config.seed)
    torch.set_num_threads(1)
    if not isinstance(recordings, Mapping):
        recordings = {r.key: r for r in recordings}
    if not plan.train or not plan.dev:
        raise CorpusError("train and dev splits must be non-empty")

    model = build_model(config, provider)
    params = model.trainable_parameters()
    optimizer = make_optimizer(params, config)
    ict_config = IctConfig(
        query_ratio=config.query_ratio, p_mask=config.p_mask, seed=config.seed
    )
    dev_pairs = build_ict_dataset(corpus, recordings, plan.dev, ict_config,
                                  epoch=0)
    exclusion = build_exclusion_index(plan.train)
    stopper = EarlyStopper(config.patience)
    best_state: dict[str, torch.Tensor] | None = None
    history: list[dict] = []
    log_fh = Path(log_path).open("w") if log_path is not None else None
    aborted = False

    try:
        for epoch in range(1, config.max_epochs + 1):
            start = time.monotonic()
            scale = schedule_scale(epoch, config)
            for group in optimizer.param_groups:
                group["lr"] = config.learning_rate * scale
            pairs = build_ict_dataset(corpus, recordings, plan.train,
                                      ict_config, epoch=epoch)
            batches = iterate_batches(
                pairs, config, exclusion, derive_rng(config.seed, "order", epoch)
            )
            model.train_mode()
            sums = {"contrastive": 0.0, "uniformity": 0.0}
            degenerate = 0
            skipped = 0
            for batch in batches:
                queries = model.encode_queries(batch.pairs)
                docs = model.encode_documents(
                    [p.document_tokens for p in batch.pairs]
                )
                sims = queries @ docs.T
                lc = contrastive_loss(sims, batch.mask, config.temperature)
                embs = (
                    torch.cat([queries, docs]) if config.uniformity_both
                    else queries
                )
                lu = uniformity_loss(embs)
                loss = total_loss(lc, lu, config.uniformity_weight)
                if not torch.isfinite(loss):
                    aborted = True
                    break
                degenerate += count_degenerate_rows(batch.mask)
                optimizer.zero_grad()
                loss.backward()
                if not clip_and_step(optimizer, params, config.clip_norm):
                    skipped += 1
                sums["contrastive"] += float(lc.detach())
                sums["uniformity"] += float(lu.detach())
            if aborted:
                break

            model.eval_mode()
            dev_mrr = _dev_mrr(model, corpus, dev_pairs)
            n = max(1, len(batches))
            record = {
                "epoch": epoch,
                "contrastive_loss": sums["contrastive"] / n,
                "uniformity_loss": sums["uniformity"] / n,
                "total_loss": (
                    sums["contrastive"] + config.uniformity_weight
                    * sums["uniformity"]
                ) / n,
                "dev_mrr": dev_mrr,
                "lr": config.learning_rate * scale,
                "degenerate_rows": degenerate,
                "skipped_steps": skipped,
                "wall_time_s": time.monotonic() - start,
            }
            history.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()

            if stopper.update(dev_mrr, epoch):
                best_state = {
                    name: tensor.clone()
                    for name, tensor in _named_tensors(model).items()
                }
            if stopper.should_stop:
                break
    finally:
        if log_fh is not None:
            log_fh.close()

    if best_state is not None:
        current = _named_tensors(model)
        with torch.no_grad():
            for name, tensor in best_state.items():
                current[name].copy_(tensor)
    model.eval_mode()
    return TrainResult(
        model=model,
        history=history,
        best_epoch=stopper.best_epoch,
        best_dev_mrr=stopper.best_metric,
        aborted=aborted,
    )


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    per_tensor: dict[str, float]


def _toy_batch(config: TrainConfig, seed: int):
    rng = np.random.default_rng(seed)
    vocab = [f"t{i}" for i in range(20)]
    queries, docs = [], []
    for i in range(config.batch_size):
        length = int(rng.integers(3, 6))
        queries.append(rng.normal(size=(length, config.input_dim)))
        doc_len = int(rng.integers(5, 9))
        docs.append([vocab[j] for j in rng.integers(0, len(vocab), doc_len)])
    mask = np.ones((config.batch_size, config.batch_size), dtype=bool)
    mask[0, 1] = mask[1, 0] = False  # exercise the masked-softmax path
    return queries, docs, mask


def grad_check(
    component: str = "all",
    seed: int = 0,
    eps: float = 1e-4,
    config: TrainConfig | None = None,
) -> GradCheckResult:
    """Central finite differences vs analytic gradients, double precision.

    Every trainable tensor of the selected component ("signal", "adapter" or
    "all") is checked coordinate-by-coordinate through the full combined
    objective on a fixed mini-batch. The temperature is a constant, not a
    trainable tensor, so it is never part of the check list.
    """
    if config is None:
        config = TrainConfig(
            batch_size=4, input_dim=12, model_dim=16, output_dim=16,
            n_layers=2, n_heads=2, dropout=0.1,
        )
    model = build_model(config, dtype=torch.float64)
    model.eval_mode()
    queries, docs, mask = _toy_batch(config, seed)

    def encode_q() -> torch.Tensor:
        return encode_sequences(model.query_encoder, queries,
                                pooling=config.pooling)

    def encode_d() -> torch.Tensor:
        return encode_text_batch(docs, model.provider, model.adapter,
                                 pooling=config.pooling)

    def combine(q: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
        lc = contrastive_loss(q @ d.T, mask, config.temperature)
        lu = uniformity_loss(q)
        return total_loss(lc, lu, config.uniformity_weight)

    def objective() -> torch.Tensor:
        return combine(encode_q(), encode_d())

    selected: dict[str, torch.nn.Parameter] = {}
    if component in ("signal", "all"):
        for name, p in model.query_encoder.named_parameters():
            selected[f"query_encoder.{name}"] = p
    if component in ("adapter", "all"):
        for name, p in model.adapter.named_parameters():
            selected[f"adapter.{name}"] = p
    if not selected:
        raise CorpusError(f"unknown component {component!r}")

    loss = objective()
    grads = torch.autograd.grad(loss, list(selected.values()))
    analytic = dict(zip(selected.keys(), grads))

    per_tensor: dict[str, float] = {}
    with torch.no_grad():
        for name, param in selected.items():
            # The untouched side of the dual encoder is constant while this
            # tensor is perturbed, so encode it once.
            if name.startswith("query_encoder."):
                fixed_d = encode_d()
                evaluate = lambda: combine(encode_q(), fixed_d).item()
            else:
                fixed_q = encode_q()
                evaluate = lambda: combine(fixed_q, encode_d()).item()
            flat = param.view(-1)
            grad_flat = analytic[name].reshape(-1)
            worst = 0.0
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + eps
                hi = evaluate()
                flat[i] = original - eps
                lo = evaluate()
                flat[i] = original
                numeric = (hi - lo) / (2 * eps)
                a = grad_flat[i].item()
                denom = max(abs(a), abs(numeric), 1e-3)
                worst = max(worst, abs(a - numeric) / denom)
            per_tensor[name] = worst
    return GradCheckResult(
        max_rel_error=max(per_tensor.values()), per_tensor=per_tensor
    )
