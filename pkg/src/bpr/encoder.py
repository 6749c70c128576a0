"""Dual encoders mapping signal sequences and token sequences to unit-norm
embeddings in one shared space.

The signal-side encoder is a pre-layer-norm transformer over projected
feature rows with a learnable cls prefix and fixed sinusoidal positions.
The text side runs a frozen token-embedding provider through one trainable
adaptation layer with a layer-normalized residual. Both sides end with L2
normalization, so similarity is the dot product.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np
import torch
from torch import nn

from .corpus import CorpusError, FormatError

EMBEDDINGS_MAGIC = b"BPRE"
EMBEDDINGS_VERSION = 1

POOLING_STRATEGIES = ("cls", "mean", "max")


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    model_dim: int
    output_dim: int
    n_layers: int
    n_heads: int
    dropout: float = 0.1
    max_len: int = 512

    def __post_init__(self):
        if self.model_dim % self.n_heads != 0:
            raise CorpusError("model_dim must be divisible by n_heads")


def sinusoidal_positions(max_len: int, dim: int) -> torch.Tensor:
    position = np.arange(max_len)[:, None]
    div = np.exp(np.arange(0, dim, 2) * (-np.log(10000.0) / dim))
    table = np.zeros((max_len, dim))
    table[:, 0::2] = np.sin(position * div)
    table[:, 1::2] = np.cos(position * div[: table[:, 1::2].shape[1]])
    return torch.from_numpy(table).float()


class TransformerLayer(nn.Module):
    """Pre-layer-norm block: self-attention then a 4x feed-forward expansion.

    Dropout sits on the attention weights and on the feed-forward output.
    """

    def __init__(self, dim: int, n_heads: int, dropout: float):
        super().__init__()
        if dim % n_heads != 0:
            raise CorpusError("dim must be divisible by n_heads")
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.ln_attn = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.attn_out = nn.Linear(dim, dim)
        self.attn_dropout = nn.Dropout(dropout)
        self.ln_ff = nn.LayerNorm(dim)
        self.ff_in = nn.Linear(dim, 4 * dim)
        self.ff_out = nn.Linear(4 * dim, dim)
        self.ff_dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (batch, n, dim)
        b, n, d = x.shape
        h = self.ln_attn(x)
        qkv = self.qkv(h).reshape(b, n, 3, self.n_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)  # each (b, heads, n, head_dim)
        scores = q @ k.transpose(-2, -1) / self.head_dim**0.5
        weights = self.attn_dropout(torch.softmax(scores, dim=-1))
        mixed = (weights @ v).permute(0, 2, 1, 3).reshape(b, n, d)
        x = x + self.attn_out(mixed)
        h = self.ln_ff(x)
        x = x + self.ff_dropout(self.ff_out(torch.nn.functional.gelu(self.ff_in(h))))
        return x


def pool_sequence(matrix: torch.Tensor, strategy: str) -> torch.Tensor:
    """Reduce a (cls + tokens) x dim matrix to one vector.

    cls takes row 0; mean and max reduce column-wise over the non-cls rows.
    """
    if strategy not in POOLING_STRATEGIES:
        raise CorpusError(f"unknown pooling strategy {strategy!r}")
    if matrix.ndim == 2:
        matrix = matrix.unsqueeze(0)
        squeeze = True
    else:
        squeeze = False
    if matrix.shape[1] == 0:
        raise CorpusError("cannot pool an empty sequence")
    if strategy == "cls":
        out = matrix[:, 0]
    elif strategy == "mean":
        out = matrix[:, 1:].mean(dim=1)
    else:
        out = matrix[:, 1:].max(dim=1).values
    return out[0] if squeeze else out


def l2_normalize(vectors: torch.Tensor) -> torch.Tensor:
    norm = vectors.norm(dim=-1, keepdim=True)
    out = vectors / norm
    if not torch.isfinite(out).all():
        raise CorpusError("non-finite embedding")
    return out


class SequenceEncoder(nn.Module):
    """Signal-side encoder: projection, cls prefix, positions, transformer
    stack, pooling, and an output projection into the shared space."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.in_proj = nn.Linear(config.input_dim, config.model_dim)
        self.cls = nn.Parameter(torch.zeros(config.model_dim))
        nn.init.normal_(self.cls, std=0.02)
        self.register_buffer(
            "positions",
            sinusoidal_positions(config.max_len + 1, config.model_dim),
        )
        self.layers = nn.ModuleList(
            TransformerLayer(config.model_dim, config.n_heads, config.dropout)
            for _ in range(config.n_layers)
        )
        self.final_ln = nn.LayerNorm(config.model_dim)
        self.out_proj = nn.Linear(config.model_dim, config.output_dim)

    def forward(self, x: torch.Tensor, pooling: str = "cls") -> torch.Tensor:
        # x: (batch, l, input_dim) -> (batch, output_dim), unit rows
        if x.shape[-1] != self.config.input_dim:
            raise CorpusError(
                f"query width {x.shape[-1]} != input_dim {self.config.input_dim}"
            )
        h = self.in_proj(x)
        cls = self.cls.expand(h.shape[0], 1, -1)
        h = torch.cat([cls, h], dim=1)
        h = h + self.positions[: h.shape[1]].to(h.dtype)
        for layer in self.layers:
            h = layer(h)
        h = self.final_ln(h)
        pooled = pool_sequence(h, pooling)
        return l2_normalize(self.out_proj(pooled))

    def encode(
        self, matrix: np.ndarray | torch.Tensor, pooling: str = "cls"
    ) -> torch.Tensor:
        """Encode one variable-length sequence (rows x input_dim)."""
        x = torch.as_tensor(np.asarray(matrix))
        dtype = next(self.parameters()).dtype
        return self.forward(x.to(dtype).unsqueeze(0), pooling=pooling)[0]


def encode_sequences(
    encoder: SequenceEncoder,
    matrices: Sequence[np.ndarray | torch.Tensor],
    pooling: str = "cls",
) -> torch.Tensor:
    """Encode variable-length sequences, stacking equal lengths for speed.

    Output row i corresponds to matrices[i] regardless of grouping order.
    """
    dtype = next(encoder.parameters()).dtype
    tensors = [torch.as_tensor(np.asarray(m)).to(dtype) for m in matrices]
    out: list[torch.Tensor | None] = [None] * len(tensors)
    by_len: dict[int, list[int]] = {}
    for i, t in enumerate(tensors):
        by_len.setdefault(t.shape[0], []).append(i)
    for length in sorted(by_len):
        idx = by_len[length]
        batch = torch.stack([tensors[i] for i in idx])
        enc = encoder(batch, pooling=pooling)
        for row, i in enumerate(idx):
            out[i] = enc[row]
    return torch.stack(out)  # type: ignore[arg-type]


# ---------------------------------------------------------------------------
# Frozen text providers
# ---------------------------------------------------------------------------

class TextProvider(Protocol):
    output_dim: int

    def embed(self, tokens: Sequence[str], key: str | None = None) -> torch.Tensor:
        """Return a (len(tokens)+1) x output_dim matrix; row 0 is the cls slot."""


class HashedTextProvider:
    """Deterministic frozen embeddings with zero model-weight dependencies.

    Each token row is a seeded pseudo-random unit vector keyed by a 64-bit
    token hash; the cls+token matrix then passes through one fixed,
    seed-frozen mixing transformer layer. Narrow ``hash_bits`` force
    collisions: colliding tokens get identical rows by construction.
    """

    def __init__(
        self,
        output_dim: int,
        seed: int = 0,
        hash_bits: int = 64,
        n_heads: int = 4,
        dtype: torch.dtype = torch.float32,
    ):
        self.output_dim = output_dim
        self.seed = seed
        self.hash_bits = hash_bits
        self.dtype = dtype
        self._rows: dict[str, torch.Tensor] = {}
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC15]))
        cls = rng.normal(size=output_dim)
        self._cls = torch.from_numpy(cls / np.linalg.norm(cls)).to(dtype)
        gen = torch.Generator().manual_seed(seed + 0x317)
        self._mixer = TransformerLayer(output_dim, n_heads, dropout=0.0)
        with torch.no_grad():
            for p in self._mixer.parameters():
                p.copy_(torch.empty_like(p, dtype=torch.float32).normal_(
                    std=0.05, generator=gen))
        self._mixer.to(dtype)
        self._mixer.eval()
        for p in self._mixer.parameters():
            p.requires_grad_(False)

    def _token_hash(self, token: str) -> int:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        value = int.from_bytes(digest, "little")
        if self.hash_bits < 64:
            value &= (1 << self.hash_bits) - 1
        return value

    def _token_row(self, token: str) -> torch.Tensor:
        cached = self._rows.get(token)
        if cached is None:
            rng = np.random.default_rng(
                np.random.SeedSequence([self.seed, self._token_hash(token)])
            )
            row = rng.normal(size=self.output_dim)
            cached = torch.from_numpy(row / np.linalg.norm(row)).to(self.dtype)
            self._rows[token] = cached
        return cached

    def embed(self, tokens: Sequence[str], key: str | None = None) -> torch.Tensor:
        if not tokens:
            raise CorpusError("cannot embed an empty token list")
        rows = torch.stack([self._cls] + [self._token_row(t) for t in tokens])
        with torch.no_grad():
            return self._mixer(rows.unsqueeze(0))[0]


class FileTextProvider:
    """Precomputed embeddings loaded from a container, keyed by passage id."""

    def __init__(self, path: str | Path):
        self._matrices = read_embedding_file(path)
        if not self._matrices:
            raise FormatError(f"{path}: no entries")
        self.output_dim = next(iter(self._matrices.values())).shape[1]

    def embed(self, tokens: Sequence[str], key: str | None = None) -> torch.Tensor:
        if key is None or key not in self._matrices:
            raise CorpusError(f"no precomputed embedding for passage {key!r}")
        return torch.from_numpy(self._matrices[key])


def write_embedding_file(
    path: str | Path, matrices: dict[str, np.ndarray]
) -> None:
    with Path(path).open("wb") as fh:
        fh.write(EMBEDDINGS_MAGIC)
        fh.write(struct.pack("<I", EMBEDDINGS_VERSION))
        fh.write(struct.pack("<Q", len(matrices)))
        for pid, matrix in matrices.items():
            raw = pid.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<II", matrix.shape[0], matrix.shape[1]))
            fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def read_embedding_file(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    offset = 0

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(data):
            raise FormatError(f"{path}: truncated at byte {offset}")
        chunk = data[offset:offset + n]
        offset += n
        return chunk

    if take(4) != EMBEDDINGS_MAGIC:
        raise FormatError(f"{path}: bad magic (expected BPRE)")
    (version,) = struct.unpack("<I", take(4))
    if version != EMBEDDINGS_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    (count,) = struct.unpack("<Q", take(8))
    matrices = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        pid = take(n).decode("utf-8")
        rows, cols = struct.unpack("<II", take(8))
        matrices[pid] = np.frombuffer(
            take(rows * cols * 4), dtype="<f4"
        ).reshape(rows, cols).copy()
    return matrices


# ---------------------------------------------------------------------------
# Passage side
# ---------------------------------------------------------------------------

class PassageAdapter(nn.Module):
    """Trainable adaptation over frozen provider output.

    Output sequence is adapter_layer(P0) + layernorm(P0); the residual's
    layer norm carries learnable gain/bias and trains with the adapter.
    """

    def __init__(self, dim: int, n_heads: int = 4, dropout: float = 0.1):
        super().__init__()
        self.layer = TransformerLayer(dim, n_heads, dropout)
        self.residual_ln = nn.LayerNorm(dim)

    def forward(self, p0: torch.Tensor) -> torch.Tensor:
        return self.layer(p0) + self.residual_ln(p0)


def encode_text_passage(
    tokens: Sequence[str],
    provider: TextProvider,
    adapter: PassageAdapter,
    pooling: str = "cls",
    key: str | None = None,
) -> torch.Tensor:
    p0 = provider.embed(tokens, key=key)
    dtype = next(adapter.parameters()).dtype
    p1 = adapter(p0.to(dtype).unsqueeze(0))[0]
    return l2_normalize(pool_sequence(p1, pooling))


def encode_text_batch(
    token_lists: Sequence[Sequence[str]],
    provider: TextProvider,
    adapter: PassageAdapter,
    pooling: str = "cls",
    keys: Sequence[str] | None = None,
) -> torch.Tensor:
    """Encode many token sequences, stacking equal lengths for speed."""
    dtype = next(adapter.parameters()).dtype
    p0s = [
        provider.embed(toks, key=keys[i] if keys is not None else None).to(dtype)
        for i, toks in enumerate(token_lists)
    ]
    out: list[torch.Tensor | None] = [None] * len(p0s)
    by_len: dict[int, list[int]] = {}
    for i, p0 in enumerate(p0s):
        by_len.setdefault(p0.shape[0], []).append(i)
    for length in sorted(by_len):
        idx = by_len[length]
        p1 = adapter(torch.stack([p0s[i] for i in idx]))
        pooled = l2_normalize(pool_sequence(p1, pooling))
        for row, i in enumerate(idx):
            out[i] = pooled[row]
    return torch.stack(out)  # type: ignore[arg-type]
