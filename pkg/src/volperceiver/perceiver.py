"""Latent-bottleneck encoder/decoder: cross-attend in, self-attend, cross-attend out.

Shapes are batched throughout: inputs ``[B, M, C]``, latents ``[B, N, D]``,
output queries ``[B or 1, M_out, D]``, logits ``[B, M_out, K]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import MLP, LayerNorm, Linear, Module, parameter
from .tensor import Tape, Tensor, concat, get_default_dtype, matmul, mul, no_grad, permute, reshape, softmax


@dataclass(frozen=True)
class PerceiverConfig:
    input_channels: int
    num_classes: int = 4
    num_latents: int = 256
    latent_dim: int = 128
    num_heads: int = 4
    num_blocks: int = 4
    mlp_ratio: int = 2
    pos_encoding: str = "fourier"  # "fourier" | "learned"
    num_bands: int = 16
    max_freq: float = 32.0
    learned_pos_dim: int = 32
    # "position": queries are projected positional features only;
    # "position+features": the preprocessed pixel features are appended.
    decoder_queries: str = "position"

    def __post_init__(self):
        if self.latent_dim % self.num_heads:
            raise ValueError("latent_dim must be divisible by num_heads")
        if self.num_latents < 1:
            raise ValueError("num_latents must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.pos_encoding not in ("fourier", "learned"):
            raise ValueError(f"unknown pos_encoding {self.pos_encoding!r}")
        if self.decoder_queries not in ("position", "position+features"):
            raise ValueError(f"unknown decoder_queries {self.decoder_queries!r}")

    @property
    def pos_channels(self) -> int:
        if self.pos_encoding == "fourier":
            return fourier_channels(self.num_bands)
        return self.learned_pos_dim


def fourier_channels(num_bands: int) -> int:
    return 2 * (2 * num_bands + 1)


def fourier_pos_2d(height: int, width: int, num_bands: int, max_freq: float) -> np.ndarray:
    """Fixed 2D Fourier features, one row per pixel in row-major order.

    Per axis the coordinate is scaled to [-1, 1] and expanded to
    ``[sin(pi f x) for f] + [cos(pi f x) for f] + [x]`` with ``num_bands``
    frequencies spaced linearly from 1 to ``max_freq / 2``.
    """
    freqs = np.linspace(1.0, max_freq / 2.0, num_bands)
    per_axis = []
    for n in (height, width):
        x = np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1)
        arg = np.pi * x[:, None] * freqs[None, :]
        per_axis.append(np.concatenate([np.sin(arg), np.cos(arg), x[:, None]], axis=1))
    rows = np.repeat(per_axis[0], width, axis=0)
    cols = np.tile(per_axis[1], (height, 1))
    return np.concatenate([rows, cols], axis=1)


class PositionalEncoding(Module):
    """Per-pixel position features for a fixed grid, fixed Fourier or learned."""

    def __init__(self, config: PerceiverConfig, height: int, width: int, rng: np.random.Generator):
        self.kind = config.pos_encoding
        self.grid = (height, width)
        if self.kind == "fourier":
            self.fixed = fourier_pos_2d(height, width, config.num_bands, config.max_freq)
        else:
            self.table = parameter(rng.normal(0.0, 0.02, size=(height * width, config.learned_pos_dim)))

    def forward(self) -> Tensor:
        if self.kind == "fourier":
            return Tensor(self.fixed.astype(get_default_dtype()))
        return self.table


class Attention(Module):
    """Multi-head scaled dot-product attention on already-normalized inputs.

    ``last_weights`` keeps the most recent attention matrix ``[B, h, Q, M]``
    for inspection; it is a plain array and plays no part in gradients.
    """

    def __init__(self, q_dim: int, kv_dim: int, num_heads: int, rng: np.random.Generator,
                 inner_dim: int | None = None):
        inner_dim = inner_dim or q_dim
        if inner_dim % num_heads:
            raise ValueError(f"attention width {inner_dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.head_dim = inner_dim // num_heads
        self.to_q = Linear(q_dim, inner_dim, rng)
        self.to_k = Linear(kv_dim, inner_dim, rng)
        self.to_v = Linear(kv_dim, inner_dim, rng)
        self.to_out = Linear(inner_dim, q_dim, rng)
        self.last_weights: np.ndarray | None = None

    def _heads(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return permute(reshape(x, (b, n, self.num_heads, self.head_dim)), (0, 2, 1, 3))

    def forward(self, q: Tensor, kv: Tensor) -> Tensor:
        qh = self._heads(mul(self.to_q(q), 1.0 / math.sqrt(self.head_dim)))
        kh = self._heads(self.to_k(kv))
        vh = self._heads(self.to_v(kv))
        weights = softmax(matmul(qh, permute(kh, (0, 1, 3, 2))), axis=-1)
        self.last_weights = weights.data
        out = permute(matmul(weights, vh), (0, 2, 1, 3))
        b, n = out.shape[:2]
        return self.to_out(reshape(out, (b, n, self.num_heads * self.head_dim)))


class CrossAttention(Module):
    """Pre-norm cross-attention: ``queries + attend(LN(queries), LN(kv))``."""

    def __init__(self, q_dim: int, kv_dim: int, num_heads: int, rng: np.random.Generator,
                 residual: bool = True):
        self.norm_q = LayerNorm(q_dim)
        self.norm_kv = LayerNorm(kv_dim)
        self.attn = Attention(q_dim, kv_dim, num_heads, rng)
        self.residual = residual

    def forward(self, queries: Tensor, kv: Tensor) -> Tensor:
        if queries.shape[-1] % self.attn.num_heads:
            raise ValueError("query width not divisible by head count")
        out = self.attn(self.norm_q(queries), self.norm_kv(kv))
        return queries + out if self.residual else out


class CrossAttentionBlock(Module):
    def __init__(self, q_dim, kv_dim, num_heads, mlp_ratio, rng, residual=True):
        self.cross = CrossAttention(q_dim, kv_dim, num_heads, rng, residual)
        self.norm = LayerNorm(q_dim)
        self.mlp = MLP(q_dim, mlp_ratio * q_dim, rng)

    def forward(self, queries: Tensor, kv: Tensor) -> Tensor:
        x = self.cross(queries, kv)
        return x + self.mlp(self.norm(x))


class SelfAttentionBlock(Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, dim, num_heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio * dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h)
        return x + self.mlp(self.norm2(x))


class Perceiver(Module):
    """Encode ``[B, M, C]`` into the latent array, process it, decode per-pixel logits."""

    def __init__(self, config: PerceiverConfig, rng: np.random.Generator, query_feature_channels: int = 0):
        self.config = config
        d = config.latent_dim
        self.latents = parameter(rng.normal(0.0, 0.02, size=(1, config.num_latents, d)))
        self.encoder = CrossAttentionBlock(d, config.input_channels, config.num_heads, config.mlp_ratio, rng)
        self.blocks = [SelfAttentionBlock(d, config.num_heads, config.mlp_ratio, rng)
                       for _ in range(config.num_blocks)]
        with_features = config.decoder_queries == "position+features"
        self.query_feature_channels = query_feature_channels if with_features else 0
        self.query_proj = Linear(config.pos_channels + self.query_feature_channels, d, rng)
        self.decoder = CrossAttentionBlock(d, d, config.num_heads, config.mlp_ratio, rng,
                                           residual=with_features)
        self.head = Linear(d, config.num_classes, rng)

    def encode(self, inputs: Tensor) -> Tensor:
        if inputs.shape[-1] != self.config.input_channels:
            raise ValueError(f"input has {inputs.shape[-1]} channels, "
                             f"config expects {self.config.input_channels}")
        latent = self.encoder(self.latents, inputs)
        for block in self.blocks:
            latent = block(latent)
        return latent

    def output_queries(self, positions: Tensor, features: Tensor | None = None) -> Tensor:
        """Project per-pixel query material to ``[B or 1, M_out, D]``."""
        q = positions if positions.ndim == 3 else reshape(positions, (1,) + positions.shape)
        if self.query_feature_channels:
            if features is None:
                raise ValueError("decoder queries need per-pixel features")
            if features.shape[-1] != self.query_feature_channels:
                raise ValueError("query feature width mismatch")
            b = features.shape[0]
            q = concat([q if q.shape[0] == b else _tile_batch(q, b), features], axis=-1)
        return self.query_proj(q)

    def decode(self, queries: Tensor, latent: Tensor) -> Tensor:
        return self.head(self.decoder(queries, latent))

    def forward(self, inputs: Tensor, positions: Tensor, query_features: Tensor | None = None) -> Tensor:
        latent = self.encode(inputs)
        return self.decode(self.output_queries(positions, query_features), latent)


def record_encoder(perceiver: Perceiver, inputs: Tensor) -> Tape:
    """Run :meth:`Perceiver.encode` under a tape (no gradient graph) and return the tape."""
    with no_grad(), Tape() as tape:
        perceiver.encode(inputs)
    return tape


def _tile_batch(x: Tensor, b: int) -> Tensor:
    return concat([x] * b, axis=0)


# -- checkpoints ----------------------------------------------------------------

CHECKPOINT_MAGIC = "VPCKPT 1"


def save_checkpoint(path, named: dict[str, np.ndarray] | Module) -> None:
    """Text manifest (name, shape) followed by little-endian float32 payloads."""
    if isinstance(named, Module):
        named = {k: v.data for k, v in named.named_parameters()}
    lines = [CHECKPOINT_MAGIC, str(len(named))]
    for name, arr in named.items():
        if any(c.isspace() for c in name):
            raise ValueError(f"parameter name {name!r} contains whitespace")
        lines.append(f"{name} {'x'.join(str(s) for s in arr.shape) or '1'}")
    lines.append("END")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for arr in named.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    header_end = raw.index(b"\nEND\n") + len(b"\nEND\n")
    lines = raw[:header_end].decode("ascii").splitlines()
    if lines[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    count = int(lines[1])
    out: dict[str, np.ndarray] = {}
    offset = header_end
    for line in lines[2:2 + count]:
        name, shape_text = line.rsplit(" ", 1)
        shape = tuple(int(s) for s in shape_text.split("x"))
        n = int(np.prod(shape))
        out[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(shape).astype(np.float32)
        offset += 4 * n
    if offset != len(raw):
        raise ValueError(f"{path}: trailing or missing payload bytes")
    return out


def load_parameters(module: Module, state: dict[str, np.ndarray]) -> None:
    params = dict(module.named_parameters())
    missing = set(params) - set(state)
    unexpected = set(state) - set(params)
    if missing or unexpected:
        raise ValueError(f"checkpoint mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
    for name, p in params.items():
        if p.shape != state[name].shape:
            raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
        p.data = state[name].astype(p.dtype).copy()

