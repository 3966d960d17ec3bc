"""Transformer building blocks: RoPE attention, SwiGLU MLP, embeddings, LM head.

Sublayer functions return the sublayer output *without* the residual add;
``transformer_layer`` wires the two pre-norm residual connections.
Inputs may be ``(T, C)`` or batched ``(B, T, C)``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, fields
from typing import Callable, Iterator

import numpy as np

from . import tensor as tn
from .errors import ContractError, DimensionError
from .tensor import Tensor

NORM_EPS = 1e-5


def _named(obj, prefix: str) -> Iterator[tuple[str, Tensor]]:
    for f in fields(obj):
        yield f"{prefix}{f.name}", getattr(obj, f.name)


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    norm: Tensor

    def named(self, prefix: str = ""):
        return _named(self, prefix)


@dataclass
class MlpParams:
    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor
    norm: Tensor

    def named(self, prefix: str = ""):
        return _named(self, prefix)


@dataclass
class LayerParams:
    attn: AttentionParams
    mlp: MlpParams

    def named(self, prefix: str = ""):
        yield from self.attn.named(f"{prefix}attn.")
        yield from self.mlp.named(f"{prefix}mlp.")


@dataclass
class EmbeddingParams:
    tok: Tensor
    unembed: Tensor
    final_norm: Tensor

    def named(self, prefix: str = ""):
        return _named(self, prefix)


class LayerContext:
    """Per-application extras for a shared layer.

    ``lora`` maps projection names (``"attn.wq"``, ``"mlp.w_down"``...) to
    ``(A, B)`` low-rank factors added to the base weight. ``tap`` is called
    as ``tap(projection_name, input_array)`` before each projection and is
    used to collect calibration statistics.
    """

    __slots__ = ("lora", "tap")

    def __init__(self, lora: dict | None = None, tap: Callable | None = None):
        self.lora = lora
        self.tap = tap


_PLAIN = LayerContext()


def linear(x: Tensor, w: Tensor, name: str = "", ctx: LayerContext = _PLAIN) -> Tensor:
    if ctx.tap is not None:
        ctx.tap(name, x.data)
    out = x @ w
    if ctx.lora is not None and name in ctx.lora:
        a, b = ctx.lora[name]
        out = out + (x @ a) @ b
    return out


@functools.lru_cache(maxsize=64)
def rope_tables(T: int, head_dim: int, base: float, dtype: str) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape (T, head_dim/2) for absolute positions 0..T-1."""
    half = head_dim // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    ang = np.arange(T, dtype=np.float64)[:, None] * inv_freq[None, :]
    cos, sin = np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)
    cos.setflags(write=False)
    sin.setflags(write=False)
    return cos, sin


@functools.lru_cache(maxsize=64)
def _causal_mask(T: int, dtype: str) -> np.ndarray:
    m = np.triu(np.full((T, T), -np.inf, dtype=dtype), k=1)
    m.setflags(write=False)
    return m


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return x.reshape(1, *x.shape), True
    if x.ndim == 3:
        return x, False
    raise DimensionError(f"expected (T, C) or (B, T, C) input, got {x.shape}")


def attention(
    x: Tensor,
    p: AttentionParams,
    head_count: int,
    rope_base: float = 10000.0,
    ctx: LayerContext = _PLAIN,
    return_weights: bool = False,
):
    """Causal multi-head self-attention with RoPE; pre-norm applied inside."""
    xb, squeeze = _batched(x)
    B, T, C = xb.shape
    if T == 0:
        raise ContractError("attention requires at least one position (T >= 1)")
    if C % head_count:
        raise DimensionError(f"model dim {C} not divisible by head_count {head_count}")
    hd = C // head_count
    h = tn.rmsnorm(xb, p.norm, NORM_EPS)

    def heads(t: Tensor) -> Tensor:
        return t.reshape(B, T, head_count, hd).transpose(0, 2, 1, 3)

    q = heads(linear(h, p.wq, "attn.wq", ctx))
    k = heads(linear(h, p.wk, "attn.wk", ctx))
    v = heads(linear(h, p.wv, "attn.wv", ctx))
    cos, sin = rope_tables(T, hd, float(rope_base), xb.dtype.str)
    q = tn.rope(q, cos, sin)
    k = tn.rope(k, cos, sin)
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(hd)) + _causal_mask(T, xb.dtype.str)
    weights = tn.softmax(scores, axis=-1)
    mixed = (weights @ v).transpose(0, 2, 1, 3).reshape(B, T, C)
    out = linear(mixed, p.wo, "attn.wo", ctx)
    if squeeze:
        out = out.reshape(T, C)
    if return_weights:
        return out, weights.data
    return out


def mlp(x: Tensor, p: MlpParams, ctx: LayerContext = _PLAIN) -> Tensor:
    """SwiGLU feed-forward: ``W_down(silu(W_gate h) * W_up h)`` with ``h = rmsnorm(x)``."""
    h = tn.rmsnorm(x, p.norm, NORM_EPS)
    gated = tn.silu(linear(h, p.w_gate, "mlp.w_gate", ctx)) * linear(h, p.w_up, "mlp.w_up", ctx)
    return linear(gated, p.w_down, "mlp.w_down", ctx)


def transformer_layer(
    x: Tensor,
    layer: LayerParams,
    head_count: int,
    rope_base: float = 10000.0,
    ctx: LayerContext = _PLAIN,
) -> Tensor:
    h = x + attention(x, layer.attn, head_count, rope_base, ctx)
    return h + mlp(h, layer.mlp, ctx)


def embed(tokens: np.ndarray, emb: EmbeddingParams) -> Tensor:
    return tn.take_rows(emb.tok, tokens)


def lm_head(x: Tensor, emb: EmbeddingParams) -> Tensor:
    """Final RMSNorm followed by the (untied) unembedding; returns logits."""
    return tn.rmsnorm(x, emb.final_norm, NORM_EPS) @ emb.unembed.T
