"""Hyper-connections over an n-stream residual state.

A stream state ``y`` has shape ``(..., T, n, C)``. For every token the
connection derives three input-dependent maps from the flattened,
RMS-normalized state ``z``:

* read  ``H_pre  = sigmoid(a_pre * W_pre z + b_pre)``            (1 x n)
* write ``H_post = 2 * sigmoid(a_post * W_post z + b_post)``     (n x 1)
* mix   ``H_res``: Sinkhorn-normalized dense n x n, a sigmoid diagonal,
  or the identity, depending on ``mode``.

``hc_apply`` then performs
``y' = H_res y + H_post (F(H_pre y) + e)`` where ``F`` maps the C-wide
read-out to a C-wide update and ``e`` is an optional loop embedding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tn
from .config import HRES_MODES
from .errors import ConfigError, DimensionError
from .tensor import Tensor

SINKHORN_ITERS = 20
NORM_EPS = 1e-5
DIAG_RES_INIT = 0.99
SINKHORN_DIAG_BIAS = 6.0


@dataclass
class HyperConnectionParams:
    mode: str
    w_pre: Tensor
    b_pre: Tensor
    a_pre: Tensor
    w_post: Tensor
    b_post: Tensor
    a_post: Tensor
    norm: Tensor
    w_res: Tensor | None = None
    b_res: Tensor | None = None
    a_res: Tensor | None = None
    e_loop: Tensor | None = None

    @property
    def streams(self) -> int:
        return self.w_pre.shape[0]

    @property
    def width(self) -> int:
        return self.w_pre.shape[1] // self.streams

    def named(self, prefix: str = ""):
        for name in ("w_pre", "b_pre", "a_pre", "w_post", "b_post", "a_post", "norm", "w_res", "b_res", "a_res", "e_loop"):
            t = getattr(self, name)
            if t is not None:
                yield f"{prefix}{name}", t

    def check(self) -> None:
        n, nC = self.w_pre.shape
        expect_rows = {"sinkhorn": n * n, "diagonal": n, "identity": None}[self.mode]
        rows = None if self.w_res is None else self.w_res.shape[0]
        if rows != expect_rows:
            raise ConfigError(f"{self.mode} mode expects W_res with {expect_rows} rows, got {rows}")
        if self.norm.shape != (nC,):
            raise ConfigError(f"HC norm weight must have length {nC}, got {self.norm.shape}")


@dataclass
class MixMatrices:
    """Per-token read/write/mix maps.

    ``h_pre`` is ``(..., T, 1, n)`` and ``h_post`` is ``(..., T, n, 1)``.
    ``h_res`` is ``(..., T, n, n)`` in sinkhorn mode, the diagonal
    ``(..., T, n)`` in diagonal mode, and ``None`` for the identity.
    """

    h_pre: Tensor
    h_post: Tensor
    h_res: Tensor | None
    mode: str

    def res_matrix(self) -> np.ndarray:
        """Dense ``(..., T, n, n)`` copy of ``H_res`` for inspection."""
        n = self.h_pre.shape[-1]
        lead = self.h_pre.shape[:-2]
        if self.mode == "sinkhorn":
            return self.h_res.data
        if self.mode == "diagonal":
            d = self.h_res.data
            out = np.zeros(lead + (n, n), dtype=d.dtype)
            idx = np.arange(n)
            out[..., idx, idx] = d
            return out
        return np.broadcast_to(np.eye(n, dtype=self.h_pre.dtype), lead + (n, n)).copy()


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def init_params(
    n: int,
    C: int,
    mode: str = "diagonal",
    loop_embedding: bool = True,
    dtype=np.float32,
) -> HyperConnectionParams:
    """Initial HC parameters: the connection starts close to a plain residual.

    Projections are zero and all scales one, so the read averages streams,
    the write weight is ``2 * sigmoid(0) = 1`` and ``H_res`` is near identity.
    """
    if mode not in HRES_MODES:
        raise ConfigError(f"unknown hres mode {mode!r}")

    def t(a):
        return Tensor(np.asarray(a, dtype=dtype), requires_grad=True)

    nC = n * C
    # n = 1 would need an infinite bias for a read weight of exactly 1
    read_bias = _logit(min(1.0 / n, DIAG_RES_INIT))
    p = HyperConnectionParams(
        mode=mode,
        w_pre=t(np.zeros((n, nC))),
        b_pre=t(np.full(n, read_bias)),
        a_pre=t(1.0),
        w_post=t(np.zeros((n, nC))),
        b_post=t(np.zeros(n)),
        a_post=t(1.0),
        norm=t(np.ones(nC)),
    )
    if mode == "diagonal":
        p.w_res = t(np.zeros((n, nC)))
        p.b_res = t(np.full(n, _logit(DIAG_RES_INIT)))
        p.a_res = t(1.0)
    elif mode == "sinkhorn":
        p.w_res = t(np.zeros((n * n, nC)))
        p.b_res = t(np.eye(n) * SINKHORN_DIAG_BIAS)
        p.a_res = t(1.0)
    if loop_embedding:
        p.e_loop = t(np.zeros(C))
    return p


def count_params(n: int, C: int, mode: str, loop_embedding: bool, norm_weight: bool = True) -> int:
    """Closed-form parameter count of one HC site."""
    nC = n * C
    total = 2 * (n * nC + n) + 2
    if mode == "diagonal":
        total += n * nC + n + 1
    elif mode == "sinkhorn":
        total += n * n * nC + n * n + 1
    if norm_weight:
        total += nC
    if loop_embedding:
        total += C
    return total


def expand(x: Tensor, n: int) -> Tensor:
    """Copy a ``(..., T, C)`` residual into ``n`` identical streams ``(..., T, n, C)``."""
    if n < 1:
        raise DimensionError("stream count must be >= 1")
    shape = x.shape[:-1] + (1, x.shape[-1])
    return tn.broadcast_to(x.reshape(shape), x.shape[:-1] + (n, x.shape[-1]))


def merge(y: Tensor) -> Tensor:
    """Average the stream axis: ``(..., T, n, C) -> (..., T, C)``."""
    return y.mean(axis=-2)


def sinkhorn_normalize(m: Tensor, iters: int = SINKHORN_ITERS) -> Tensor:
    """Exponentiate, then alternately normalize columns and rows ``iters`` times.

    Works on any ``(..., n, n)`` stack. The shift by the per-matrix maximum
    cancels in the first normalization, so it is taken as a constant.
    The result ends on a row normalization: rows sum to one exactly.
    """
    if m.ndim < 2 or m.shape[-1] != m.shape[-2]:
        raise DimensionError(f"sinkhorn_normalize expects square matrices, got {m.shape}")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    x = m.data
    p = np.exp(x - x.max(axis=(-2, -1), keepdims=True))
    saved = []
    for _ in range(iters):
        cs = p.sum(axis=-2, keepdims=True)
        a = p / cs
        rs = a.sum(axis=-1, keepdims=True)
        p = a / rs
        saved.append((cs, a, rs, p))
    p0 = np.exp(x - x.max(axis=(-2, -1), keepdims=True))

    def bw(g):
        for cs, a, rs, out in reversed(saved):
            g = (g - (g * out).sum(axis=-1, keepdims=True)) / rs
            g = (g - (g * a).sum(axis=-2, keepdims=True)) / cs
        return (g * p0,)

    return tn.make_node(p, (m,), bw, "sinkhorn")


def compute_mix(y: Tensor, p: HyperConnectionParams, sinkhorn_iters: int = SINKHORN_ITERS) -> MixMatrices:
    n, nC = p.w_pre.shape
    if y.shape[-2:] != (n, nC // n):
        raise ConfigError(f"stream state {y.shape} does not match HC params (n={n}, C={nC // n})")
    z = tn.rmsnorm(y.reshape(*y.shape[:-2], nC), p.norm, NORM_EPS)
    lead = y.shape[:-2]
    h_pre = tn.sigmoid(p.a_pre * (z @ p.w_pre.T) + p.b_pre).reshape(*lead, 1, n)
    h_post = (tn.sigmoid(p.a_post * (z @ p.w_post.T) + p.b_post) * 2.0).reshape(*lead, n, 1)
    if p.mode == "identity":
        h_res = None
    elif p.mode == "diagonal":
        h_res = tn.sigmoid(p.a_res * (z @ p.w_res.T) + p.b_res)
    elif p.mode == "sinkhorn":
        logits = p.a_res * (z @ p.w_res.T).reshape(*lead, n, n) + p.b_res
        h_res = sinkhorn_normalize(logits, sinkhorn_iters)
    else:
        raise ConfigError(f"unknown hres mode {p.mode!r}")
    return MixMatrices(h_pre, h_post, h_res, p.mode)


def identity_mix(y: Tensor) -> MixMatrices:
    """Fixed maps that keep identical streams identical: uniform read, unit write, ``H_res = I``."""
    *lead, n, _ = y.shape
    lead = tuple(lead)
    h_pre = Tensor(np.full(lead + (1, n), 1.0 / n, dtype=y.dtype))
    h_post = Tensor(np.ones(lead + (n, 1), dtype=y.dtype))
    return MixMatrices(h_pre, h_post, None, "identity")


def read(y: Tensor, mix: MixMatrices) -> Tensor:
    """``H_pre y``: the C-wide input handed to the wrapped sub-stack."""
    x = mix.h_pre @ y
    return x.reshape(*x.shape[:-2], x.shape[-1])


def carry(y: Tensor, mix: MixMatrices) -> Tensor:
    """``H_res y``: the stream-mixing (residual) term."""
    if mix.mode == "identity" or mix.h_res is None:
        return y
    if mix.mode == "diagonal":
        return mix.h_res.reshape(*mix.h_res.shape, 1) * y
    return mix.h_res @ y


def write(y: Tensor, mix: MixMatrices, update: Tensor, e_loop: Tensor | None = None) -> Tensor:
    """``H_res y + H_post (update + e)`` for a C-wide ``update``."""
    if e_loop is not None:
        update = update + e_loop
    u = update.reshape(*update.shape[:-1], 1, update.shape[-1])
    return carry(y, mix) + mix.h_post * u


def hc_apply(
    y: Tensor,
    mix: MixMatrices,
    sublayer_output_fn: Callable[[Tensor], Tensor],
    e_loop: Tensor | None = None,
) -> Tensor:
    """One hyper-connected update of the stream state."""
    return write(y, mix, sublayer_output_fn(read(y, mix)), e_loop)
