"""Weight-only post-training quantization: round-to-nearest and GPTQ.

A projection stored as ``x @ W`` with ``W`` of shape ``(in, out)`` is
quantized as the ``(out, in)`` matrix ``W.T``: rows are output channels and
groups of ``group_size`` consecutive input features share one scale and
zero-point. Codes are unsigned, ``q in [0, 2**bits - 1]``, and dequantize
to ``scale * (q - zero)``.

For looped models a shared middle layer runs once per loop. Its Hessian
sums the inputs of every loop, so one quantized weight serves all loops.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .checkpoint import Checkpoint, PackedInt4
from .errors import DimensionError
from .model import Model

log = logging.getLogger(__name__)

SCALE_FLOOR = 1e-8
DAMP = 0.01


# -- packing --------------------------------------------------------------------------
def pack_int4(codes: np.ndarray) -> PackedInt4:
    """Two codes per byte along each row; the even column goes in the low nibble."""
    codes = np.asarray(codes, dtype=np.uint8)
    if codes.ndim != 2:
        raise DimensionError(f"pack_int4 expects a 2-D code matrix, got {codes.shape}")
    if codes.max(initial=0) > 15:
        raise ValueError("int4 codes must lie in [0, 15]")
    rows, cols = codes.shape
    padded = np.zeros((rows, cols + cols % 2), dtype=np.uint8)
    padded[:, :cols] = codes
    return PackedInt4(padded[:, 0::2] | (padded[:, 1::2] << 4), cols)


def unpack_int4(packed: PackedInt4) -> np.ndarray:
    p = packed.packed
    out = np.empty((p.shape[0], 2 * p.shape[1]), dtype=np.uint8)
    out[:, 0::2] = p & 0x0F
    out[:, 1::2] = p >> 4
    return out[:, : packed.cols]


@dataclass
class QuantizedLinear:
    """Quantized ``(rows, cols)`` weight with per-row, per-group scale and zero-point."""

    codes: np.ndarray  # (rows, cols) uint8
    scale: np.ndarray  # (rows, n_groups) float32
    zero: np.ndarray  # (rows, n_groups) uint8
    group_size: int
    bits: int = 4

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape

    def dequantize(self) -> np.ndarray:
        g = np.arange(self.shape[1]) // self.group_size
        return (self.scale[:, g] * (self.codes.astype(np.float32) - self.zero[:, g].astype(np.float32))).astype(np.float32)

    def packed(self):
        return pack_int4(self.codes) if self.bits == 4 else self.codes.astype(np.uint8)


def _n_groups(cols: int, group_size: int) -> int:
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    return -(-cols // group_size)


def grid_params(w: np.ndarray, bits: int) -> tuple[np.ndarray, np.ndarray]:
    """Asymmetric min-max ``(scale, zero)`` for each row of ``w`` (one group per row).

    The range always contains 0 so the integer zero-point lies in
    ``[0, 2**bits - 1]``. A constant row ``c != 0`` gets ``scale = |c|`` with
    the zero-point one code away, so it dequantizes exactly; an all-zero row
    gets the 1e-8 scale floor and every code equals the zero-point.
    """
    qmax = 2**bits - 1
    wmin, wmax = w.min(axis=1), w.max(axis=1)
    lo, hi = np.minimum(wmin, 0.0), np.maximum(wmax, 0.0)
    const = wmin == wmax
    scale = np.where(const, np.maximum(np.abs(wmin), SCALE_FLOOR), np.maximum((hi - lo) / qmax, SCALE_FLOOR))
    scale = scale.astype(np.float32)
    zero = np.clip(np.round(-lo / scale.astype(np.float64)), 0, qmax)
    zero = np.where(const, np.where(wmin < 0, 1, 0), zero)
    return scale, zero.astype(np.uint8)


def _quantize_cols(w: np.ndarray, scale: np.ndarray, zero: np.ndarray, bits: int) -> np.ndarray:
    qmax = 2**bits - 1
    s = scale.astype(np.float64)[:, None] if w.ndim == 2 else scale.astype(np.float64)
    z = zero.astype(np.float64)[:, None] if w.ndim == 2 else zero.astype(np.float64)
    return np.clip(np.round(w / s) + z, 0, qmax).astype(np.uint8)


def rtn_quantize(W: np.ndarray, group_size: int, bits: int = 4) -> QuantizedLinear:
    """Round every weight to the nearest code of its group's min-max grid."""
    W = np.asarray(W, dtype=np.float64)
    rows, cols = W.shape
    ng = _n_groups(cols, group_size)
    codes = np.empty((rows, cols), dtype=np.uint8)
    scales = np.empty((rows, ng), dtype=np.float32)
    zeros = np.empty((rows, ng), dtype=np.uint8)
    for g in range(ng):
        sl = slice(g * group_size, min((g + 1) * group_size, cols))
        s, z = grid_params(W[:, sl], bits)
        scales[:, g], zeros[:, g] = s, z
        codes[:, sl] = _quantize_cols(W[:, sl], s, z, bits)
    return QuantizedLinear(codes, scales, zeros, group_size, bits)


def gptq_quantize(W: np.ndarray, H: np.ndarray, group_size: int, bits: int = 4, damp: float = DAMP) -> QuantizedLinear:
    """Greedy column-by-column quantization with error feedback through ``chol(H^-1)``.

    ``H`` is the ``(cols, cols)`` input Hessian ``sum 2 x x^T``. Columns are
    visited in natural order; a group's grid is fixed from the
    already-updated weights when its first column is reached.
    """
    W = np.array(W, dtype=np.float64)
    rows, cols = W.shape
    H = np.array(H, dtype=np.float64)
    if H.shape != (cols, cols):
        raise DimensionError(f"Hessian {H.shape} does not match weight columns {cols}")
    dead = np.diag(H) == 0
    H[dead, dead] = 1.0
    H[np.diag_indices(cols)] += damp * float(np.mean(np.diag(H)))
    try:
        U = np.linalg.cholesky(np.linalg.inv(H)).T
    except np.linalg.LinAlgError:
        log.warning("Cholesky of the damped inverse Hessian failed; falling back to RTN")
        return rtn_quantize(W, group_size, bits)
    if not np.all(np.isfinite(U)):
        log.warning("non-finite inverse Hessian factor; falling back to RTN")
        return rtn_quantize(W, group_size, bits)

    ng = _n_groups(cols, group_size)
    codes = np.empty((rows, cols), dtype=np.uint8)
    scales = np.empty((rows, ng), dtype=np.float32)
    zeros = np.empty((rows, ng), dtype=np.uint8)
    for i in range(cols):
        g = i // group_size
        if i % group_size == 0:
            s, z = grid_params(W[:, i : min(i + group_size, cols)], bits)
            scales[:, g], zeros[:, g] = s, z
        s64 = scales[:, g].astype(np.float64)
        q = _quantize_cols(W[:, i], scales[:, g], zeros[:, g], bits)
        codes[:, i] = q
        deq = s64 * (q.astype(np.float64) - zeros[:, g])
        err = (W[:, i] - deq) / U[i, i]
        W[:, i + 1 :] -= np.outer(err, U[i, i + 1 :])
    return QuantizedLinear(codes, scales, zeros, group_size, bits)


def calibration_loss(W: np.ndarray, Wq: np.ndarray, H: np.ndarray) -> float:
    """``sum ||X W^T - X Wq^T||^2`` over calibration inputs, from ``H = sum 2 x x^T``."""
    D = np.asarray(W, dtype=np.float64) - np.asarray(Wq, dtype=np.float64)
    return 0.5 * float(np.einsum("ri,ij,rj->", D, H, D))


# -- Hessian collection ------------------------------------------------------------------
@dataclass
class HessianAccumulator:
    """Input Hessians keyed by projection (``"middle.0.attn.wq"``...).

    ``H`` aggregates every application of a layer; ``per_loop`` keeps the
    contribution of each loop separately for comparison.
    """

    H: dict[str, np.ndarray] = field(default_factory=dict)
    count: dict[str, int] = field(default_factory=dict)
    per_loop: dict[str, dict[int, np.ndarray]] = field(default_factory=dict)
    per_loop_count: dict[str, dict[int, int]] = field(default_factory=dict)

    def add(self, key: str, loop: int, x: np.ndarray) -> None:
        X = np.asarray(x, dtype=np.float64).reshape(-1, x.shape[-1])
        h = 2.0 * (X.T @ X)
        if key not in self.H:
            self.H[key] = np.zeros_like(h)
            self.count[key] = 0
            self.per_loop[key] = {}
            self.per_loop_count[key] = {}
        self.H[key] += h
        self.count[key] += X.shape[0]
        pl = self.per_loop[key]
        pl[loop] = pl.get(loop, 0.0) + h
        self.per_loop_count[key][loop] = self.per_loop_count[key].get(loop, 0) + X.shape[0]


def collect_hessians(model: Model, batches) -> HessianAccumulator:
    """Run ``model`` over calibration token batches and accumulate projection-input Hessians."""
    acc = HessianAccumulator()

    def tap(layer_key, loop, proj, x):
        acc.add(f"{layer_key}.{proj}", loop, x)

    with tn.no_grad():
        for x in batches:
            model.forward(x, tap=tap)
    return acc


# -- whole-model quantization -----------------------------------------------------------------
@dataclass
class QuantResult:
    model: Model  # copy with dequantized weights
    layers: dict[str, QuantizedLinear]
    loss: dict[str, float]  # calibration loss per layer under the aggregated Hessian
    method: str
    bits: int
    group_size: int


def quantize_model(
    model: Model,
    hessians: HessianAccumulator | None,
    group_size: int = 32,
    bits: int = 4,
    method: str = "gptq",
    hessian_of=None,
) -> QuantResult:
    """Quantize every attention/MLP projection; everything else stays full precision.

    ``hessian_of(key)`` may override the Hessian handed to GPTQ (e.g. a
    single loop's); calibration losses are always reported under the
    aggregated Hessian when one is available.
    """
    if method not in ("gptq", "rtn"):
        raise ValueError(f"unknown method {method!r}")
    if method == "gptq" and hessians is None:
        raise ValueError("gptq needs calibration Hessians")
    qmodel = copy.deepcopy(model)
    targets = qmodel.layer_weights()
    layers, losses = {}, {}
    for key, p in targets.items():
        Wt = p.data.T.astype(np.float64)
        if method == "rtn":
            q = rtn_quantize(Wt, group_size, bits)
        else:
            H = hessian_of(key) if hessian_of is not None else hessians.H.get(key)
            q = rtn_quantize(Wt, group_size, bits) if H is None else gptq_quantize(Wt, H, group_size, bits)
        deq = q.dequantize()
        layers[key] = q
        if hessians is not None and key in hessians.H:
            losses[key] = calibration_loss(Wt, deq, hessians.H[key])
        p.data = np.ascontiguousarray(deq.T.astype(qmodel.dtype))
    return QuantResult(qmodel, layers, losses, method, bits, group_size)


def to_checkpoint(result: QuantResult, config: dict) -> Checkpoint:
    """Full-precision tensors for unquantized parameters plus codes/scale/zero per layer."""
    tensors = {}
    quantized = set(result.layers)
    for name, arr in result.model.state_dict().items():
        if name not in quantized:
            tensors[name] = arr
    for key, q in result.layers.items():
        tensors[f"{key}.codes"] = q.packed()
        tensors[f"{key}.scale"] = q.scale
        tensors[f"{key}.zero"] = q.zero
    meta = {"bits": result.bits, "group_size": result.group_size, "method": result.method}
    return Checkpoint({**config, "quant": meta}, tensors, {})


def from_checkpoint(ck: Checkpoint, model: Model) -> dict[str, QuantizedLinear]:
    """Load a quantized checkpoint into ``model`` (dequantized weights); returns the layers."""
    meta = ck.config["quant"]
    bits, gs = int(meta["bits"]), int(meta["group_size"])
    params = model.named_parameters()
    layers = {}
    for key in model.layer_weights():
        raw = ck.tensors[f"{key}.codes"]
        codes = unpack_int4(raw) if isinstance(raw, PackedInt4) else np.asarray(raw, dtype=np.uint8)
        q = QuantizedLinear(codes, ck.tensors[f"{key}.scale"], ck.tensors[f"{key}.zero"], gs, bits)
        layers[key] = q
        params[key].data = np.ascontiguousarray(q.dequantize().T.astype(model.dtype))
    for name, p in params.items():
        if name not in layers:
            p.data = np.array(ck.tensors[name], dtype=model.dtype)
    return layers
