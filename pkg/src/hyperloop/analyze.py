"""Representation analyses: logit lens and cosine-similarity maps over effective layers.

Effective layer ``d`` runs over ``0..D`` with ``D`` the unrolled depth:
``d = 0`` is the embedding, then every begin, unrolled middle and end layer.
Loop boundaries are the points ``d = b + l*m`` for ``l = 1..L`` in looped
models.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .model import Model
from .nn import NORM_EPS

log = logging.getLogger(__name__)

LENS_METRICS = ("ce", "entropy", "accuracy")


@dataclass
class LensReport:
    ce: np.ndarray
    entropy: np.ndarray
    accuracy: np.ndarray
    loop_boundary: np.ndarray  # bool per effective layer

    def __len__(self) -> int:
        return len(self.ce)


@dataclass
class SimilarityReport:
    matrix: np.ndarray  # (D+1, D+1)
    cross_loop: float | None
    loop_boundary: np.ndarray
    zero_norm: int = 0


def _lens_logits(h: np.ndarray, model: Model) -> np.ndarray:
    w = model.emb.final_norm.data.astype(np.float64)
    h = h.astype(np.float64)
    normed = h / np.sqrt(np.mean(h * h, axis=-1, keepdims=True) + NORM_EPS) * w
    return normed @ model.emb.unembed.data.T.astype(np.float64)


def _traces(model: Model, batches):
    with tn.no_grad():
        for x, y in batches:
            logits, tr = model.forward(x, trace=True)
            yield logits.data, tr, np.asarray(y)


def logit_lens(model: Model, batches) -> LensReport:
    """Decode every effective layer's outer representation through the final norm and unembedding.

    ``batches`` yields ``(inputs, targets)``. Returns token-averaged cross
    entropy against the targets, entropy of the lens distribution and greedy
    accuracy per effective layer.
    """
    sums = None
    count = 0
    boundary = None
    for _, tr, y in _traces(model, batches):
        if sums is None:
            sums = np.zeros((3, len(tr)))
            boundary = np.array(tr.loop_boundary, dtype=bool)
        flat_y = y.reshape(-1)
        for d, h in enumerate(tr.outer):
            z = _lens_logits(h, model).reshape(-1, model.config.vocab_size)
            z = z - z.max(axis=-1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
            p = np.exp(logp)
            sums[0, d] += -logp[np.arange(len(flat_y)), flat_y].sum()
            sums[1, d] += -(p * logp).sum()
            sums[2, d] += (z.argmax(axis=-1) == flat_y).sum()
        count += flat_y.size
    mean = sums / count
    return LensReport(mean[0], mean[1], mean[2], boundary)


def cosine_map(model: Model, batches) -> SimilarityReport:
    """Token-averaged cosine similarity between inner residuals of every pair of effective layers.

    A zero-norm vector has similarity 0 with every other layer (counted in
    ``zero_norm``); the diagonal is 1 by definition. ``cross_loop`` averages the similarity of the same
    middle layer across every pair of loop iterations (looped models only).
    """
    cfg = model.config
    total = None
    count = 0
    zero_norm = 0
    boundary = None
    for _, tr, _ in _traces(model, batches):
        reps = np.stack([h.reshape(-1, h.shape[-1]).astype(np.float64) for h in tr.inner])  # (D+1, N, C)
        norms = np.linalg.norm(reps, axis=-1, keepdims=True)
        zero = norms[..., 0] == 0
        zero_norm += int(zero.sum())
        unit = np.where(norms > 0, reps / np.where(norms > 0, norms, 1.0), 0.0)
        sims = np.einsum("inc,jnc->ij", unit, unit)
        total = sims if total is None else total + sims
        count += reps.shape[1]
        if boundary is None:
            boundary = np.array(tr.loop_boundary, dtype=bool)
    if zero_norm:
        log.warning("%d zero-norm residual vectors; their similarities count as 0", zero_norm)
    matrix = total / count
    matrix = 0.5 * (matrix + matrix.T)
    matrix = np.clip(matrix, -1.0, 1.0)
    np.fill_diagonal(matrix, 1.0)  # a layer is identical to itself, zero vectors included
    return SimilarityReport(matrix, cross_loop_similarity(matrix, cfg), boundary, zero_norm)


def cross_loop_similarity(matrix: np.ndarray, cfg) -> float | None:
    if not cfg.is_looped or cfg.loops < 2:
        return None
    b, m, L = cfg.begin_layers, cfg.middle_layers, cfg.loops
    vals = []
    for i in range(m):
        idx = [b + l * m + i + 1 for l in range(L)]
        for a in range(L):
            for c in range(a + 1, L):
                vals.append(matrix[idx[a], idx[c]])
    return float(np.mean(vals))


# -- plot data ------------------------------------------------------------------------------
def emit_plotdata(report, out_dir: str | os.PathLike, prefix: str = "") -> list[str]:
    """Write comma-separated tables for a report; returns the written paths.

    LensReport: ``{prefix}lens_{ce,entropy,accuracy}.csv`` with columns
    ``layer,value,loop_boundary``. SimilarityReport: ``{prefix}similarity.csv``
    with columns ``layer,other_layer,value,loop_boundary`` (long format, one
    row per pair; the flag refers to ``layer``) and
    ``{prefix}cross_loop.csv`` with a single ``value`` row when defined.
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    if isinstance(report, LensReport):
        for metric in LENS_METRICS:
            path = os.path.join(out_dir, f"{prefix}lens_{metric}.csv")
            with open(path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["layer", "value", "loop_boundary"])
                for d, v in enumerate(getattr(report, metric)):
                    w.writerow([d, repr(float(v)), int(report.loop_boundary[d])])
            paths.append(path)
        return paths
    if isinstance(report, SimilarityReport):
        path = os.path.join(out_dir, f"{prefix}similarity.csv")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer", "other_layer", "value", "loop_boundary"])
            n = report.matrix.shape[0]
            for i in range(n):
                for j in range(n):
                    w.writerow([i, j, repr(float(report.matrix[i, j])), int(report.loop_boundary[i])])
        paths.append(path)
        if report.cross_loop is not None:
            path = os.path.join(out_dir, f"{prefix}cross_loop.csv")
            with open(path, "w", newline="", encoding="utf-8") as fh:
                fh.write(f"value\n{report.cross_loop!r}\n")
            paths.append(path)
        return paths
    raise TypeError(f"cannot emit plot data for {type(report).__name__}")


def read_lens(out_dir: str | os.PathLike, prefix: str = "") -> LensReport:
    cols = {}
    boundary = None
    for metric in LENS_METRICS:
        with open(os.path.join(out_dir, f"{prefix}lens_{metric}.csv"), newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        cols[metric] = np.array([float(r["value"]) for r in rows])
        boundary = np.array([r["loop_boundary"] == "1" for r in rows])
    return LensReport(cols["ce"], cols["entropy"], cols["accuracy"], boundary)


def read_similarity(out_dir: str | os.PathLike, prefix: str = "") -> SimilarityReport:
    with open(os.path.join(out_dir, f"{prefix}similarity.csv"), newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    n = int(round(len(rows) ** 0.5))
    matrix = np.zeros((n, n))
    boundary = np.zeros(n, dtype=bool)
    for r in rows:
        i, j = int(r["layer"]), int(r["other_layer"])
        matrix[i, j] = float(r["value"])
        boundary[i] = r["loop_boundary"] == "1"
    cross = None
    path = os.path.join(out_dir, f"{prefix}cross_loop.csv")
    if os.path.exists(path):
        with open(path, encoding="utf-8") as fh:
            cross = float(fh.read().split()[1])
    return SimilarityReport(matrix, cross, boundary)
