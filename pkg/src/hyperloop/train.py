"""Training: warmup + cosine schedule, AdamW, global-norm clipping, resumable loop."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import checkpoint as ckpt_io
from . import tensor as tn
from .config import RunConfig, TrainConfig
from .data import TokenStream
from .errors import CheckpointError, TrainingError
from .model import Model, build

_NO_DECAY_LEAVES = {"b_pre", "b_post", "b_res", "a_pre", "a_post", "a_res", "e_loop"}


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``max_lr``, then cosine decay to ``min_lr`` at ``total_steps``."""
    if step < cfg.warmup_steps:
        return cfg.max_lr * step / cfg.warmup_steps
    progress = min(1.0, (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps))
    lr = cfg.min_lr + 0.5 * (cfg.max_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * progress))
    return min(lr, cfg.max_lr)  # guard against rounding just above max_lr


def decays(name: str) -> bool:
    """Whether weight decay applies: not to norm weights, biases, alpha scales or loop embeddings."""
    leaf = name.rsplit(".", 1)[-1]
    return not (leaf.endswith("norm") or leaf in _NO_DECAY_LEAVES)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[float, float]:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``.

    Returns ``(pre_clip_norm, scale)``.
    """
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    scale = max_norm / total if total > max_norm else 1.0
    if scale != 1.0:
        for g in grads.values():
            g *= g.dtype.type(scale)
    return total, scale


@dataclass
class AdamW:
    """Bias-corrected Adam with decoupled weight decay.

    ``state`` maps parameter name to ``(m, v)``; ``step`` counts completed updates.
    """

    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    state: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "AdamW":
        return cls(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)

    def update(self, params: dict[str, tn.Tensor], grads: dict[str, np.ndarray], lr: float) -> None:
        self.step += 1
        t = self.step
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            if name not in self.state:
                self.state[name] = (np.zeros_like(p.data), np.zeros_like(p.data))
            m, v = self.state[name]
            dt = p.data.dtype.type
            m *= dt(self.beta1)
            m += dt(1.0 - self.beta1) * g
            v *= dt(self.beta2)
            v += dt(1.0 - self.beta2) * g * g
            if self.weight_decay and decays(name):
                p.data *= dt(1.0 - lr * self.weight_decay)
            p.data -= dt(lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(self.eps))

    def state_records(self) -> dict[str, np.ndarray]:
        out = {}
        for name, (m, v) in self.state.items():
            out[f"m.{name}"] = m
            out[f"v.{name}"] = v
        return out

    def load_records(self, records: dict[str, np.ndarray], names) -> None:
        self.state = {}
        for name in names:
            if f"m.{name}" in records:
                self.state[name] = (records[f"m.{name}"].copy(), records[f"v.{name}"].copy())


def adamw_step(params, grads, opt: AdamW, cfg: TrainConfig) -> tuple[float, float]:
    """Clip ``grads`` at ``cfg.clip_norm``, then apply one AdamW update.

    The update with index ``opt.step`` uses ``lr_at(opt.step + 1)``, so the
    first update already has a nonzero rate and the last one uses ``min_lr``.
    Returns ``(pre_clip_grad_norm, lr)``.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {name} at step {opt.step}")
    norm, _ = clip_grad_norm(grads, cfg.clip_norm)
    lr = lr_at(opt.step + 1, cfg)
    opt.update(params, grads, lr)
    return norm, lr


# -- state and checkpoints -------------------------------------------------------------
@dataclass
class TrainState:
    model: Model
    opt: AdamW
    run: RunConfig

    @property
    def step(self) -> int:
        return self.opt.step

    def to_checkpoint(self) -> ckpt_io.Checkpoint:
        records = self.opt.state_records()
        records["step"] = np.array(self.opt.step, dtype=np.int64)
        records["data_cursor"] = np.array(self.opt.step * self.run.train.batch_size, dtype=np.int64)
        records["rng_seed"] = np.array([self.run.model.seed, self.run.train.seed], dtype=np.int64)
        return ckpt_io.Checkpoint(self.run.to_dict(), self.model.state_dict(), records)

    def save(self, path) -> None:
        ckpt_io.save(self.to_checkpoint(), path)

    @classmethod
    def from_checkpoint(cls, ck: ckpt_io.Checkpoint) -> "TrainState":
        run = RunConfig.from_dict(ck.config)
        model = build(run.model)
        try:
            model.load_state_dict(ck.tensors)
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"checkpoint tensors do not match config: {exc}") from None
        opt = AdamW.from_config(run.train)
        opt.load_records(ck.optimizer, model.named_parameters())
        opt.step = int(ck.optimizer.get("step", np.array(0)))
        return cls(model, opt, run)

    @classmethod
    def load(cls, path) -> "TrainState":
        return cls.from_checkpoint(ckpt_io.load(path))

    @classmethod
    def fresh(cls, run: RunConfig) -> "TrainState":
        return cls(build(run.model), AdamW.from_config(run.train), run)


def train_loop(
    state: TrainState,
    data: TokenStream,
    out_dir: str | os.PathLike | None = None,
    until: int | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> list[dict]:
    """Train from ``state.step`` up to ``until`` (default ``total_steps``).

    Each step appends ``{step, loss, lr, grad_norm, tokens_seen}`` to the
    returned list and, with ``out_dir``, to ``metrics.jsonl``. A checkpoint
    ``checkpoint.hltc`` is written every ``eval_every`` steps and at the end.
    A non-finite loss or gradient writes ``abort.hltc`` with the last good
    state and raises ``TrainingError``.
    """
    cfg = state.run.train
    stop = cfg.total_steps if until is None else min(until, cfg.total_steps)
    params = state.model.named_parameters()
    log = []
    metrics_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_fh = open(os.path.join(out_dir, "metrics.jsonl"), "a", encoding="utf-8")
    try:
        while state.step < stop:
            step = state.step
            x, y = data.batch(step, cfg.batch_size)
            state.model.zero_grad()
            loss = state.model.loss(x, y)
            value = loss.item()
            if not math.isfinite(value):
                _abort(state, out_dir, f"non-finite loss {value} at step {step}")
            loss.backward()
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            try:
                norm, lr = adamw_step(params, grads, state.opt, cfg)
            except TrainingError as exc:
                _abort(state, out_dir, str(exc))
            rec = {
                "step": step,
                "loss": value,
                "lr": lr,
                "grad_norm": norm,
                "tokens_seen": (step + 1) * cfg.batch_size * cfg.seq_len,
            }
            log.append(rec)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(rec) + "\n")
            if on_step is not None:
                on_step(rec)
            if out_dir is not None and (state.step % cfg.eval_every == 0 or state.step == stop):
                metrics_fh.flush()
                state.save(os.path.join(out_dir, "checkpoint.hltc"))
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    return log


def _abort(state: TrainState, out_dir, message: str):
    # parameters are untouched by the failing step, so this is the last good state
    if out_dir is not None:
        state.save(os.path.join(out_dir, "abort.hltc"))
    raise TrainingError(message)


def evaluate_ppl(model: Model, data: TokenStream, batch_size: int = 16, max_windows: int | None = None) -> dict:
    """Held-out ``{"loss", "ppl", "tokens"}``: exp of mean token cross-entropy over non-overlapping windows."""
    total, count = 0.0, 0
    with tn.no_grad():
        for x, y in data.heldout_batches(batch_size, max_windows):
            n = y.size
            total += model.loss(x, y).item() * n
            count += n
    mean = total / count
    return {"loss": mean, "ppl": math.exp(mean), "tokens": count}


def make_stream(run: RunConfig, corpus: np.ndarray) -> TokenStream:
    return TokenStream(corpus, run.train.seq_len, run.train.heldout_fraction, run.train.seed)

