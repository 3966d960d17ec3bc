"""Model and training configuration documents.

Both configs serialize to JSON objects whose keys are exactly the dataclass
field names; unknown keys are rejected on load.
"""

from __future__ import annotations

import dataclasses
import json
import math
import re
from dataclasses import dataclass, field, fields
from typing import Any

from .errors import ConfigError

ARCH_KINDS = ("vanilla", "mhc", "looped", "hyperloop")
HRES_MODES = ("sinkhorn", "diagonal", "identity")
_EVERY_RE = re.compile(r"^every_(\d+)_layers$")


def parse_placement(placement: str, middle_layers: int) -> int:
    """Number of consecutive middle-layer applications spanned by one HC site."""
    if placement == "per_loop":
        return middle_layers
    if placement == "per_layer":
        return 1
    m = _EVERY_RE.match(placement)
    if m and int(m.group(1)) >= 1:
        return int(m.group(1))
    raise ConfigError(f"hc_placement: expected per_loop, per_layer or every_<j>_layers, got {placement!r}")


def ffn_width(model_dim: int, ffn_mult: float = 2.75, multiple: int = 64) -> int:
    """SwiGLU hidden width: ``ffn_mult * model_dim`` rounded up to ``multiple``."""
    return max(multiple, int(math.ceil(round(ffn_mult * model_dim, 6) / multiple)) * multiple)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 257
    model_dim: int = 64
    head_count: int = 16
    rope_base: float = 10000.0
    ffn_mult: float = 2.75
    arch_kind: str = "hyperloop"
    begin_layers: int = 1
    middle_layers: int = 2
    loops: int = 3
    end_layers: int = 1
    streams: int = 4
    hres_mode: str = "diagonal"
    hc_placement: str = "per_loop"
    lora_rank: int = 0
    max_seq_len: int = 512
    seed: int = 0

    def __post_init__(self):
        self.validate()

    # -- derived quantities --------------------------------------------------
    @property
    def ffn_dim(self) -> int:
        return ffn_width(self.model_dim, self.ffn_mult)

    @property
    def unrolled_depth(self) -> int:
        return self.begin_layers + self.middle_layers * self.loops + self.end_layers

    @property
    def uses_streams(self) -> bool:
        return self.arch_kind in ("mhc", "hyperloop")

    @property
    def is_looped(self) -> bool:
        return self.arch_kind in ("looped", "hyperloop")

    @property
    def hc_stride(self) -> int:
        return parse_placement(self.hc_placement, self.middle_layers)

    def validate(self) -> None:
        problems = []
        if self.arch_kind not in ARCH_KINDS:
            problems.append(f"arch_kind must be one of {ARCH_KINDS}")
        if self.hres_mode not in HRES_MODES:
            problems.append(f"hres_mode must be one of {HRES_MODES}")
        for name in ("vocab_size", "model_dim", "head_count", "loops", "streams", "max_seq_len"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        for name in ("begin_layers", "middle_layers", "end_layers", "lora_rank"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        if self.head_count >= 1 and self.model_dim % self.head_count:
            problems.append("model_dim must be divisible by head_count")
        elif self.head_count >= 1 and (self.model_dim // self.head_count) % 2:
            problems.append("head dimension (model_dim / head_count) must be even for RoPE")
        if self.arch_kind in ("vanilla", "mhc") and self.loops != 1:
            problems.append(f"loops must be 1 for arch_kind={self.arch_kind} (use middle_layers for depth)")
        if self.arch_kind in ("vanilla", "looped") and self.streams != 1:
            problems.append(f"streams must be 1 for arch_kind={self.arch_kind}")
        if self.lora_rank and self.arch_kind != "looped":
            problems.append("lora_rank > 0 requires arch_kind=looped")
        if self.arch_kind == "hyperloop" and self.middle_layers < 1:
            problems.append("hyperloop requires middle_layers >= 1")
        try:
            parse_placement(self.hc_placement, max(self.middle_layers, 1))
        except ConfigError as exc:
            problems.append(str(exc))
        if self.arch_kind == "mhc" and self.hres_mode != "sinkhorn":
            problems.append("mhc uses sinkhorn hres_mode")
        if self.arch_kind == "mhc" and self.hc_placement != "per_loop":
            problems.append("hc_placement applies to hyperloop only; mhc wraps every sublayer")
        if self.ffn_mult <= 0:
            problems.append("ffn_mult must be positive")
        if problems:
            raise ConfigError("invalid ModelConfig: " + "; ".join(problems))

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "ModelConfig":
        return _from_dict(cls, doc)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    seq_len: int = 64
    max_lr: float = 3e-3
    min_lr: float = 3e-4
    warmup_steps: int = 50
    total_steps: int = 500
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    eval_every: int = 100
    heldout_fraction: float = 0.1
    seed: int = 0
    corpus_path: str = ""  # empty: seeded synthetic corpus of corpus_bytes bytes
    corpus_bytes: int = 1_200_000
    eval_windows: int = 256  # held-out windows for eval/analyze; 0 means all
    calib_sequences: int = 64

    def __post_init__(self):
        problems = []
        if not 0 <= self.warmup_steps < self.total_steps:
            problems.append("need 0 <= warmup_steps < total_steps")
        if self.min_lr > self.max_lr:
            problems.append("min_lr must be <= max_lr")
        if self.batch_size < 1 or self.seq_len < 1:
            problems.append("batch_size and seq_len must be >= 1")
        if self.eval_every < 1:
            problems.append("eval_every must be >= 1")
        if not 0 < self.heldout_fraction < 1:
            problems.append("heldout_fraction must lie in (0, 1)")
        if self.corpus_bytes < 1 or self.eval_windows < 0 or self.calib_sequences < 1:
            problems.append("corpus_bytes and calib_sequences must be >= 1, eval_windows >= 0")
        if problems:
            raise ConfigError("invalid TrainConfig: " + "; ".join(problems))

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "TrainConfig":
        return _from_dict(cls, doc)


def _from_dict(cls, doc):
    if not isinstance(doc, dict):
        raise ConfigError(f"{cls.__name__}: expected a JSON object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigError(f"{cls.__name__}: unknown fields {unknown}")
    defaults = cls()
    kwargs = {}
    for key, value in doc.items():
        ftype = type(getattr(defaults, key))
        try:
            kwargs[key] = _coerce(value, ftype)
        except (TypeError, ValueError):
            raise ConfigError(f"{cls.__name__}.{key}: cannot interpret {value!r} as {ftype.__name__}") from None
    return cls(**kwargs)


def _coerce(value, ftype):
    if ftype is bool:
        if isinstance(value, str):
            return value.lower() in ("1", "true", "yes")
        return bool(value)
    if ftype is int:
        if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
            raise ValueError
        return int(value)
    if ftype is float:
        return float(value)
    return str(value)


@dataclass(frozen=True)
class RunConfig:
    """Top-level document consumed by the command line: model + train sections."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict[str, Any]:
        return {"model": self.model.to_dict(), "train": self.train.to_dict()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("run config: expected a JSON object")
        unknown = sorted(set(doc) - {"model", "train"})
        if unknown:
            raise ConfigError(f"run config: unknown sections {unknown}")
        return cls(ModelConfig.from_dict(doc.get("model", {})), TrainConfig.from_dict(doc.get("train", {})))

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(doc)

    def with_overrides(self, overrides: list[str]) -> "RunConfig":
        """Apply ``section.key=value`` overrides; keys must already exist."""
        doc = self.to_dict()
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r}: expected key=value")
            key, value = item.split("=", 1)
            parts = key.strip().split(".")
            if len(parts) != 2 or parts[0] not in doc or parts[1] not in doc[parts[0]]:
                raise ConfigError(f"override {key!r}: no such config key")
            section, name = parts
            current = doc[section][name]
            try:
                doc[section][name] = _coerce(value, type(current))
            except (TypeError, ValueError):
                raise ConfigError(f"override {key!r}: cannot interpret {value!r}") from None
        return RunConfig.from_dict(doc)
