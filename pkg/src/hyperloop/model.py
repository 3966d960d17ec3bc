"""Model assembly for the vanilla, mHC, looped and Hyperloop architectures.

All four share one layout: ``begin`` layers, a ``middle`` block and ``end``
layers. Vanilla and mHC run the middle block once with unshared weights;
looped and Hyperloop models apply the same middle weights ``loops`` times.

Hyperloop wraps groups of middle-layer applications in hyper-connections.
With the default ``per_loop`` placement there is one HC site per loop and
the wrapped function is the loop's net update ``block(x) - x``; the
sublayers inside keep their own skip connections and the outer skip is
carried by ``H_res``. mHC wraps every attention and MLP sublayer of every
layer in its own Sinkhorn-mode connection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import hyperconn as hc
from . import nn
from . import tensor as tn
from .config import ModelConfig
from .errors import InputError
from .rng import truncated_normal
from .tensor import Tensor

INIT_STD = 0.02
PROJECTIONS = ("attn.wq", "attn.wk", "attn.wv", "attn.wo", "mlp.w_gate", "mlp.w_up", "mlp.w_down")


def projection_shape(name: str, C: int, F: int) -> tuple[int, int]:
    return {"mlp.w_gate": (C, F), "mlp.w_up": (C, F), "mlp.w_down": (F, C)}.get(name, (C, C))


@dataclass
class HCSite:
    """One Hyperloop HC site: a contiguous run of unrolled middle-layer applications."""

    index: int
    start: int  # first unrolled middle index (loop * m + layer)
    stop: int
    loop_end: int | None  # loop whose boundary this site closes, if any


def hc_sites(cfg: ModelConfig) -> list[HCSite]:
    m, L = cfg.middle_layers, cfg.loops
    j = cfg.hc_stride
    total = m * L
    sites = []
    for s in range(math.ceil(total / j)):
        start, stop = s * j, min((s + 1) * j, total)
        sites.append(HCSite(s, start, stop, stop // m - 1 if stop % m == 0 else None))
    return sites


@dataclass
class ActivationTrace:
    """Per effective layer ``d = 0..D`` representations (``D`` = unrolled depth).

    ``inner`` holds the C-wide residual the layers operate on; ``outer`` holds
    the representation a logit lens decodes (for stream models, the merged
    early-written stream state). ``streams`` records the n-stream state at
    every HC boundary as ``(effective_layer, array)``.
    """

    inner: list[np.ndarray] = field(default_factory=list)
    outer: list[np.ndarray] = field(default_factory=list)
    loop_boundary: list[bool] = field(default_factory=list)
    streams: list[tuple[int, np.ndarray]] = field(default_factory=list)

    def record(self, inner: Tensor, outer: Tensor | None = None, boundary: bool = False) -> None:
        self.inner.append(inner.data)
        self.outer.append((outer if outer is not None else inner).data)
        self.loop_boundary.append(boundary)

    def __len__(self) -> int:
        return len(self.inner)


class Model:
    """Parameters plus forward pass for one ``ModelConfig``."""

    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        cfg = config
        C, F = cfg.model_dim, cfg.ffn_dim
        out_std = INIT_STD / math.sqrt(2 * cfg.unrolled_depth)

        def weight(name, shape, std=INIT_STD):
            return Tensor(truncated_normal(cfg.seed, name, shape, std).astype(self.dtype), requires_grad=True)

        def ones(n):
            return Tensor(np.ones(n, dtype=self.dtype), requires_grad=True)

        def layer(prefix):
            attn = nn.AttentionParams(
                wq=weight(f"{prefix}.attn.wq", (C, C)),
                wk=weight(f"{prefix}.attn.wk", (C, C)),
                wv=weight(f"{prefix}.attn.wv", (C, C)),
                wo=weight(f"{prefix}.attn.wo", (C, C), out_std),
                norm=ones(C),
            )
            mlp = nn.MlpParams(
                w_gate=weight(f"{prefix}.mlp.w_gate", (C, F)),
                w_up=weight(f"{prefix}.mlp.w_up", (C, F)),
                w_down=weight(f"{prefix}.mlp.w_down", (F, C), out_std),
                norm=ones(C),
            )
            return nn.LayerParams(attn, mlp)

        self.emb = nn.EmbeddingParams(
            tok=weight("embed.tok", (cfg.vocab_size, C)),
            unembed=weight("embed.unembed", (cfg.vocab_size, C)),
            final_norm=ones(C),
        )
        self.begin = [layer(f"begin.{i}") for i in range(cfg.begin_layers)]
        self.middle = [layer(f"middle.{i}") for i in range(cfg.middle_layers)]
        self.end = [layer(f"end.{i}") for i in range(cfg.end_layers)]

        self.sites: list[HCSite] = []
        self.hc: list[hc.HyperConnectionParams] = []
        self.mhc: list[tuple[hc.HyperConnectionParams, hc.HyperConnectionParams]] = []
        n = cfg.streams
        if cfg.arch_kind == "hyperloop":
            self.sites = hc_sites(cfg)
            self.hc = [
                hc.init_params(n, C, cfg.hres_mode, loop_embedding=s.loop_end is not None, dtype=self.dtype)
                for s in self.sites
            ]
        elif cfg.arch_kind == "mhc":
            depth = cfg.begin_layers + cfg.middle_layers + cfg.end_layers
            self.mhc = [
                tuple(hc.init_params(n, C, cfg.hres_mode, loop_embedding=False, dtype=self.dtype) for _ in range(2))
                for _ in range(depth)
            ]

        # lora[l][i] maps projection name -> (A, B); A starts at zero
        self.lora: list[list[dict[str, tuple[Tensor, Tensor]]]] = []
        if cfg.lora_rank:
            r = cfg.lora_rank
            for l in range(cfg.loops):
                per_loop = []
                for i in range(cfg.middle_layers):
                    adapters = {}
                    for proj in PROJECTIONS:
                        fan_in, fan_out = projection_shape(proj, C, F)
                        a = Tensor(np.zeros((fan_in, r), dtype=self.dtype), requires_grad=True)
                        b = weight(f"lora.{l}.{i}.{proj}.b", (r, fan_out))
                        adapters[proj] = (a, b)
                    per_loop.append(adapters)
                self.lora.append(per_loop)

    # -- parameter access ----------------------------------------------------
    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.emb.named("embed."))
        for group, layers in (("begin", self.begin), ("middle", self.middle), ("end", self.end)):
            for i, lp in enumerate(layers):
                out.update(lp.named(f"{group}.{i}."))
        for s, p in enumerate(self.hc):
            out.update(p.named(f"hc.{s}."))
        for d, (pa, pm) in enumerate(self.mhc):
            out.update(pa.named(f"hc.{d}.attn."))
            out.update(pm.named(f"hc.{d}.mlp."))
        for l, per_loop in enumerate(self.lora):
            for i, adapters in enumerate(per_loop):
                for proj, (a, b) in adapters.items():
                    out[f"lora.{l}.{i}.{proj}.a"] = a
                    out[f"lora.{l}.{i}.{proj}.b"] = b
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.named_parameters()
        if strict:
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, arr in state.items():
            if name in params:
                p = params[name]
                if p.shape != tuple(arr.shape):
                    raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
                p.data = np.array(arr, dtype=self.dtype, copy=True)

    def layer_weights(self) -> dict[str, Tensor]:
        """Attention/MLP projection weights keyed ``group.i.proj`` (the quantizable set)."""
        out = {}
        for group, layers in (("begin", self.begin), ("middle", self.middle), ("end", self.end)):
            for i, lp in enumerate(layers):
                for proj in PROJECTIONS:
                    sub, name = proj.split(".")
                    out[f"{group}.{i}.{proj}"] = getattr(getattr(lp, sub), name)
        return out

    # -- forward -------------------------------------------------------------------
    def _check_tokens(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.ndim not in (1, 2) or not np.issubdtype(tokens.dtype, np.integer):
            raise InputError(f"tokens must be a 1-D or 2-D integer array, got {tokens.dtype} {tokens.shape}")
        T = tokens.shape[-1]
        if not 1 <= T <= self.config.max_seq_len:
            raise InputError(f"sequence length {T} outside [1, {self.config.max_seq_len}]")
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise InputError(f"token ids must lie in [0, {self.config.vocab_size})")
        return tokens

    def forward(
        self,
        tokens,
        trace: bool = False,
        identity_hc: bool = False,
        tap: Callable | None = None,
    ):
        """Logits ``(..., T, V)`` for integer ``tokens`` of shape ``(T,)`` or ``(B, T)``.

        ``identity_hc`` replaces every learned H map with the fixed
        uniform-read / unit-write / identity-mix triple and drops loop
        embeddings. ``tap(layer_key, loop, projection, x)`` observes the input
        of every projection application. With ``trace`` the result is
        ``(logits, ActivationTrace)``.
        """
        cfg = self.config
        tokens = self._check_tokens(tokens)
        tr = ActivationTrace() if trace else None
        h_count, base = cfg.head_count, cfg.rope_base

        def ctx(key, loop=0, lora=None):
            if tap is None and lora is None:
                return nn.LayerContext()
            cb = None if tap is None else (lambda proj, x: tap(key, loop, proj, x))
            return nn.LayerContext(lora, cb)

        def run(x, lp, key, loop=0, lora=None):
            return nn.transformer_layer(x, lp, h_count, base, ctx(key, loop, lora))

        x = nn.embed(tokens, self.emb)
        if tr is not None:
            tr.record(x)

        if cfg.arch_kind == "mhc":
            x = self._forward_mhc(x, tr, ctx, identity_hc)
            return self._finish(x, tr)

        for i, lp in enumerate(self.begin):
            x = run(x, lp, f"begin.{i}")
            if tr is not None:
                tr.record(x)

        m = cfg.middle_layers
        if cfg.arch_kind == "hyperloop":
            x = self._forward_hyperloop(x, tr, run, identity_hc)
        else:
            for l in range(cfg.loops):
                for i, lp in enumerate(self.middle):
                    lora = self.lora[l][i] if self.lora else None
                    x = run(x, lp, f"middle.{i}", l, lora)
                    if tr is not None:
                        tr.record(x, boundary=cfg.is_looped and i == m - 1)

        for i, lp in enumerate(self.end):
            x = run(x, lp, f"end.{i}")
            if tr is not None:
                tr.record(x)
        return self._finish(x, tr)

    __call__ = forward

    def _finish(self, x, tr):
        logits = nn.lm_head(x, self.emb)
        return (logits, tr) if tr is not None else logits

    def _forward_hyperloop(self, x, tr, run, identity_hc):
        cfg = self.config
        m = cfg.middle_layers
        y = hc.expand(x, cfg.streams)
        if tr is not None:
            tr.streams.append((cfg.begin_layers, y.data))
        for site, params in zip(self.sites, self.hc):
            mix = hc.identity_mix(y) if identity_hc else hc.compute_mix(y, params)
            e = None if identity_hc else params.e_loop
            x_in = hc.read(y, mix)
            h = x_in
            for u in range(site.start, site.stop):
                l, i = divmod(u, m)
                h = run(h, self.middle[i], f"middle.{i}", l)
                if tr is not None:
                    with tn.no_grad():
                        outer = hc.merge(hc.write(y, mix, h - x_in, e))
                    tr.record(h, outer, boundary=(u + 1) % m == 0)
            y = hc.write(y, mix, h - x_in, e)
            if tr is not None:
                tr.streams.append((cfg.begin_layers + site.stop, y.data))
        return hc.merge(y)

    def _forward_mhc(self, x, tr, ctx, identity_hc):
        cfg = self.config
        layers = self.begin + self.middle + self.end
        keys = (
            [f"begin.{i}" for i in range(len(self.begin))]
            + [f"middle.{i}" for i in range(len(self.middle))]
            + [f"end.{i}" for i in range(len(self.end))]
        )
        y = hc.expand(x, cfg.streams)
        if tr is not None:
            tr.streams.append((0, y.data))
        for d, (lp, key, (pa, pm)) in enumerate(zip(layers, keys, self.mhc)):
            c = ctx(key)
            mix_a = hc.identity_mix(y) if identity_hc else hc.compute_mix(y, pa)
            y = hc.hc_apply(y, mix_a, lambda t: nn.attention(t, lp.attn, cfg.head_count, cfg.rope_base, c))
            mix_m = hc.identity_mix(y) if identity_hc else hc.compute_mix(y, pm)
            y = hc.hc_apply(y, mix_m, lambda t: nn.mlp(t, lp.mlp, c))
            if tr is not None:
                merged = hc.merge(y)
                tr.record(merged)
                tr.streams.append((d + 1, y.data))
        return hc.merge(y)

    def loss(self, tokens, targets) -> Tensor:
        return tn.cross_entropy(self.forward(tokens), targets)


def build(config: ModelConfig, dtype=np.float32) -> Model:
    """Instantiate a model; initialization depends only on ``config.seed``."""
    return Model(config, dtype=dtype)


def twin_config(config: ModelConfig, arch_kind: str) -> ModelConfig:
    """The depth-matched counterpart of ``config`` in another architecture.

    Vanilla and mHC twins unroll the middle block into ``middle * loops``
    unshared layers; looped and Hyperloop twins keep the loop structure.
    """
    base = dict(hc_placement="per_loop", lora_rank=0)
    if arch_kind in ("vanilla", "mhc"):
        depth = dict(
            middle_layers=config.middle_layers * (config.loops if config.is_looped else 1),
            loops=1,
        )
        if arch_kind == "vanilla":
            return config.replace(arch_kind="vanilla", streams=1, **depth, **base)
        n = config.streams if config.uses_streams else 4
        return config.replace(arch_kind="mhc", streams=n, hres_mode="sinkhorn", **depth, **base)
    if not config.is_looped:
        raise ValueError("cannot derive a looped twin from a non-looped config")
    if arch_kind == "looped":
        return config.replace(arch_kind="looped", streams=1, **base)
    n = config.streams if config.uses_streams else 4
    hres = config.hres_mode if config.arch_kind == "hyperloop" else "diagonal"
    return config.replace(arch_kind="hyperloop", streams=n, hres_mode=hres, **base)


# -- parameter accounting -------------------------------------------------------------
def layer_param_count(C: int, F: int) -> int:
    return 4 * C * C + 3 * C * F + 2 * C


def count_params(config: ModelConfig) -> dict[str, int]:
    """Closed-form parameter counts by group, without building tensors.

    ``non_embedding`` excludes only the input token table (the unembedding is
    a projection and is counted). ``hyperconn_no_norm`` is the HC count under
    the convention that the flatten-RMSNorm weight is not counted.
    """
    cfg = config
    C, F, V, n = cfg.model_dim, cfg.ffn_dim, cfg.vocab_size, cfg.streams
    per_layer = layer_param_count(C, F)
    groups = {
        "embeddings": 2 * V * C + C,
        "begin": cfg.begin_layers * per_layer,
        "middle": cfg.middle_layers * per_layer,
        "end": cfg.end_layers * per_layer,
        "hyperconn": 0,
        "lora": 0,
    }
    hc_no_norm = 0
    if cfg.arch_kind == "hyperloop":
        for s in hc_sites(cfg):
            e = s.loop_end is not None
            groups["hyperconn"] += hc.count_params(n, C, cfg.hres_mode, e)
            hc_no_norm += hc.count_params(n, C, cfg.hres_mode, e, norm_weight=False)
    elif cfg.arch_kind == "mhc":
        sites = 2 * (cfg.begin_layers + cfg.middle_layers + cfg.end_layers)
        groups["hyperconn"] = sites * hc.count_params(n, C, cfg.hres_mode, False)
        hc_no_norm = sites * hc.count_params(n, C, cfg.hres_mode, False, norm_weight=False)
    if cfg.lora_rank:
        per_layer_lora = sum(cfg.lora_rank * sum(projection_shape(p, C, F)) for p in PROJECTIONS)
        groups["lora"] = cfg.loops * cfg.middle_layers * per_layer_lora
    total = sum(groups.values())
    return {
        **groups,
        "total": total,
        "non_embedding": total - V * C,
        "hyperconn_no_norm": hc_no_norm,
        "unrolled_depth": cfg.unrolled_depth,
    }


def count_hc_sites(config: ModelConfig) -> int:
    if config.arch_kind == "hyperloop":
        return len(hc_sites(config))
    if config.arch_kind == "mhc":
        return 2 * (config.begin_layers + config.middle_layers + config.end_layers)
    return 0
