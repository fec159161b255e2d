"""2D-to-3D pose sequence lifter built around a learned per-joint proxy bank.

The model threads a trainable latent bank P of shape (joints, proxy_len,
hidden) through a stack of N identical layers.  Within each layer, per
joint:

  1. an optional spatio-temporal self-attention encoder refines the
     frame features,
  2. the proxy bank cross-attends to the per-joint temporal features and
     absorbs them (update step),
  3. the temporal features cross-attend back into the updated proxy
     (readout step),
  4. the two cross-attention probability matrices are multiplied into a
     frames-by-frames coupling matrix, which is blended with a raw
     self-attention logit matrix through a learned per-layer sigmoid gate
     and drives one more attention pass over the features.

A small regression head (linear, tanh, linear) maps the final features to
3D joint offsets.  Everything runs on the float64 tape engine so the full
model is finite-difference checkable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .rng import DISTRIBUTIONS, Rng, sample
from .tensor import (Parameter, ShapeError, Tensor, add, broadcast_to, linear,
                     layer_norm, matmul, mean_axis, mul, reshape, scale,
                     sigmoid, softmax_last, sub, tanh, transpose)

WEIGHT_SIGMA = 0.02
PROXY_SCALE = 0.02
FFN_MULT = 4

KIND_CROSS = "cross_attention"
KIND_MLP = "mlp"
MODULE_KINDS = (KIND_CROSS, KIND_MLP)


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    `proxy_len` defaults to floor(frames / 3); `hidden` must divide evenly
    into `heads`.  The stated defaults (16 layers, 8 heads, width 128) are
    the full-scale reference configuration; tests use much smaller values.
    """

    frames: int
    joints: int
    in_channels: int = 2
    out_channels: int = 3
    hidden: int = 128
    layers: int = 16
    heads: int = 8
    proxy_len: int | None = None
    proxy_init: str = "gaussian"
    mu_init_range: tuple[float, float] = (0.0, 1.0)
    mu_trainable: bool = True
    pum_kind: str = KIND_CROSS
    pim_kind: str = KIND_CROSS
    encoder_enabled: bool = True

    def __post_init__(self):
        if self.frames < 1 or self.joints < 1:
            raise ValueError(f"frames and joints must be positive, got {self.frames}, {self.joints}")
        if self.in_channels not in (2, 3):
            raise ValueError(f"in_channels must be 2 (x, y) or 3 (x, y, confidence), got {self.in_channels}")
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        if self.proxy_len is None:
            self.proxy_len = max(1, self.frames // 3)
        if self.proxy_len < 1:
            raise ValueError(f"proxy_len must be >= 1, got {self.proxy_len}")
        if self.proxy_init not in DISTRIBUTIONS:
            raise ValueError(f"unknown proxy_init {self.proxy_init!r}; expected one of {DISTRIBUTIONS}")
        if self.pum_kind not in MODULE_KINDS or self.pim_kind not in MODULE_KINDS:
            raise ValueError(f"pum_kind/pim_kind must be one of {MODULE_KINDS}")
        self.mu_init_range = (float(self.mu_init_range[0]), float(self.mu_init_range[1]))
        if self.mu_init_range[0] > self.mu_init_range[1]:
            raise ValueError(f"mu_init_range must be (lo, hi) with lo <= hi, got {self.mu_init_range}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        return {
            "frames": self.frames,
            "joints": self.joints,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "hidden": self.hidden,
            "layers": self.layers,
            "heads": self.heads,
            "proxy_len": self.proxy_len,
            "proxy_init": self.proxy_init,
            "mu_init_range": list(self.mu_init_range),
            "mu_trainable": self.mu_trainable,
            "pum_kind": self.pum_kind,
            "pim_kind": self.pim_kind,
            "encoder_enabled": self.encoder_enabled,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        doc = dict(doc)
        if "mu_init_range" in doc:
            doc["mu_init_range"] = tuple(doc["mu_init_range"])
        return cls(**doc)


class ParamSet:
    """Ordered registry of uniquely named parameters."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, value, trainable: bool = True) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(name, value, trainable=trainable)
        self._params[name] = p
        return p

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)


@dataclass
class LayerTrace:
    """Per-layer attention capture (numpy copies, detached from the tape).

    m_p_to_f: (J, H, L, T) proxy-queries-features probabilities
    m_f_to_p: (J, H, T, L) features-query-proxy probabilities
    m_agg:    (J, H, T, T) their product, row-stochastic
    m_self_logits / m_fused_logits: (J, H, T, T) raw and gated logits
    """

    m_p_to_f: np.ndarray | None
    m_f_to_p: np.ndarray | None
    m_agg: np.ndarray | None
    m_self_logits: np.ndarray
    m_fused_logits: np.ndarray
    sigmoid_mu: float


@dataclass
class ForwardOutput:
    y_hat: Tensor
    traces: list[LayerTrace] = field(default_factory=list)


class Norm:
    def __init__(self, reg: ParamSet, prefix: str, width: int):
        self.gain = reg.add(f"{prefix}.gain", np.ones(width))
        self.bias = reg.add(f"{prefix}.bias", np.zeros(width))

    def __call__(self, x):
        return layer_norm(x, self.gain, self.bias)


class FeedForward:
    """Position-wise linear -> tanh -> linear over the trailing axis."""

    def __init__(self, reg: ParamSet, prefix: str, width: int, rng: Rng,
                 out_width: int | None = None, mult: int = FFN_MULT):
        hidden = mult * width
        out_width = width if out_width is None else out_width
        self.w1 = reg.add(f"{prefix}.w1", rng.normal((width, hidden), WEIGHT_SIGMA))
        self.b1 = reg.add(f"{prefix}.b1", np.zeros(hidden))
        self.w2 = reg.add(f"{prefix}.w2", rng.normal((hidden, out_width), WEIGHT_SIGMA))
        self.b2 = reg.add(f"{prefix}.b2", np.zeros(out_width))

    def __call__(self, x):
        return linear(tanh(linear(x, self.w1, self.b1)), self.w2, self.b2)


class MultiHeadAttention:
    """Scaled dot-product attention over (batch, seq, width) streams.

    Query and key/value streams may differ (cross attention).  Logits are
    scaled by 1/sqrt(head width); the returned probability tensor has
    shape (batch, heads, len_q, len_kv).
    """

    def __init__(self, reg: ParamSet, prefix: str, width: int, heads: int, rng: Rng):
        self.heads = heads
        self.head_dim = width // heads
        self.logit_scale = 1.0 / math.sqrt(self.head_dim)
        self.w_q = reg.add(f"{prefix}.w_q", rng.normal((width, width), WEIGHT_SIGMA))
        self.w_k = reg.add(f"{prefix}.w_k", rng.normal((width, width), WEIGHT_SIGMA))
        self.w_v = reg.add(f"{prefix}.w_v", rng.normal((width, width), WEIGHT_SIGMA))
        self.w_o = reg.add(f"{prefix}.w_o", rng.normal((width, width), WEIGHT_SIGMA))

    def split_heads(self, x, w) -> Tensor:
        b, s, _ = x.shape
        h = matmul(x, w)
        return transpose(reshape(h, (b, s, self.heads, self.head_dim)), (0, 2, 1, 3))

    def merge_heads(self, x) -> Tensor:
        b, h, s, d = x.shape
        return reshape(transpose(x, (0, 2, 1, 3)), (b, s, h * d))

    def __call__(self, q_src, kv_src) -> tuple[Tensor, Tensor]:
        q = self.split_heads(q_src, self.w_q)
        k = self.split_heads(kv_src, self.w_k)
        v = self.split_heads(kv_src, self.w_v)
        logits = scale(matmul(q, transpose(k, (0, 1, 3, 2))), self.logit_scale)
        probs = softmax_last(logits)
        out = matmul(self.merge_heads(matmul(probs, v)), self.w_o)
        return out, probs


class EncoderBlock:
    """Per-frame spatial attention over joints, then per-joint temporal
    attention over frames; pre-norm residual sublayers with feed-forwards."""

    def __init__(self, reg: ParamSet, prefix: str, cfg: ModelConfig, rng: Rng):
        w, h = cfg.hidden, cfg.heads
        self.spatial_norm = Norm(reg, f"{prefix}.spatial_norm", w)
        self.spatial_attn = MultiHeadAttention(reg, f"{prefix}.spatial", w, h, rng)
        self.spatial_ffn_norm = Norm(reg, f"{prefix}.spatial_ffn_norm", w)
        self.spatial_ffn = FeedForward(reg, f"{prefix}.spatial_ffn", w, rng)
        self.temporal_norm = Norm(reg, f"{prefix}.temporal_norm", w)
        self.temporal_attn = MultiHeadAttention(reg, f"{prefix}.temporal", w, h, rng)
        self.temporal_ffn_norm = Norm(reg, f"{prefix}.temporal_ffn_norm", w)
        self.temporal_ffn = FeedForward(reg, f"{prefix}.temporal_ffn", w, rng)

    def __call__(self, x) -> Tensor:
        # x: (T, J, C); spatial attention treats frames as the batch axis
        h = self.spatial_norm(x)
        x = add(x, self.spatial_attn(h, h)[0])
        x = add(x, self.spatial_ffn(self.spatial_ffn_norm(x)))
        xt = transpose(x, (1, 0, 2))
        h = self.temporal_norm(xt)
        xt = add(xt, self.temporal_attn(h, h)[0])
        xt = add(xt, self.temporal_ffn(self.temporal_ffn_norm(xt)))
        return transpose(xt, (1, 0, 2))


class ProxyUpdate:
    """Absorb per-joint temporal features into the proxy bank.

    Cross-attention kind: the proxy queries the features.  MLP kind: the
    features are mean-pooled over time and pushed through a two-layer map,
    then broadcast-added to every proxy slot.  Either way the update is
    residual and is followed by a residual feed-forward.
    """

    def __init__(self, reg: ParamSet, prefix: str, cfg: ModelConfig, rng: Rng):
        w = cfg.hidden
        self.kind = cfg.pum_kind
        self.proxy_len = cfg.proxy_len
        self.norm_kv = Norm(reg, f"{prefix}.norm_kv", w)
        if self.kind == KIND_CROSS:
            self.norm_q = Norm(reg, f"{prefix}.norm_q", w)
            self.attn = MultiHeadAttention(reg, f"{prefix}.attn", w, cfg.heads, rng)
        else:
            self.mlp = FeedForward(reg, f"{prefix}.mlp", w, rng)
        self.ffn_norm = Norm(reg, f"{prefix}.ffn_norm", w)
        self.ffn = FeedForward(reg, f"{prefix}.ffn", w, rng)

    def __call__(self, p, f) -> tuple[Tensor, Tensor | None]:
        if self.kind == KIND_CROSS:
            upd, probs = self.attn(self.norm_q(p), self.norm_kv(f))
            p = add(p, upd)
        else:
            pooled = mean_axis(self.norm_kv(f), 1, keepdims=True)  # (J, 1, C)
            j, _, c = pooled.shape
            p = add(p, broadcast_to(self.mlp(pooled), (j, self.proxy_len, c)))
            probs = None
        p = add(p, self.ffn(self.ffn_norm(p)))
        return p, probs


class ProxyReadout:
    """Write the updated proxy back into the per-joint temporal features.

    Mirror image of ProxyUpdate: features query the proxy (cross kind) or
    receive a pooled-proxy MLP update (mlp kind)."""

    def __init__(self, reg: ParamSet, prefix: str, cfg: ModelConfig, rng: Rng):
        w = cfg.hidden
        self.kind = cfg.pim_kind
        self.frames = cfg.frames
        self.norm_kv = Norm(reg, f"{prefix}.norm_kv", w)
        if self.kind == KIND_CROSS:
            self.norm_q = Norm(reg, f"{prefix}.norm_q", w)
            self.attn = MultiHeadAttention(reg, f"{prefix}.attn", w, cfg.heads, rng)
        else:
            self.mlp = FeedForward(reg, f"{prefix}.mlp", w, rng)
        self.ffn_norm = Norm(reg, f"{prefix}.ffn_norm", w)
        self.ffn = FeedForward(reg, f"{prefix}.ffn", w, rng)

    def __call__(self, f, p) -> tuple[Tensor, Tensor | None]:
        if self.kind == KIND_CROSS:
            upd, probs = self.attn(self.norm_q(f), self.norm_kv(p))
            f = add(f, upd)
        else:
            pooled = mean_axis(self.norm_kv(p), 1, keepdims=True)  # (J, 1, C)
            j, _, c = pooled.shape
            f = add(f, broadcast_to(self.mlp(pooled), (j, self.frames, c)))
            probs = None
        f = add(f, self.ffn(self.ffn_norm(f)))
        return f, probs


def aggregate_attention(m_f_to_p, m_p_to_f) -> Tensor:
    """Frames-by-frames coupling matrix: the product of the two
    row-stochastic cross-attention matrices (per joint and head)."""
    return matmul(m_f_to_p, m_p_to_f)


class FusedTemporalAttention:
    """Self-attention whose logits blend the coupling matrix with raw QK'.

    The blend weight is sigmoid(mu) with one learnable mu per layer; the
    blended logits are divided by sqrt(full hidden width) before softmax.
    When no coupling matrix exists (MLP ablation of the update or readout
    step) the layer degrades to plain self-attention and mu is unused.
    """

    def __init__(self, reg: ParamSet, prefix: str, cfg: ModelConfig, rng: Rng):
        w = cfg.hidden
        self.heads = cfg.heads
        self.head_dim = cfg.head_dim
        self.softmax_scale = 1.0 / math.sqrt(w)
        self.norm = Norm(reg, f"{prefix}.norm", w)
        self.w_q = reg.add(f"{prefix}.w_q", rng.normal((w, w), WEIGHT_SIGMA))
        self.w_k = reg.add(f"{prefix}.w_k", rng.normal((w, w), WEIGHT_SIGMA))
        self.w_v = reg.add(f"{prefix}.w_v", rng.normal((w, w), WEIGHT_SIGMA))
        self.w_o = reg.add(f"{prefix}.w_o", rng.normal((w, w), WEIGHT_SIGMA))
        lo, hi = cfg.mu_init_range
        mu0 = lo if lo == hi else float(rng.uniform(lo, hi))
        self.mu = reg.add(f"{prefix}.mu", np.asarray(mu0), trainable=cfg.mu_trainable)
        self.ffn_norm = Norm(reg, f"{prefix}.ffn_norm", w)
        self.ffn = FeedForward(reg, f"{prefix}.ffn", w, rng)

    def _split(self, x, w):
        b, s, _ = x.shape
        return transpose(reshape(matmul(x, w), (b, s, self.heads, self.head_dim)), (0, 2, 1, 3))

    def __call__(self, f, m_agg) -> tuple[Tensor, Tensor, Tensor]:
        h = self.norm(f)
        q = self._split(h, self.w_q)
        k = self._split(h, self.w_k)
        v = self._split(h, self.w_v)
        self_logits = matmul(q, transpose(k, (0, 1, 3, 2)))  # raw, unscaled
        if m_agg is None:
            fused = self_logits
        else:
            gate = sigmoid(self.mu)
            fused = add(mul(gate, m_agg), mul(sub(Tensor(1.0), gate), self_logits))
        probs = softmax_last(scale(fused, self.softmax_scale))
        ctx = matmul(probs, v)
        b, nh, s, d = ctx.shape
        out = matmul(reshape(transpose(ctx, (0, 2, 1, 3)), (b, s, nh * d)), self.w_o)
        f = add(f, out)
        f = add(f, self.ffn(self.ffn_norm(f)))
        return f, self_logits, fused


class LayerBlock:
    def __init__(self, reg: ParamSet, prefix: str, cfg: ModelConfig, rng: Rng):
        self.encoder = EncoderBlock(reg, f"{prefix}.enc", cfg, rng) if cfg.encoder_enabled else None
        self.update = ProxyUpdate(reg, f"{prefix}.pum", cfg, rng)
        self.readout = ProxyReadout(reg, f"{prefix}.pim", cfg, rng)
        self.fused = FusedTemporalAttention(reg, f"{prefix}.pam", cfg, rng)


def init_proxy(config: ModelConfig, rng: Rng) -> Tensor:
    """Draw the initial proxy bank (joints, proxy_len, hidden)."""
    shape = (config.joints, config.proxy_len, config.hidden)
    if config.proxy_init == "gaussian":
        return sample(rng, "gaussian", shape, sigma=PROXY_SCALE)
    if config.proxy_init == "laplacian":
        return sample(rng, "laplacian", shape, scale=PROXY_SCALE)
    return sample(rng, "uniform", shape, lo=-PROXY_SCALE, hi=PROXY_SCALE)


class ProxyLifter:
    """The full lifter: embed -> N proxy layers -> regression head."""

    def __init__(self, config: ModelConfig, rng: Rng):
        self.config = config
        reg = ParamSet()
        c = config.hidden
        self.w_in = reg.add("embed.w_in", rng.normal((config.in_channels, c), WEIGHT_SIGMA))
        self.b_in = reg.add("embed.b_in", np.zeros(c))
        self.t_pos = reg.add("embed.t_pos", rng.normal((config.frames, c), WEIGHT_SIGMA))
        self.s_pos = reg.add("embed.s_pos", rng.normal((config.joints, c), WEIGHT_SIGMA))
        self.proxy_base = reg.add("proxy.base", init_proxy(config, rng).data)
        self.blocks = [LayerBlock(reg, f"layers.{i}", config, rng) for i in range(config.layers)]
        self.head = FeedForward(reg, "head", c, rng, out_width=config.out_channels)
        self.params = reg

    # -- pieces ------------------------------------------------------------

    def embed(self, x) -> Tensor:
        """Project (T, J, C_in) to hidden width and add learned temporal
        and spatial position embeddings."""
        t, j, c = self.config.frames, self.config.joints, self.config.hidden
        h = linear(x, self.w_in, self.b_in)
        h = add(h, broadcast_to(reshape(self.t_pos, (t, 1, c)), (t, j, c)))
        h = add(h, broadcast_to(reshape(self.s_pos, (1, j, c)), (t, j, c)))
        return h

    def regress(self, b) -> Tensor:
        return self.head(b)

    # -- full forward --------------------------------------------------------

    def forward(self, x, trace: bool = False) -> ForwardOutput:
        if isinstance(x, np.ndarray):
            x = Tensor(x)
        expected = (self.config.frames, self.config.joints, self.config.in_channels)
        if x.shape != expected:
            raise ShapeError(f"model_forward: input shape {x.shape} does not match config {expected}")

        b = self.embed(x)
        p = self.proxy_base
        traces: list[LayerTrace] = []
        for block in self.blocks:
            if block.encoder is not None:
                b = block.encoder(b)
            f = transpose(b, (1, 0, 2))  # (J, T, C)
            p, m_p_to_f = block.update(p, f)
            f, m_f_to_p = block.readout(f, p)
            m_agg = None
            if m_p_to_f is not None and m_f_to_p is not None:
                m_agg = aggregate_attention(m_f_to_p, m_p_to_f)
            f, self_logits, fused_logits = block.fused(f, m_agg)
            if trace:
                traces.append(LayerTrace(
                    m_p_to_f=None if m_p_to_f is None else m_p_to_f.data.copy(),
                    m_f_to_p=None if m_f_to_p is None else m_f_to_p.data.copy(),
                    m_agg=None if m_agg is None else m_agg.data.copy(),
                    m_self_logits=self_logits.data.copy(),
                    m_fused_logits=fused_logits.data.copy(),
                    sigmoid_mu=float(1.0 / (1.0 + np.exp(-block.fused.mu.value))),
                ))
            b = transpose(f, (1, 0, 2))
        y = self.regress(b)
        return ForwardOutput(y_hat=y, traces=traces)

    # -- bookkeeping ---------------------------------------------------------

    def parameters(self) -> list[Parameter]:
        return list(self.params)

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.params}

    def param_count(self) -> int:
        return sum(p.size for p in self.params)

    def param_breakdown(self) -> dict[str, int]:
        """Element counts grouped by top-level component."""
        groups: dict[str, int] = {}
        for p in self.params:
            key = p.name.split(".", 1)[0]
            groups[key] = groups.get(key, 0) + p.size
        return groups


def param_count(config: ModelConfig) -> int:
    """Total parameter elements for a configuration."""
    return ProxyLifter(config, Rng(0)).param_count()


_RESIDUAL_LEAVES = ("w_v", "w_o", "w2", "b2")


def zero_residual_paths(model: ProxyLifter) -> None:
    """Zero every layer's value/output projections and feed-forward second
    layers, making each layer an exact identity map (embedding and head
    untouched)."""
    for p in model.parameters():
        if p.name.startswith("layers.") and p.name.rsplit(".", 1)[-1] in _RESIDUAL_LEAVES:
            p.value[...] = 0.0
