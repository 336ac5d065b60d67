"""Conformer encoder with relative-position attention and its cross-modal variant.

Block layout (macaron)::

    x = x + 1/2 FFN1(x)
    x = x + Attention(LN(x))          # relative, or cross-modal when a second stream is given
    x = x + ConvModule(x)
    x = x + 1/2 FFN2(x)
    y = LN(x)

Attention logits follow the Transformer-XL split into a content term
(q + u) . k_j and a position term (q + v) . r_(j - i), where r is a learned
table indexed by the clamped offset j - i. No absolute positions are used
anywhere, so the encoder is invariant to where a sequence starts.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import engine as ops
from .engine import DiffArray
from .errors import AlignmentError, ConfigError, DimensionError
from .params import derive_rng, ones, uniform_init, zeros


@dataclass(frozen=True)
class AttentionConfig:
    model_dim: int = 64
    num_heads: int = 4
    max_relative_distance: int = 64

    def __post_init__(self):
        if self.model_dim <= 0 or self.num_heads <= 0 or self.model_dim % self.num_heads:
            raise ConfigError(f"model_dim {self.model_dim} must be a positive multiple of num_heads {self.num_heads}")
        if self.max_relative_distance <= 0:
            raise ConfigError("max_relative_distance must be positive")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


@dataclass(frozen=True)
class ConformerConfig:
    model_dim: int = 64
    num_heads: int = 4
    num_layers: int = 3
    ff_expansion: int = 4
    kernel_size: int = 7
    max_relative_distance: int = 64
    dropout: float = 0.1
    conv_norm: str = "layer"
    eps: float = 1e-5

    def __post_init__(self):
        if self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.conv_norm not in ("layer", "batch"):
            raise ConfigError(f"conv_norm must be 'layer' or 'batch', got {self.conv_norm!r}")
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        self.attention  # validates head split

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.model_dim, self.num_heads, self.max_relative_distance)

    @classmethod
    def full_scale(cls, max_relative_distance: int = 512) -> "ConformerConfig":
        """Full-size model: 3 layers of width 512, 8 heads, expansion 4, kernel 31, batch norm."""
        return cls(model_dim=512, num_heads=8, num_layers=3, ff_expansion=4, kernel_size=31,
                   max_relative_distance=max_relative_distance, dropout=0.1, conv_norm="batch")


@dataclass
class RelativeAttentionParams:
    w_q: DiffArray
    w_k: DiffArray
    w_v: DiffArray
    w_out: DiffArray
    b_out: DiffArray
    relative_embedding: DiffArray  # (2M + 1) x d, row M is offset 0
    content_bias: DiffArray        # h x d_z  (u)
    position_bias: DiffArray       # h x d_z  (v)


@dataclass
class FeedForwardParams:
    norm_gain: DiffArray
    norm_bias: DiffArray
    w_in: DiffArray
    b_in: DiffArray
    w_out: DiffArray
    b_out: DiffArray


@dataclass
class ConvModuleParams:
    norm_gain: DiffArray
    norm_bias: DiffArray
    pw1_w: DiffArray
    pw1_b: DiffArray
    dw_kernel: DiffArray
    dw_bias: DiffArray
    mid_gain: DiffArray
    mid_bias: DiffArray
    pw2_w: DiffArray
    pw2_b: DiffArray


@dataclass
class ConformerBlockParams:
    ff1: FeedForwardParams
    attn_norm_gain: DiffArray
    attn_norm_bias: DiffArray
    attn: RelativeAttentionParams
    conv: ConvModuleParams
    ff2: FeedForwardParams
    final_gain: DiffArray
    final_bias: DiffArray


# --- initialisation -----------------------------------------------------------

def _w(rng, fan_in, shape, identity):
    return zeros(*shape) if identity else uniform_init(rng, shape, fan_in)


def init_attention(rng: np.random.Generator, cfg: AttentionConfig, identity: bool = False) -> RelativeAttentionParams:
    d, h, dz, m = cfg.model_dim, cfg.num_heads, cfg.head_dim, cfg.max_relative_distance
    return RelativeAttentionParams(
        w_q=_w(rng, d, (d, d), identity), w_k=_w(rng, d, (d, d), identity), w_v=_w(rng, d, (d, d), identity),
        w_out=_w(rng, d, (d, d), identity), b_out=zeros(d),
        relative_embedding=_w(rng, d, (2 * m + 1, d), identity),
        content_bias=zeros(h, dz), position_bias=zeros(h, dz))


def init_feed_forward(rng, cfg: ConformerConfig, identity: bool = False) -> FeedForwardParams:
    d, e = cfg.model_dim, cfg.model_dim * cfg.ff_expansion
    return FeedForwardParams(ones(d), zeros(d), _w(rng, d, (d, e), identity), zeros(e),
                             _w(rng, e, (e, d), identity), zeros(d))


def init_conv_module(rng, cfg: ConformerConfig, identity: bool = False) -> ConvModuleParams:
    d, k = cfg.model_dim, cfg.kernel_size
    return ConvModuleParams(ones(d), zeros(d), _w(rng, d, (d, 2 * d), identity), zeros(2 * d),
                            _w(rng, k, (k, d), identity), zeros(d), ones(d), zeros(d),
                            _w(rng, d, (d, d), identity), zeros(d))


def init_block(rng, cfg: ConformerConfig, identity: bool = False) -> ConformerBlockParams:
    d = cfg.model_dim
    return ConformerBlockParams(
        ff1=init_feed_forward(rng, cfg, identity), attn_norm_gain=ones(d), attn_norm_bias=zeros(d),
        attn=init_attention(rng, cfg.attention, identity), conv=init_conv_module(rng, cfg, identity),
        ff2=init_feed_forward(rng, cfg, identity), final_gain=ones(d), final_bias=zeros(d))


def init_stack(seed: int, cfg: ConformerConfig, name: str = "encoder",
               identity: bool = False) -> list[ConformerBlockParams]:
    return [init_block(derive_rng(seed, name, str(i)), cfg, identity) for i in range(cfg.num_layers)]


# --- attention ----------------------------------------------------------------

def relative_offsets(positions: np.ndarray, max_distance: int) -> np.ndarray:
    """Row indices into the relative table: clip(pos_j - pos_i, -M, M) + M."""
    pos = np.asarray(positions)
    return np.clip(pos[None, :] - pos[:, None], -max_distance, max_distance) + max_distance


def _heads(x: DiffArray, w: DiffArray, h: int, dz: int) -> DiffArray:
    # T x d -> h x T x d_z
    return ops.transpose(ops.reshape(ops.matmul(x, w), (x.shape[0], h, dz)), (1, 0, 2))


def attention_weights(x_query: DiffArray, x_kv: DiffArray, p: RelativeAttentionParams,
                      cfg: AttentionConfig, positions=None) -> tuple[DiffArray, DiffArray]:
    """Per-head attention probabilities (h x T x T) and values (h x T x d_z)."""
    T = x_kv.shape[0]
    if T == 0:
        raise DimensionError("attention over an empty sequence")
    if x_query.shape != x_kv.shape or x_kv.shape[1] != cfg.model_dim:
        raise DimensionError(f"attention inputs {x_query.shape}, {x_kv.shape} vs model_dim {cfg.model_dim}")
    h, dz, m = cfg.num_heads, cfg.head_dim, cfg.max_relative_distance
    if p.relative_embedding.shape != (2 * m + 1, cfg.model_dim):
        raise DimensionError(f"relative table {p.relative_embedding.shape} vs max distance {m}")
    positions = np.arange(T) if positions is None else np.asarray(positions)
    q = _heads(x_query, p.w_q, h, dz)
    k = _heads(x_kv, p.w_k, h, dz)
    v = _heads(x_kv, p.w_v, h, dz)
    u = ops.reshape(p.content_bias, (h, 1, dz))
    pb = ops.reshape(p.position_bias, (h, 1, dz))
    content = ops.matmul(q + u, ops.transpose(k, (0, 2, 1)))
    table = ops.transpose(ops.reshape(p.relative_embedding, (2 * m + 1, h, dz)), (1, 2, 0))  # h x dz x (2M+1)
    by_offset = ops.matmul(q + pb, table)  # h x T x (2M+1)
    rows = np.broadcast_to(np.arange(T)[:, None], (T, T))
    position = ops.index(by_offset, (slice(None), rows, relative_offsets(positions, m)))
    probs = ops.softmax_lastdim(content + position, scale=math.sqrt(dz))
    return probs, v


def _attend(x_query, x_kv, p, cfg, positions) -> DiffArray:
    probs, v = attention_weights(x_query, x_kv, p, cfg, positions)
    T = x_kv.shape[0]
    heads = ops.reshape(ops.transpose(ops.matmul(probs, v), (1, 0, 2)), (T, cfg.model_dim))
    return ops.linear(heads, p.w_out, p.b_out)


def relative_attention(x: DiffArray, params: RelativeAttentionParams, cfg: AttentionConfig,
                       positions=None) -> DiffArray:
    """Multi-head self-attention with relative position terms, output-projected."""
    return _attend(x, x, params, cfg, positions)


def cross_modal_relative_attention(x_a: DiffArray, x_b: DiffArray, params_a: RelativeAttentionParams,
                                   cfg: AttentionConfig, positions=None) -> DiffArray:
    """attention(Q_a, K_a, V_a) + attention(Q_b, K_a, V_a).

    Both queries use stream a's query projection; keys, values and the output
    projection also belong to stream a. Each term is a complete attention
    evaluation including the output projection.
    """
    if x_a.shape != x_b.shape:
        raise AlignmentError(f"cross-modal streams differ in shape: {x_a.shape} vs {x_b.shape}")
    return _attend(x_a, x_a, params_a, cfg, positions) + _attend(x_b, x_a, params_a, cfg, positions)


# --- feed-forward and convolution modules ------------------------------------------

def feed_forward_module(x: DiffArray, p: FeedForwardParams, cfg: ConformerConfig,
                        rng: np.random.Generator | None = None, training: bool = False) -> DiffArray:
    """LN -> d to 4d -> swish -> dropout -> 4d to d -> dropout. Residual is the caller's."""
    y = ops.layer_norm(x, p.norm_gain, p.norm_bias, cfg.eps)
    y = ops.swish(ops.linear(y, p.w_in, p.b_in))
    y = ops.dropout(y, cfg.dropout, rng, training)
    y = ops.linear(y, p.w_out, p.b_out)
    return ops.dropout(y, cfg.dropout, rng, training)


def convolution_module(x: DiffArray, p: ConvModuleParams, cfg: ConformerConfig,
                       rng: np.random.Generator | None = None, training: bool = False) -> DiffArray:
    """LN -> pointwise to 2d -> GLU -> depthwise -> norm -> swish -> pointwise -> dropout."""
    y = ops.layer_norm(x, p.norm_gain, p.norm_bias, cfg.eps)
    y = ops.glu(ops.linear(y, p.pw1_w, p.pw1_b))
    y = ops.depthwise_conv1d(y, p.dw_kernel, p.dw_bias)
    if cfg.conv_norm == "batch":
        y = ops.time_norm(y, p.mid_gain, p.mid_bias, cfg.eps)
    else:
        y = ops.layer_norm(y, p.mid_gain, p.mid_bias, cfg.eps)
    y = ops.linear(ops.swish(y), p.pw2_w, p.pw2_b)
    return ops.dropout(y, cfg.dropout, rng, training)


def conformer_block(x: DiffArray, params: ConformerBlockParams, cfg: ConformerConfig,
                    cross_stream: DiffArray | None = None, positions=None,
                    rng: np.random.Generator | None = None, training: bool = False) -> DiffArray:
    if x.ndim != 2 or x.shape[1] != cfg.model_dim:
        raise DimensionError(f"block input {x.shape} vs model_dim {cfg.model_dim}")
    if cross_stream is not None and cross_stream.shape != x.shape:
        raise DimensionError(f"cross stream {cross_stream.shape} vs input {x.shape}")
    x = x + 0.5 * feed_forward_module(x, params.ff1, cfg, rng, training)
    xn = ops.layer_norm(x, params.attn_norm_gain, params.attn_norm_bias, cfg.eps)
    if cross_stream is None:
        a = relative_attention(xn, params.attn, cfg.attention, positions)
    else:
        # the foreign query goes through the same pre-attention path as x
        c = cross_stream + 0.5 * feed_forward_module(cross_stream, params.ff1, cfg, rng, training)
        cn = ops.layer_norm(c, params.attn_norm_gain, params.attn_norm_bias, cfg.eps)
        a = cross_modal_relative_attention(xn, cn, params.attn, cfg.attention, positions)
    x = x + ops.dropout(a, cfg.dropout, rng, training)
    x = x + convolution_module(x, params.conv, cfg, rng, training)
    x = x + 0.5 * feed_forward_module(x, params.ff2, cfg, rng, training)
    return ops.layer_norm(x, params.final_gain, params.final_bias, cfg.eps)


def encode(x: DiffArray, stack: list[ConformerBlockParams], cfg: ConformerConfig,
           cross_stream: DiffArray | None = None, positions=None,
           rng: np.random.Generator | None = None, training: bool = False) -> DiffArray:
    """Run the block stack; the cross stream (if any) is the other pipeline's input embedding."""
    if not stack:
        raise ConfigError("encoder stack is empty")
    for block in stack:
        x = conformer_block(x, block, cfg, cross_stream, positions, rng, training)
    return x
