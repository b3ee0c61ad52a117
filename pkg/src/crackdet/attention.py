"""Multi-head attention over the spatial tokens of a 4D feature map.

The block projects the map to query/key/value with 1x1 conv + batchnorm,
scores every (query token, key token) pair per head, adds a learned positional
bias, mixes the head axis before and after the softmax ("talking heads"),
re-projects with a second 1x1 conv + batchnorm, and (by default) adds the
input back. The output projection starts at zero, so a fresh block with the
residual on is exactly the identity map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ShapeError
from .numerics import BatchNorm, Tensor


@dataclass
class Attention4DConfig:
    channels: int
    heads: int = 4
    key_dim: int = 8
    value_dim: int | None = None
    spatial: tuple[int, int] = (8, 8)
    residual: bool = True
    scale: float | None = None

    def __post_init__(self):
        if self.value_dim is None:
            self.value_dim = self.key_dim
        if self.scale is None:
            self.scale = 1.0 / math.sqrt(self.key_dim)
        if self.heads * self.key_dim > 8 * self.channels:
            raise ShapeError(
                f"heads*key_dim = {self.heads * self.key_dim} exceeds 8*channels = {8 * self.channels}")


@dataclass
class Attention4DParams:
    cfg: Attention4DConfig
    w_q: Tensor
    bn_q: BatchNorm
    w_k: Tensor
    bn_k: BatchNorm
    w_v: Tensor
    bn_v: BatchNorm
    pos_bias: Tensor
    t_pre: Tensor
    t_post: Tensor
    w_out: Tensor
    bn_out: BatchNorm

    def params(self, prefix="attn"):
        yield f"{prefix}.w_q", self.w_q
        yield from self.bn_q.params(f"{prefix}.bn_q")
        yield f"{prefix}.w_k", self.w_k
        yield from self.bn_k.params(f"{prefix}.bn_k")
        yield f"{prefix}.w_v", self.w_v
        yield from self.bn_v.params(f"{prefix}.bn_v")
        yield f"{prefix}.pos_bias", self.pos_bias
        yield f"{prefix}.t_pre", self.t_pre
        yield f"{prefix}.t_post", self.t_post
        yield f"{prefix}.w_out", self.w_out
        yield from self.bn_out.params(f"{prefix}.bn_out")

    def states(self, prefix="attn"):
        for tag, bn in (("bn_q", self.bn_q), ("bn_k", self.bn_k),
                        ("bn_v", self.bn_v), ("bn_out", self.bn_out)):
            yield from bn.states(f"{prefix}.{tag}")


def init_attention4d(cfg: Attention4DConfig, rng: np.random.Generator,
                     dtype=np.float64, bn=None) -> Attention4DParams:
    """Fresh parameters: fan-in uniform projections, zero positional bias,
    identity head mixing. The output batchnorm scale starts at zero, so with
    the residual on the block is exactly the identity map at initialization
    (and, unlike a zero weight matrix, the zero scale keeps the output
    batchnorm away from its degenerate zero-variance point)."""
    c, h, d, dv = cfg.channels, cfg.heads, cfg.key_dim, cfg.value_dim
    bound = 1.0 / math.sqrt(c)

    def uniform(rows, cols):
        return Tensor(rng.uniform(-bound, bound, size=(rows, cols)).astype(dtype),
                      requires_grad=True)

    hw = cfg.spatial[0] * cfg.spatial[1]
    bn_out = BatchNorm(c, dtype=dtype, bn=bn)
    bn_out.gamma.data[...] = 0.0
    return Attention4DParams(
        cfg=cfg,
        w_q=uniform(h * d, c),
        bn_q=BatchNorm(h * d, dtype=dtype, bn=bn),
        w_k=uniform(h * d, c),
        bn_k=BatchNorm(h * d, dtype=dtype, bn=bn),
        w_v=uniform(h * dv, c),
        bn_v=BatchNorm(h * dv, dtype=dtype, bn=bn),
        pos_bias=Tensor(np.zeros((h, hw, hw), dtype=dtype), requires_grad=True),
        t_pre=Tensor(np.eye(h, dtype=dtype), requires_grad=True),
        t_post=Tensor(np.eye(h, dtype=dtype), requires_grad=True),
        w_out=uniform(c, h * dv),
        bn_out=bn_out,
    )


def attention4d_forward(x: Tensor, p: Attention4DParams, training=True,
                        return_attn=False):
    """Refine a (B, C, H, W) feature map; output keeps the same shape.

    Set ``return_attn`` to also get the post-mixing attention weights
    (B, heads, H*W, H*W) for inspection.
    """
    cfg = p.cfg
    b, c, hh, ww = x.shape
    if (hh, ww) != tuple(cfg.spatial):
        raise ShapeError(f"attention4d: expected spatial size {tuple(cfg.spatial)}, got {(hh, ww)}")
    if c != cfg.channels:
        raise ShapeError(f"attention4d: expected {cfg.channels} channels, got {c}")
    h, d, dv = cfg.heads, cfg.key_dim, cfg.value_dim
    hw = hh * ww

    q = nm.reshape(p.bn_q(nm.conv1x1(x, p.w_q), training), (b, h, d, hw))
    k = nm.reshape(p.bn_k(nm.conv1x1(x, p.w_k), training), (b, h, d, hw))
    v = nm.reshape(p.bn_v(nm.conv1x1(x, p.w_v), training), (b, h, dv, hw))

    logits = nm.matmul_tokens(nm.transpose(q, (0, 1, 3, 2)), k) * cfg.scale
    logits = nm.add_posbias(logits, p.pos_bias)
    attn = nm.softmax_lastdim(nm.head_mix(logits, p.t_pre))
    attn = nm.head_mix(attn, p.t_post)

    tokens = nm.matmul_tokens(v, nm.transpose(attn, (0, 1, 3, 2)))
    y = nm.reshape(tokens, (b, h * dv, hh, ww))
    y = p.bn_out(nm.conv1x1(y, p.w_out), training)
    out = nm.add(x, y) if cfg.residual else y
    if return_attn:
        return out, attn
    return out


def attention4d_param_count(cfg: Attention4DConfig) -> int:
    """Trainable scalar count as a closed form of (C, h, d, d_v, H, W)."""
    c, h, d, dv = cfg.channels, cfg.heads, cfg.key_dim, cfg.value_dim
    hw = cfg.spatial[0] * cfg.spatial[1]
    projections = h * d * c + h * d * c + h * dv * c + c * h * dv
    bn = 2 * (h * d) * 2 + 2 * (h * dv) + 2 * c
    return projections + bn + h * hw * hw + 2 * h * h
