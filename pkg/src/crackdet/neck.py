"""Multi-scale feature fusion with attention blocks at configurable points.

The neck runs a top-down pass (coarse levels upsampled and merged into finer
ones through CSP layers) followed by a bottom-up pass (fine levels downsampled
and merged back). Attention blocks can be installed at four slots — on the
coarsest input, after the first top-down CSP layer, and after each bottom-up
CSP layer — or as a single block on the final coarse output. Placement changes
parameter layout only, never output shapes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .attention import Attention4DConfig, Attention4DParams, attention4d_forward, init_attention4d
from .errors import ConfigError, ShapeError
from .numerics import BatchNorm, Tensor

PLACEMENT_SLOTS = {
    "top_down_only": ("td_c5", "td_c4"),
    "bottom_up_only": ("bu_c4", "bu_c5"),
    "single_at_end": ("end",),
    "both": ("td_c5", "td_c4", "bu_c4", "bu_c5"),
}


@dataclass
class PyramidFeatures:
    """Feature maps at strides 8, 16, 32 (p3 the largest)."""

    p3: Tensor
    p4: Tensor
    p5: Tensor

    def levels(self):
        return (self.p3, self.p4, self.p5)


@dataclass
class NeckConfig:
    in_channels: tuple[int, int, int]
    out_channels: int
    spatial: tuple[tuple[int, int], tuple[int, int], tuple[int, int]]
    placement: str = "top_down_only"
    num_attention_blocks: int | None = None
    csp_depth: int = 1
    attn_heads: int = 2
    attn_key_dim: int = 8
    attn_value_dim: int | None = None
    attn_scale: float | None = None
    attn_residual: bool = True
    downsample: str = "conv"

    def __post_init__(self):
        if self.placement not in PLACEMENT_SLOTS:
            raise ConfigError(f"unknown placement '{self.placement}' "
                              f"(expected one of {sorted(PLACEMENT_SLOTS)})")
        if self.downsample not in ("conv", "pool"):
            raise ConfigError(f"unknown downsample '{self.downsample}' (expected conv|pool)")
        slots = PLACEMENT_SLOTS[self.placement]
        if self.num_attention_blocks is None:
            self.num_attention_blocks = len(slots)
        if not 1 <= self.num_attention_blocks <= 4:
            raise ConfigError("num_attention_blocks must be in 1..4")
        if self.num_attention_blocks > len(slots):
            raise ConfigError(f"placement '{self.placement}' offers {len(slots)} slots, "
                              f"got num_attention_blocks={self.num_attention_blocks}")
        if self.out_channels % 2:
            raise ConfigError("out_channels must be even (CSP splits channels in half)")
        for (ha, wa), (hb, wb) in zip(self.spatial, self.spatial[1:]):
            if ha != 2 * hb or wa != 2 * wb:
                raise ConfigError(f"pyramid spatial sizes must halve level to level, got {self.spatial}")

    def active_slots(self) -> tuple[str, ...]:
        return PLACEMENT_SLOTS[self.placement][:self.num_attention_blocks]


@dataclass
class ConvBNLayer:
    """1x1 or 3x3/s2 conv followed by batchnorm and SiLU."""

    w: Tensor
    bn: BatchNorm
    stride2: bool = False

    def __call__(self, x, training=True):
        y = nm.conv3x3s2(x, self.w) if self.stride2 else nm.conv1x1(x, self.w)
        return nm.silu(self.bn(y, training))

    def params(self, prefix):
        yield f"{prefix}.w", self.w
        yield from self.bn.params(f"{prefix}.bn")

    def states(self, prefix):
        yield from self.bn.states(f"{prefix}.bn")


def _conv_bn(rng, in_ch, out_ch, dtype, stride2=False, bn=None):
    fan_in = in_ch * (9 if stride2 else 1)
    bound = 1.0 / np.sqrt(fan_in)
    shape = (out_ch, in_ch, 3, 3) if stride2 else (out_ch, in_ch)
    w = Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)
    return ConvBNLayer(w, BatchNorm(out_ch, dtype=dtype, bn=bn), stride2=stride2)


@dataclass
class CSPParams:
    """Split-transform-merge block: two half-width branches, one stacked with
    residual bottlenecks, concatenated and fused back to the output width."""

    conv_a: ConvBNLayer
    conv_b: ConvBNLayer
    bottlenecks: list[ConvBNLayer]
    conv_final: ConvBNLayer

    def params(self, prefix):
        yield from self.conv_a.params(f"{prefix}.a")
        yield from self.conv_b.params(f"{prefix}.b")
        for i, layer in enumerate(self.bottlenecks):
            yield from layer.params(f"{prefix}.bottleneck{i}")
        yield from self.conv_final.params(f"{prefix}.final")

    def states(self, prefix):
        yield from self.conv_a.states(f"{prefix}.a")
        yield from self.conv_b.states(f"{prefix}.b")
        for i, layer in enumerate(self.bottlenecks):
            yield from layer.states(f"{prefix}.bottleneck{i}")
        yield from self.conv_final.states(f"{prefix}.final")


def init_csp(rng, in_ch, out_ch, depth, dtype=np.float64, bn=None) -> CSPParams:
    hidden = out_ch // 2
    return CSPParams(
        conv_a=_conv_bn(rng, in_ch, hidden, dtype, bn=bn),
        conv_b=_conv_bn(rng, in_ch, hidden, dtype, bn=bn),
        bottlenecks=[_conv_bn(rng, hidden, hidden, dtype, bn=bn) for _ in range(depth)],
        conv_final=_conv_bn(rng, 2 * hidden, out_ch, dtype, bn=bn),
    )


def csp_layer(x: Tensor, p: CSPParams, training=True) -> Tensor:
    if x.shape[1] != p.conv_a.w.shape[1]:
        raise ShapeError(f"csp_layer: expected {p.conv_a.w.shape[1]} channels, got {x.shape[1]}")
    a = p.conv_a(x, training)
    b = p.conv_b(x, training)
    for layer in p.bottlenecks:
        b = nm.add(b, layer(b, training))
    return p.conv_final(nm.concat([a, b], axis=1), training)


@dataclass
class NeckParams:
    cfg: NeckConfig
    attn: dict[str, Attention4DParams]
    csp_td4: CSPParams
    csp_td3: CSPParams
    csp_bu4: CSPParams
    csp_bu5: CSPParams
    down3: ConvBNLayer | None
    down4: ConvBNLayer | None

    def params(self, prefix="neck"):
        for slot in sorted(self.attn):
            yield from self.attn[slot].params(f"{prefix}.attn.{slot}")
        yield from self.csp_td4.params(f"{prefix}.csp_td4")
        yield from self.csp_td3.params(f"{prefix}.csp_td3")
        yield from self.csp_bu4.params(f"{prefix}.csp_bu4")
        yield from self.csp_bu5.params(f"{prefix}.csp_bu5")
        if self.down3 is not None:
            yield from self.down3.params(f"{prefix}.down3")
        if self.down4 is not None:
            yield from self.down4.params(f"{prefix}.down4")

    def states(self, prefix="neck"):
        for slot in sorted(self.attn):
            yield from self.attn[slot].states(f"{prefix}.attn.{slot}")
        yield from self.csp_td4.states(f"{prefix}.csp_td4")
        yield from self.csp_td3.states(f"{prefix}.csp_td3")
        yield from self.csp_bu4.states(f"{prefix}.csp_bu4")
        yield from self.csp_bu5.states(f"{prefix}.csp_bu5")
        if self.down3 is not None:
            yield from self.down3.states(f"{prefix}.down3")
        if self.down4 is not None:
            yield from self.down4.states(f"{prefix}.down4")


def _slot_geometry(cfg: NeckConfig) -> dict[str, tuple[int, tuple[int, int]]]:
    """Channel count and spatial size of the feature each slot refines."""
    c3, c4, c5 = cfg.in_channels
    s3, s4, s5 = cfg.spatial
    return {
        "td_c5": (c5, s5),
        "td_c4": (c4, s4),
        "bu_c4": (cfg.out_channels, s4),
        "bu_c5": (cfg.out_channels, s5),
        "end": (cfg.out_channels, s5),
    }


def init_neck(cfg: NeckConfig, rng: np.random.Generator, dtype=np.float64,
              bn=None) -> NeckParams:
    c3, c4, c5 = cfg.in_channels
    oc = cfg.out_channels
    geometry = _slot_geometry(cfg)
    attn = {}
    for slot in cfg.active_slots():
        channels, spatial = geometry[slot]
        acfg = Attention4DConfig(channels=channels, heads=cfg.attn_heads,
                                 key_dim=cfg.attn_key_dim, value_dim=cfg.attn_value_dim,
                                 spatial=spatial, residual=cfg.attn_residual,
                                 scale=cfg.attn_scale)
        attn[slot] = init_attention4d(acfg, rng, dtype=dtype, bn=bn)
    use_conv_down = cfg.downsample == "conv"
    return NeckParams(
        cfg=cfg,
        attn=attn,
        csp_td4=init_csp(rng, c5 + c4, c4, cfg.csp_depth, dtype, bn=bn),
        csp_td3=init_csp(rng, c4 + c3, oc, cfg.csp_depth, dtype, bn=bn),
        csp_bu4=init_csp(rng, oc + c4, oc, cfg.csp_depth, dtype, bn=bn),
        csp_bu5=init_csp(rng, oc + c5, oc, cfg.csp_depth, dtype, bn=bn),
        down3=_conv_bn(rng, oc, oc, dtype, stride2=True, bn=bn) if use_conv_down else None,
        down4=_conv_bn(rng, oc, oc, dtype, stride2=True, bn=bn) if use_conv_down else None,
    )


def _downsample(x, layer, training):
    return layer(x, training) if layer is not None else nm.avgpool2x2(x)


def neck_forward(c: PyramidFeatures, p: NeckParams, training=True) -> PyramidFeatures:
    """Fuse a 3-level pyramid; every output level carries cfg.out_channels."""
    cfg = p.cfg
    slots = p.attn

    def refine(slot, x):
        if slot in slots:
            return attention4d_forward(x, slots[slot], training)
        return x

    a5 = refine("td_c5", c.p5)
    u4 = nm.concat([nm.upsample2x(a5), c.p4], axis=1)
    a4 = refine("td_c4", csp_layer(u4, p.csp_td4, training))
    u3 = nm.concat([nm.upsample2x(a4), c.p3], axis=1)
    q3 = csp_layer(u3, p.csp_td3, training)

    d4 = nm.concat([_downsample(q3, p.down3, training), a4], axis=1)
    q4 = refine("bu_c4", csp_layer(d4, p.csp_bu4, training))
    d5 = nm.concat([_downsample(q4, p.down4, training), a5], axis=1)
    q5 = refine("bu_c5", csp_layer(d5, p.csp_bu5, training))
    q5 = refine("end", q5)
    return PyramidFeatures(q3, q4, q5)


def parameter_count(cfg: NeckConfig) -> int:
    """Total trainable scalars of the neck under cfg."""
    params = init_neck(cfg, np.random.default_rng(0))
    return sum(t.data.size for _, t in params.params())


def describe_layout(cfg: NeckConfig) -> dict:
    """Block-by-block layout summary for the --dump-arch CLI output."""
    from .attention import attention4d_param_count

    geometry = _slot_geometry(cfg)
    blocks = []
    for slot in cfg.active_slots():
        channels, spatial = geometry[slot]
        acfg = Attention4DConfig(channels=channels, heads=cfg.attn_heads,
                                 key_dim=cfg.attn_key_dim, value_dim=cfg.attn_value_dim,
                                 spatial=spatial, residual=cfg.attn_residual,
                                 scale=cfg.attn_scale)
        blocks.append({
            "slot": slot,
            "channels": channels,
            "spatial": list(spatial),
            "parameters": attention4d_param_count(acfg),
        })
    return {
        "placement": cfg.placement,
        "num_attention_blocks": cfg.num_attention_blocks,
        "attention_blocks": blocks,
        "total_parameters": parameter_count(cfg),
    }
