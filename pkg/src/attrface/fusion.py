"""Attentive fusion of two same-shape feature maps.

The main operator blends a recognition feature map with an attribute
feature map through two sequential gates: a multi-scale channel gate and a
multi-scale spatial gate, both sigmoid-valued so the blend is a weighted
average at every position.  Simpler fusion operators (add, concat
projection, squeeze-excitation gate, channel-gate-only) are provided as
ablation controls; all variants map two (N,C,H,W) inputs to one (N,C,H,W)
output.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError

FUSION_VARIANTS = ("dual", "channel", "se", "concat", "add")


@dataclass(frozen=True)
class FusionConfig:
    """Channel width and bottleneck reduction for the gated fusion ops."""

    channels: int
    reduction: int = 8
    dtype: str = "f32"
    seed: int = 0

    def __post_init__(self):
        if self.reduction < 1:
            raise ValueError(f"reduction must be >= 1, got {self.reduction}")
        if self.channels < self.reduction:
            raise ValueError(
                f"channels ({self.channels}) must be >= reduction ({self.reduction})"
            )
        if self.channels % self.reduction != 0:
            raise ValueError(
                f"reduction {self.reduction} must divide channels {self.channels}"
            )


@dataclass
class AttentionWeights:
    """Gates produced during fusion, kept for inspection.

    ``channel`` has the full input shape (N,C,H,W); ``spatial`` is (N,1,H,W)
    before it is broadcast across channels.  ``spatial`` is None for the
    channel-only variant.
    """

    channel: Tensor
    spatial: Optional[Tensor]


def _check_pair(a: Tensor, b: Tensor, channels: int) -> None:
    if a.shape != b.shape:
        for axis, (da, db) in enumerate(zip(a.shape, b.shape)):
            if da != db:
                raise ShapeError(f"fusion inputs differ on axis {axis}: {a.shape} vs {b.shape}")
        raise ShapeError(f"fusion inputs differ in rank: {a.shape} vs {b.shape}")
    if a.ndim != 4:
        raise ShapeError(f"fusion inputs must be (N,C,H,W), got {a.shape}")
    if a.shape[1] != channels:
        raise ShapeError(
            f"fusion configured for {channels} channels, inputs have {a.shape[1]}"
        )


def _pw_params(rng: np.random.Generator, cin: int, cout: int, dtype: str):
    weight = T.he_uniform(rng, (cout, cin, 1, 1), fan_in=cin, dtype=dtype)
    bias = T.zeros((cout,), dtype=dtype, requires_grad=True)
    return weight, bias


def _const_gate(value: float, shape, dtype: str) -> Tensor:
    return Tensor(np.full(shape, value, dtype=T.DTYPES[dtype]))


class DualAttentionFusion:
    """Sequential channel-then-spatial gated blend of two feature maps.

    Channel gate: from U = a + b, pooled descriptors (spatial mean and max)
    pass through one shared pointwise bottleneck and are summed; a separate
    full-resolution pointwise bottleneck preserves H x W; the gate is the
    sigmoid of their broadcast sum, so it has the full input shape.

    Spatial gate: from the channel-blended map, the 2-channel mean/max
    descriptor goes through a local pointwise stack (2 -> 1 -> 1) and, after
    global average pooling, through a separate global stack; again sigmoid
    of the broadcast sum.

    The fused output multiplies the first input by both gates and the second
    by both complements:  ms * (mc * a) + (1 - ms) * ((1 - mc) * b).
    """

    variant = "dual"

    def __init__(self, cfg: FusionConfig, rng: Optional[np.random.Generator] = None,
                 spatial: bool = True):
        self.cfg = cfg
        self.spatial = spatial
        if not spatial:
            self.variant = "channel"
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        c, mid, dt = cfg.channels, cfg.channels // cfg.reduction, cfg.dtype
        p: dict[str, Tensor] = {}
        p["ch_pool.reduce.weight"], p["ch_pool.reduce.bias"] = _pw_params(rng, c, mid, dt)
        p["ch_pool.expand.weight"], p["ch_pool.expand.bias"] = _pw_params(rng, mid, c, dt)
        p["ch_local.reduce.weight"], p["ch_local.reduce.bias"] = _pw_params(rng, c, mid, dt)
        p["ch_local.expand.weight"], p["ch_local.expand.bias"] = _pw_params(rng, mid, c, dt)
        if spatial:
            p["sp_local.reduce.weight"], p["sp_local.reduce.bias"] = _pw_params(rng, 2, 1, dt)
            p["sp_local.expand.weight"], p["sp_local.expand.bias"] = _pw_params(rng, 1, 1, dt)
            p["sp_global.reduce.weight"], p["sp_global.reduce.bias"] = _pw_params(rng, 2, 1, dt)
            p["sp_global.expand.weight"], p["sp_global.expand.bias"] = _pw_params(rng, 1, 1, dt)
        self.params = p

    def _bottleneck(self, x: Tensor, stack: str) -> Tensor:
        p = self.params
        h = T.pointwise_conv(x, p[f"{stack}.reduce.weight"], p[f"{stack}.reduce.bias"])
        h = T.relu(h)
        return T.pointwise_conv(h, p[f"{stack}.expand.weight"], p[f"{stack}.expand.bias"])

    def channel_gate(self, a: Tensor, b: Tensor) -> Tensor:
        _check_pair(a, b, self.cfg.channels)
        u = T.add(a, b)
        pooled = T.add(self._bottleneck(T.gap_spatial(u), "ch_pool"),
                       self._bottleneck(T.gmp_spatial(u), "ch_pool"))
        local = self._bottleneck(u, "ch_local")
        return T.sigmoid(T.broadcast_add(local, pooled))

    def spatial_gate(self, v: Tensor) -> Tensor:
        if v.ndim != 4:
            raise ShapeError(f"spatial_gate expects (N,C,H,W), got {v.shape}")
        d = T.channel_mean_max(v)
        local = self._bottleneck(d, "sp_local")
        glob = self._bottleneck(T.gap_spatial(d), "sp_global")
        return T.sigmoid(T.broadcast_add(local, glob))

    def fuse(self, a: Tensor, b: Tensor, pin_channel: Optional[float] = None,
             pin_spatial: Optional[float] = None) -> tuple[Tensor, AttentionWeights]:
        """Blend ``a`` and ``b``; returns the fused map and the gates.

        ``pin_channel`` / ``pin_spatial`` are test hooks that replace a gate
        with an exact constant (bypassing the sigmoid), so the limit
        identities gate=1 -> a and gate=0 -> b can be checked exactly.
        """
        _check_pair(a, b, self.cfg.channels)
        if pin_channel is None:
            mc = self.channel_gate(a, b)
        else:
            mc = _const_gate(pin_channel, a.shape, self.cfg.dtype)
        blended = mc * a + (1.0 - mc) * b
        if not self.spatial:
            return blended, AttentionWeights(channel=mc, spatial=None)
        if pin_spatial is None:
            ms = self.spatial_gate(blended)
        else:
            ms = _const_gate(pin_spatial, (a.shape[0], 1) + a.shape[2:], self.cfg.dtype)
        fused = ms * (mc * a) + (1.0 - ms) * ((1.0 - mc) * b)
        return fused, AttentionWeights(channel=mc, spatial=ms)


class SqueezeExciteFusion:
    """Global channel gate: sigmoid(bottleneck(GAP(a + b))), one weight per
    channel, applied as gate * a + (1 - gate) * b."""

    variant = "se"

    def __init__(self, cfg: FusionConfig, rng: Optional[np.random.Generator] = None):
        self.cfg = cfg
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        c, mid, dt = cfg.channels, cfg.channels // cfg.reduction, cfg.dtype
        p: dict[str, Tensor] = {}
        p["gate.reduce.weight"], p["gate.reduce.bias"] = _pw_params(rng, c, mid, dt)
        p["gate.expand.weight"], p["gate.expand.bias"] = _pw_params(rng, mid, c, dt)
        self.params = p

    def fuse(self, a: Tensor, b: Tensor) -> tuple[Tensor, None]:
        _check_pair(a, b, self.cfg.channels)
        p = self.params
        u = T.add(a, b)
        h = T.pointwise_conv(T.gap_spatial(u), p["gate.reduce.weight"], p["gate.reduce.bias"])
        h = T.pointwise_conv(T.relu(h), p["gate.expand.weight"], p["gate.expand.bias"])
        gate = T.sigmoid(h)
        return gate * a + (1.0 - gate) * b, None


class ConcatFusion:
    """Channel concatenation followed by a pointwise projection back to C."""

    variant = "concat"

    def __init__(self, cfg: FusionConfig, rng: Optional[np.random.Generator] = None):
        self.cfg = cfg
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        c = cfg.channels
        w, bias = _pw_params(rng, 2 * c, c, cfg.dtype)
        self.params = {"proj.weight": w, "proj.bias": bias}

    def fuse(self, a: Tensor, b: Tensor) -> tuple[Tensor, None]:
        _check_pair(a, b, self.cfg.channels)
        cat = T.concat_channels(a, b)
        return T.pointwise_conv(cat, self.params["proj.weight"], self.params["proj.bias"]), None


class AddFusion:
    """Plain elementwise sum; no parameters."""

    variant = "add"

    def __init__(self, cfg: FusionConfig, rng: Optional[np.random.Generator] = None):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}

    def fuse(self, a: Tensor, b: Tensor) -> tuple[Tensor, None]:
        _check_pair(a, b, self.cfg.channels)
        return T.add(a, b), None


FusionOperator = DualAttentionFusion | SqueezeExciteFusion | ConcatFusion | AddFusion


def make_fusion(variant: str, cfg: FusionConfig,
                rng: Optional[np.random.Generator] = None) -> FusionOperator:
    """Build a fusion operator by variant tag (see FUSION_VARIANTS)."""
    if variant == "dual":
        return DualAttentionFusion(cfg, rng, spatial=True)
    if variant == "channel":
        return DualAttentionFusion(cfg, rng, spatial=False)
    if variant == "se":
        return SqueezeExciteFusion(cfg, rng)
    if variant == "concat":
        return ConcatFusion(cfg, rng)
    if variant == "add":
        return AddFusion(cfg, rng)
    raise ValueError(f"unknown fusion variant '{variant}', expected one of {FUSION_VARIANTS}")
