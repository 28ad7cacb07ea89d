"""Multi-branch recognition network.

A small shared convolutional backbone feeds two branches: the recognition
branch (two convs, global average pooling, identity softmax head) and the
attribute branch, which reuses the recognition branch's first conv and adds
its own conv plus per-attribute sigmoid heads.  The two pre-pooling feature
maps are blended by a fusion operator and the fused map drives a third
identity head used for verification after joint training.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .fusion import AttentionWeights, FusionConfig, make_fusion, FUSION_VARIANTS
from .tensor import Tensor


@dataclass(frozen=True)
class AttributeSpec:
    name: str
    weight: float


# Binary attributes used as the auxiliary signal, ordered so that the
# cumulative ablation subsets are prefixes.  The two most reliable cues
# carry full loss weight, the rest half.
DEFAULT_ATTRIBUTES = (
    AttributeSpec("male", 1.0),
    AttributeSpec("bald", 1.0),
    AttributeSpec("chubby", 0.5),
    AttributeSpec("big_nose", 0.5),
    AttributeSpec("narrow_eyes", 0.5),
)


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture and loss weighting.

    ``backbone`` is a sequence of (channels, stride) stages of 3x3 convs
    with padding 1.  ``embedding_dim`` is the width of both branches'
    second conv and therefore of every embedding.  Attribute loss targets
    map positionally onto the first ``len(attributes)`` dataset attribute
    columns.
    """

    n_identities: int
    in_channels: int = 1
    backbone: tuple[tuple[int, int], ...] = ((8, 2), (16, 2), (32, 2))
    branch_width: int = 32
    embedding_dim: int = 64
    attributes: tuple[AttributeSpec, ...] = DEFAULT_ATTRIBUTES
    lambda_fr: float = 3.0
    fusion: str = "dual"
    reduction: int = 8
    dtype: str = "f32"
    seed: int = 0

    def __post_init__(self):
        if self.n_identities < 2:
            raise ConfigError(f"need at least 2 identities, got {self.n_identities}")
        if self.embedding_dim < 2:
            raise ConfigError(f"embedding_dim must be >= 2, got {self.embedding_dim}")
        if len(self.attributes) < 1:
            raise ConfigError("need at least one attribute")
        for a in self.attributes:
            if a.weight <= 0:
                raise ConfigError(f"attribute '{a.name}' has non-positive loss weight {a.weight}")
        if self.lambda_fr < 0:
            raise ConfigError(f"lambda_fr must be >= 0, got {self.lambda_fr}")
        if self.fusion not in FUSION_VARIANTS and self.fusion != "baseline":
            raise ConfigError(f"unknown fusion '{self.fusion}'")
        if not self.backbone:
            raise ConfigError("backbone needs at least one stage")
        if self.fusion in ("dual", "channel", "se") and self.embedding_dim % self.reduction:
            raise ConfigError(
                f"reduction {self.reduction} must divide embedding_dim {self.embedding_dim}"
            )

    @property
    def attribute_weights(self) -> np.ndarray:
        return np.array([a.weight for a in self.attributes], dtype=np.float64)

    @property
    def attribute_names(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.attributes)


@dataclass
class BranchOutputs:
    """Per-batch network outputs; fields are None for branches not computed."""

    fr_embedding: Optional[Tensor] = None
    fr_logits: Optional[Tensor] = None
    sb_probs: Optional[Tensor] = None
    fused_embedding: Optional[Tensor] = None
    fused_logits: Optional[Tensor] = None
    attention: Optional[AttentionWeights] = None


class MultiBranchModel:
    """Owns the parameter set and runs the forward pass."""

    def __init__(self, cfg: NetworkConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        dt = cfg.dtype
        p: dict[str, Tensor] = {}
        cin = cfg.in_channels
        for i, (cout, _) in enumerate(cfg.backbone):
            p[f"backbone.{i}.weight"] = T.he_uniform(rng, (cout, cin, 3, 3), cin * 9, dt)
            p[f"backbone.{i}.bias"] = T.zeros((cout,), dt, requires_grad=True)
            cin = cout
        bw, emb = cfg.branch_width, cfg.embedding_dim
        p["fr_conv1.weight"] = T.he_uniform(rng, (bw, cin, 3, 3), cin * 9, dt)
        p["fr_conv1.bias"] = T.zeros((bw,), dt, requires_grad=True)
        p["fr_conv2.weight"] = T.he_uniform(rng, (emb, bw, 3, 3), bw * 9, dt)
        p["fr_conv2.bias"] = T.zeros((emb,), dt, requires_grad=True)
        p["fr_head.weight"] = T.he_uniform(rng, (emb, cfg.n_identities), emb, dt)
        p["fr_head.bias"] = T.zeros((cfg.n_identities,), dt, requires_grad=True)
        p["sb_conv2.weight"] = T.he_uniform(rng, (emb, bw, 3, 3), bw * 9, dt)
        p["sb_conv2.bias"] = T.zeros((emb,), dt, requires_grad=True)
        n_attr = len(cfg.attributes)
        p["sb_head.weight"] = T.he_uniform(rng, (emb, n_attr), emb, dt)
        p["sb_head.bias"] = T.zeros((n_attr,), dt, requires_grad=True)
        p["fused_head.weight"] = T.he_uniform(rng, (emb, cfg.n_identities), emb, dt)
        p["fused_head.bias"] = T.zeros((cfg.n_identities,), dt, requires_grad=True)

        variant = cfg.fusion if cfg.fusion != "baseline" else "add"
        self.fusion = make_fusion(variant, FusionConfig(emb, cfg.reduction, dt), rng)
        for k, v in self.fusion.params.items():
            p[f"fusion.{k}"] = v
        self.params = p
        self.completed_stages: set[str] = set()

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def forward(self, batch, branches: Sequence[str] = ("fr", "sb", "fused"),
                pin_channel: Optional[float] = None,
                pin_spatial: Optional[float] = None) -> BranchOutputs:
        x = batch if isinstance(batch, Tensor) else Tensor(batch, dtype=self.cfg.dtype)
        if x.ndim != 4:
            raise ConfigError(f"batch must be (N,C,H,W), got {x.shape}")
        if x.shape[1] != self.cfg.in_channels:
            raise ConfigError(
                f"batch has {x.shape[1]} channels, model expects {self.cfg.in_channels}"
            )
        p = self.params
        h = x
        for i, (_, stride) in enumerate(self.cfg.backbone):
            h = T.relu(T.conv2d(h, p[f"backbone.{i}.weight"], p[f"backbone.{i}.bias"],
                                stride=stride, padding=1))
        shared = T.relu(T.conv2d(h, p["fr_conv1.weight"], p["fr_conv1.bias"], 1, 1))
        n = x.shape[0]
        emb = self.cfg.embedding_dim
        out = BranchOutputs()

        need_fr_map = "fr" in branches or "fused" in branches
        need_sb_map = "sb" in branches or "fused" in branches
        f_fr = f_sb = None
        if need_fr_map:
            f_fr = T.relu(T.conv2d(shared, p["fr_conv2.weight"], p["fr_conv2.bias"], 1, 1))
        if need_sb_map:
            f_sb = T.relu(T.conv2d(shared, p["sb_conv2.weight"], p["sb_conv2.bias"], 1, 1))

        if "fr" in branches:
            out.fr_embedding = T.reshape(T.gap_spatial(f_fr), (n, emb))
            out.fr_logits = T.linear(out.fr_embedding, p["fr_head.weight"], p["fr_head.bias"])
        if "sb" in branches:
            sb_emb = T.reshape(T.gap_spatial(f_sb), (n, emb))
            out.sb_probs = T.sigmoid(T.linear(sb_emb, p["sb_head.weight"], p["sb_head.bias"]))
        if "fused" in branches:
            if hasattr(self.fusion, "channel_gate"):
                fused, gates = self.fusion.fuse(f_fr, f_sb, pin_channel=pin_channel,
                                                pin_spatial=pin_spatial)
            else:
                fused, gates = self.fusion.fuse(f_fr, f_sb)
            out.attention = gates
            out.fused_embedding = T.reshape(T.gap_spatial(fused), (n, emb))
            out.fused_logits = T.linear(out.fused_embedding, p["fused_head.weight"],
                                        p["fused_head.bias"])
        return out


def attribute_bce(sb_probs: Tensor, targets) -> Tensor:
    """Elementwise per-attribute binary cross entropy, shape (N, n)."""
    t = np.asarray(targets, dtype=sb_probs.data.dtype)
    if t.shape != sb_probs.shape:
        raise ValueError(f"targets shape {t.shape} does not match probs {sb_probs.shape}")
    return T.bce(sb_probs, t)


def sb_loss(sb_probs: Tensor, targets, weights: Sequence[float]) -> Tensor:
    """Weighted sum of per-attribute binary cross entropies, batch-averaged."""
    n_attr = sb_probs.shape[1]
    w = np.asarray(weights, dtype=sb_probs.data.dtype)
    if w.shape != (n_attr,):
        raise ValueError(f"got {w.shape[0] if w.ndim else 0} weights for {n_attr} attributes")
    weighted = T.mul(attribute_bce(sb_probs, targets), Tensor(w.reshape(1, n_attr)))
    return T.tsum(weighted) * (1.0 / sb_probs.shape[0])


def total_loss(fused_logits: Tensor, identity_targets, sb_probs: Tensor, sb_targets,
               cfg: NetworkConfig) -> Tensor:
    """Identity cross entropy weighted by lambda_fr plus the attribute loss."""
    fr = T.softmax_cross_entropy(fused_logits, identity_targets)
    sb = sb_loss(sb_probs, sb_targets, cfg.attribute_weights)
    return fr * cfg.lambda_fr + sb


def cosine_similarity(e1, e2) -> float:
    """Cosine of the angle between two embedding vectors, in [-1, 1]."""
    a = np.asarray(e1.data if isinstance(e1, Tensor) else e1, dtype=np.float64).ravel()
    b = np.asarray(e2.data if isinstance(e2, Tensor) else e2, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"embedding dims differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("degenerate embedding: zero norm")
    return float(np.dot(a, b) / (na * nb))
