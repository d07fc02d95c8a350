"""Feature fusion of CNN and ViT streams, the classifier head, and the
five-way model family used by the ablation study."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from . import tensor as T
from .cnn import Backbone, CnnConfig, FeatureMap, StageSpec
from .nn import Linear, Module
from .tensor import ConfigurationError, DimensionError, Tensor
from .vit import MultiHeadAttention, ViTConfig, VisionTransformer


class VariantTag(str, Enum):
    CROSS_ATTENTION = "CROSS_ATTENTION"
    CONCAT = "CONCAT"
    SELF_ATTENTION = "SELF_ATTENTION"
    VIT_ONLY = "VIT_ONLY"
    CNN_ONLY = "CNN_ONLY"


ROW_LABELS = {
    VariantTag.CROSS_ATTENTION: "EfficientNet-B0 + ViT + Cross-Attention (Proposed)",
    VariantTag.CONCAT: "EfficientNet-B0 + ViT (Concatenation, No Attention)",
    VariantTag.SELF_ATTENTION: "EfficientNet-B0 + ViT + Self-Attention",
    VariantTag.VIT_ONLY: "Vision Transformer (ViT) Only",
    VariantTag.CNN_ONLY: "EfficientNet-B0 (CNN) Only",
}

# published full-scale accuracies (%), printed beside runs for reference only
REFERENCE_ACCURACY = {
    VariantTag.CROSS_ATTENTION: 94.79,
    VariantTag.CONCAT: 91.67,
    VariantTag.SELF_ATTENTION: 87.62,
    VariantTag.VIT_ONLY: 86.72,
    VariantTag.CNN_ONLY: 85.98,
}

FUSED = (VariantTag.CROSS_ATTENTION, VariantTag.CONCAT, VariantTag.SELF_ATTENTION)


@dataclass
class ModelVariant:
    tag: VariantTag = VariantTag.CROSS_ATTENTION
    fusion_dim: int = 128
    head_hidden: int = 64
    heads: int = 4
    dropout: float = 0.3
    query_source: str = "cnn"
    pooling: str = "mean"

    def __post_init__(self):
        self.tag = VariantTag(self.tag)
        if self.query_source not in ("cnn", "vit"):
            raise ConfigurationError("query_source must be 'cnn' or 'vit'")
        if self.pooling not in ("mean", "max"):
            raise ConfigurationError("pooling must be 'mean' or 'max'")
        if not 0 <= self.dropout < 1:
            raise ConfigurationError("dropout must lie in [0, 1)")

    @property
    def uses_cnn(self) -> bool:
        return self.tag != VariantTag.VIT_ONLY

    @property
    def uses_vit(self) -> bool:
        return self.tag != VariantTag.CNN_ONLY


@dataclass
class ModelConfig:
    variant: ModelVariant = field(default_factory=ModelVariant)
    cnn: CnnConfig = field(default_factory=CnnConfig)
    vit: ViTConfig = field(default_factory=ViTConfig)
    image_size: int = 224

    def __post_init__(self):
        self.vit.image_size = self.image_size

    def validate(self) -> None:
        self.cnn.validate()
        self.vit.validate()
        if self.image_size % self.cnn.output_stride:
            raise ConfigurationError(
                f"image size {self.image_size} not divisible by CNN stride {self.cnn.output_stride}")
        if self.variant.fusion_dim % self.variant.heads:
            raise ConfigurationError("fusion dim must be divisible by fusion heads")

    def with_tag(self, tag) -> "ModelConfig":
        variant = ModelVariant(**{**asdict(self.variant), "tag": VariantTag(tag)})
        return ModelConfig(variant, self.cnn, ViTConfig(**asdict(self.vit)), self.image_size)

    def to_dict(self) -> dict:
        v = asdict(self.variant)
        v["tag"] = self.variant.tag.value
        return {"variant": v, "cnn": self.cnn.to_dict(), "vit": self.vit.to_dict(),
                "image_size": self.image_size}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(ModelVariant(**d.get("variant", {})),
                   CnnConfig.from_dict(d.get("cnn", {})),
                   ViTConfig.from_dict(d.get("vit", {})),
                   d.get("image_size", 224))

    @classmethod
    def preset(cls, name: str, tag=VariantTag.CROSS_ATTENTION) -> "ModelConfig":
        tag = VariantTag(tag)
        if name == "desk":
            return cls(ModelVariant(tag), CnnConfig(), ViTConfig())
        if name == "full":
            return cls(ModelVariant(tag, fusion_dim=768, head_hidden=256, heads=8),
                       CnnConfig.full_b0(), ViTConfig.vit_b16())
        if name == "micro":
            return cls(ModelVariant(tag, fusion_dim=32, head_hidden=32, heads=2),
                       CnnConfig.micro(),
                       ViTConfig(patch_size=32, embed_dim=32, heads=2, depth=2, mlp_ratio=2))
        if name == "gradcheck":
            cnn = CnnConfig(stem_channels=4,
                            stages=(StageSpec(1, 4, 3, 1, 1), StageSpec(2, 8, 3, 2, 1, 0.5)),
                            feature_channels=8)
            return cls(ModelVariant(tag, fusion_dim=8, head_hidden=8, heads=2, dropout=0.0),
                       cnn, ViTConfig(patch_size=4, embed_dim=8, heads=2, depth=1, mlp_ratio=2),
                       image_size=8)
        raise ConfigurationError(f"unknown preset {name!r}")


# ------------------------------------------------------------- fusion ops


def pool_tokens(x: Tensor, how: str = "mean") -> Tensor:
    return T.mean(x, axis=1) if how == "mean" else T.tmax(x, axis=1)


def cnn_tokens(fmap: FeatureMap, proj: Linear) -> Tensor:
    """B x C x H x W -> B x (H*W) x Df; token index i*W + j."""
    x = fmap.tensor
    b, c, h, w = x.shape
    seq = T.transpose(T.reshape(x, (b, c, h * w)), (0, 2, 1))
    return proj(seq)


def cross_attention_fuse(cnn_t: Tensor, vit_t: Tensor, attn: MultiHeadAttention,
                         query_source: str = "cnn", pooling: str = "mean"):
    """Queries from one stream attend over the other; residual onto queries; pool.

    Returns ``(fused B x Df, attention weights)``.
    """
    if cnn_t.shape[-1] != vit_t.shape[-1]:
        raise DimensionError(f"token widths differ: {cnn_t.shape[-1]} vs {vit_t.shape[-1]}")
    q, kv = (cnn_t, vit_t) if query_source == "cnn" else (vit_t, cnn_t)
    out, weights = attn(q, kv)
    return pool_tokens(q + out, pooling), weights


def concat_fuse(cnn_pooled: Tensor, vit_pooled: Tensor, proj: Linear) -> Tensor:
    return proj(T.concat([cnn_pooled, vit_pooled], axis=1))


def self_attention_fuse(cnn_t: Tensor, vit_t: Tensor, attn: MultiHeadAttention,
                        pooling: str = "mean"):
    joint = T.concat([cnn_t, vit_t], axis=1)
    out, weights = attn(joint, joint)
    return pool_tokens(joint + out, pooling), weights


# ---------------------------------------------------------------- modules


class CrossAttentionFusion(Module):
    def __init__(self, c_cnn: int, d_vit: int, variant: ModelVariant, rng):
        df = variant.fusion_dim
        self.cnn_proj = Linear(c_cnn, df, rng)
        self.vit_proj = Linear(d_vit, df, rng)
        self.attn = MultiHeadAttention(df, variant.heads, rng)
        self.query_source = variant.query_source
        self.pooling = variant.pooling
        self._weights: Optional[Tensor] = None

    def forward(self, fmap: FeatureMap, vit_tokens: Tensor) -> Tensor:
        fused, self._weights = cross_attention_fuse(
            cnn_tokens(fmap, self.cnn_proj), self.vit_proj(vit_tokens), self.attn,
            self.query_source, self.pooling)
        return fused


class SelfAttentionFusion(Module):
    def __init__(self, c_cnn: int, d_vit: int, variant: ModelVariant, rng):
        df = variant.fusion_dim
        self.cnn_proj = Linear(c_cnn, df, rng)
        self.vit_proj = Linear(d_vit, df, rng)
        self.attn = MultiHeadAttention(df, variant.heads, rng)
        self.pooling = variant.pooling
        self._weights: Optional[Tensor] = None

    def forward(self, fmap: FeatureMap, vit_tokens: Tensor) -> Tensor:
        fused, self._weights = self_attention_fuse(
            cnn_tokens(fmap, self.cnn_proj), self.vit_proj(vit_tokens), self.attn, self.pooling)
        return fused


class ConcatFusion(Module):
    def __init__(self, c_cnn: int, d_vit: int, variant: ModelVariant, rng):
        self.proj = Linear(c_cnn + d_vit, variant.fusion_dim, rng)

    def forward(self, fmap: FeatureMap, vit_tokens: Tensor) -> Tensor:
        return concat_fuse(T.mean(fmap.tensor, axis=(2, 3)), T.mean(vit_tokens, axis=1), self.proj)


class Head(Module):
    """dense -> GELU -> dropout (train only) -> dense -> logit."""

    def __init__(self, n_in: int, hidden: int, dropout: float, rng, dropout_rng):
        self.fc1 = Linear(n_in, hidden, rng)
        self.fc2 = Linear(hidden, 1, rng)
        self.dropout = dropout
        self._rng = dropout_rng

    def logit(self, fused: Tensor) -> Tensor:
        h = T.gelu(self.fc1(fused))
        if self.training:
            h = T.dropout(h, self.dropout, self._rng)
        out = self.fc2(h)
        return T.reshape(out, (out.shape[0],))

    def forward(self, fused: Tensor) -> Tensor:
        return T.sigmoid(self.logit(fused))


def classify(fused: Tensor, head: Head) -> Tensor:
    return head(fused)


_FUSION = {
    VariantTag.CROSS_ATTENTION: CrossAttentionFusion,
    VariantTag.SELF_ATTENTION: SelfAttentionFusion,
    VariantTag.CONCAT: ConcatFusion,
}


class HybridModel(Module):
    """One of the five ablation variants; ``forward`` returns B logits.

    Sub-networks draw from independent seed streams, so the CNN and ViT weights
    are identical across variants built from the same seed.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        v = config.variant
        self.cnn = (Backbone(config.cnn, np.random.default_rng([seed, 0]))
                    if v.uses_cnn else None)
        self.vit = (VisionTransformer(config.vit, np.random.default_rng([seed, 1]))
                    if v.uses_vit else None)
        c_cnn, d_vit = config.cnn.feature_channels, config.vit.embed_dim
        fuse_rng = np.random.default_rng([seed, 2])
        if v.tag in _FUSION:
            self.fusion = _FUSION[v.tag](c_cnn, d_vit, v, fuse_rng)
            head_in = v.fusion_dim
        else:
            self.fusion = None
            head_in = c_cnn if v.tag == VariantTag.CNN_ONLY else d_vit
        self.head = Head(head_in, v.head_hidden, v.dropout,
                         np.random.default_rng([seed, 3]), np.random.default_rng([seed, 4]))

    @property
    def tag(self) -> VariantTag:
        return self.config.variant.tag

    @property
    def layer_names(self) -> list[str]:
        names = list(self.cnn.layer_names) if self.cnn is not None else []
        if self.vit is not None:
            names.append("vit.patch_embed")
        return names

    def fused_features(self, images: Tensor, capture: Optional[dict] = None) -> Tensor:
        fmap = self.cnn(images, capture) if self.cnn is not None else None
        tokens = self.vit(images, capture) if self.vit is not None else None
        if self.tag == VariantTag.CNN_ONLY:
            return T.mean(fmap.tensor, axis=(2, 3))
        if self.tag == VariantTag.VIT_ONLY:
            return T.mean(tokens, axis=1)
        return T.check_finite(self.fusion(fmap, tokens), "fusion")

    def forward(self, images: Tensor, capture: Optional[dict] = None) -> Tensor:
        return self.head.logit(self.fused_features(images, capture))

    def predict_proba(self, images: np.ndarray) -> np.ndarray:
        return T.sigmoid(self.forward(Tensor(images))).data


def build_model(config: ModelConfig, seed: int = 0) -> HybridModel:
    return HybridModel(config, seed)
