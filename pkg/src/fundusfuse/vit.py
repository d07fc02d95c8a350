"""Vision Transformer encoder: patch embedding and pre-norm attention blocks."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, param
from .tensor import ConfigurationError, DimensionError, Tensor


@dataclass
class ViTConfig:
    patch_size: int = 16
    embed_dim: int = 128
    heads: int = 4
    depth: int = 4
    mlp_ratio: int = 4
    use_cls_token: bool = False
    image_size: int = 224

    def validate(self) -> None:
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ConfigurationError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.embed_dim < 1 or self.heads < 1 or self.embed_dim % self.heads:
            raise ConfigurationError(f"embed dim {self.embed_dim} not divisible by {self.heads} heads")
        if self.depth < 0 or self.mlp_ratio < 1:
            raise ConfigurationError("depth must be >= 0 and mlp ratio >= 1")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid ** 2 + (1 if self.use_cls_token else 0)

    @classmethod
    def vit_b16(cls) -> "ViTConfig":
        return cls(patch_size=16, embed_dim=768, heads=12, depth=12, mlp_ratio=4)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ViTConfig":
        return cls(**d)


def image_to_patches(images: Tensor, patch: int) -> Tensor:
    """B x 3 x H x W -> B x T x (3*P*P), tokens in row-major grid order."""
    b, c, h, w = images.shape
    if h % patch or w % patch:
        raise ConfigurationError(f"image {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    x = T.reshape(images, (b, c, gh, patch, gw, patch))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    return T.reshape(x, (b, gh * gw, c * patch * patch))


class PatchEmbed(Module):
    """Linear projection of each P x P x 3 pixel block (plus optional cls token)."""

    def __init__(self, config: ViTConfig, rng: np.random.Generator):
        p = config.patch_size
        self.patch = p
        self.proj = Linear(3 * p * p, config.embed_dim, rng)
        self.cls_token = (param(rng.normal(0.0, 0.02, (1, 1, config.embed_dim)))
                          if config.use_cls_token else None)

    def forward(self, images: Tensor) -> Tensor:
        tokens = self.proj(image_to_patches(images, self.patch))
        if self.cls_token is not None:
            b = images.shape[0]
            cls = self.cls_token + T.Tensor(np.zeros((b, 1, tokens.shape[2])))
            tokens = T.concat([cls, tokens], axis=1)
        return tokens


class MultiHeadAttention(Module):
    """Scaled dot-product attention with ``heads`` parallel heads.

    ``forward(q_src, kv_src)`` returns ``(output, weights)`` where weights has
    shape B x heads x Tq x Tk. Self-attention is ``forward(x, x)``.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ConfigurationError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        x = T.reshape(x, (b, t, self.heads, d // self.heads))
        return T.transpose(x, (0, 2, 1, 3))

    def forward(self, q_src: Tensor, kv_src: Tensor):
        if q_src.shape[-1] != kv_src.shape[-1]:
            raise DimensionError(
                f"query width {q_src.shape[-1]} != key/value width {kv_src.shape[-1]}")
        b, tq, d = q_src.shape
        q = self._split(self.q(q_src))
        k = self._split(self.k(kv_src))
        v = self._split(self.v(kv_src))
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(d // self.heads))
        weights = T.softmax(scores, axis=-1)
        ctx = T.transpose(T.matmul(weights, v), (0, 2, 1, 3))
        return self.out(T.reshape(ctx, (b, tq, d))), weights


def multi_head_attention(q_src: Tensor, kv_src: Tensor, attn: MultiHeadAttention):
    return attn(q_src, kv_src)


class Block(Module):
    def __init__(self, config: ViTConfig, rng: np.random.Generator):
        d = config.embed_dim
        self.norm1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, config.heads, rng)
        self.norm2 = LayerNorm(d)
        self.fc1 = Linear(d, d * config.mlp_ratio, rng)
        self.fc2 = Linear(d * config.mlp_ratio, d, rng)
        self._weights: Optional[Tensor] = None

    def forward(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        a, self._weights = self.attn(h, h)
        x = x + a
        return x + self.fc2(T.gelu(self.fc1(self.norm2(x))))

    def zero_output(self) -> None:
        for lin in (self.attn.out, self.fc2):
            lin.weight.data[...] = 0.0
            lin.bias.data[...] = 0.0


class VisionTransformer(Module):
    def __init__(self, config: ViTConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        self.patch_embed = PatchEmbed(config, rng)
        self.pos_embed = param(rng.normal(0.0, 0.02, (1, config.num_tokens, config.embed_dim)))
        self.block = [Block(config, rng) for _ in range(config.depth)]

    @property
    def attention_weights(self) -> list[Tensor]:
        """Per-block B x heads x T x T weights from the latest forward."""
        return [blk._weights for blk in self.block]

    def patchify(self, images: Tensor) -> Tensor:
        """Token sequence B x T x D: projected patches plus position embeddings."""
        return self.patch_embed(images) + self.pos_embed

    def forward(self, images: Tensor, capture: Optional[dict] = None) -> Tensor:
        x = self.patchify(images)
        if capture is not None and not self.config.use_cls_token:
            # route tokens through a B x D x g x g view so gradients land on it
            b, t, d = x.shape
            g = images.shape[2] // self.config.patch_size
            grid = T.reshape(T.transpose(x, (0, 2, 1)), (b, d, g, g))
            capture["vit.patch_embed"] = grid
            x = T.transpose(T.reshape(grid, (b, d, t)), (0, 2, 1))
        for i, blk in enumerate(self.block):
            x = T.check_finite(blk(x), f"vit.block{i}")
        return x


def build_vit(config: ViTConfig, init_seed: int) -> VisionTransformer:
    return VisionTransformer(config, np.random.default_rng(init_seed))
