"""EfficientNet-style convolutional backbone (MBConv + squeeze-excitation)."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .nn import BatchNorm, Conv2d, Linear, Module
from .tensor import ConfigurationError, Tensor


@dataclass(frozen=True)
class StageSpec:
    expand: int
    channels: int
    kernel: int
    stride: int
    repeats: int
    se_ratio: float = 0.25


# EfficientNet-B0 stage table (expand, channels, kernel, stride, repeats)
B0_STAGES = (
    StageSpec(1, 16, 3, 1, 1),
    StageSpec(6, 24, 3, 2, 2),
    StageSpec(6, 40, 5, 2, 2),
    StageSpec(6, 80, 3, 2, 3),
    StageSpec(6, 112, 5, 1, 3),
    StageSpec(6, 192, 5, 2, 4),
    StageSpec(6, 320, 3, 1, 1),
)

DESK_STAGES = (
    StageSpec(1, 16, 3, 2, 1),
    StageSpec(4, 32, 3, 2, 2),
    StageSpec(4, 64, 5, 2, 2),
    StageSpec(4, 128, 3, 2, 2),
)


@dataclass
class CnnConfig:
    stem_channels: int = 24
    stages: tuple = DESK_STAGES
    feature_channels: int = 256
    stem_stride: int = 2
    zero_init_last_bn: bool = False

    @property
    def output_stride(self) -> int:
        s = self.stem_stride
        for st in self.stages:
            s *= st.stride
        return s

    def validate(self) -> None:
        if self.stem_channels < 1 or self.feature_channels < 1 or self.stem_stride < 1:
            raise ConfigurationError("stem/feature channels and stem stride must be positive")
        if not self.stages:
            raise ConfigurationError("backbone needs at least one stage")
        for i, st in enumerate(self.stages):
            if min(st.expand, st.channels, st.kernel, st.stride, st.repeats) < 1:
                raise ConfigurationError(f"stage {i}: all stage fields must be positive")
            if st.kernel % 2 == 0:
                raise ConfigurationError(f"stage {i}: kernel must be odd for same padding")
            if not 0 < st.se_ratio <= 1:
                raise ConfigurationError(f"stage {i}: SE ratio must lie in (0, 1]")

    @classmethod
    def full_b0(cls) -> "CnnConfig":
        return cls(stem_channels=32, stages=B0_STAGES, feature_channels=1280)

    @classmethod
    def tiny(cls) -> "CnnConfig":
        """Two stages, total stride 4."""
        return cls(stem_channels=8, stages=(StageSpec(1, 8, 3, 1, 1), StageSpec(2, 16, 3, 2, 1)),
                   feature_channels=16)

    @classmethod
    def micro(cls) -> "CnnConfig":
        """Stride-32 toy backbone for fixture-scale training."""
        return cls(stem_channels=8,
                   stages=(StageSpec(1, 8, 3, 2, 1), StageSpec(2, 16, 3, 2, 1),
                           StageSpec(2, 24, 3, 2, 1), StageSpec(2, 32, 3, 2, 1)),
                   feature_channels=32)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = list(d["stages"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CnnConfig":
        d = dict(d)
        if "stages" in d:
            d["stages"] = tuple(StageSpec(**st) for st in d["stages"])
        return cls(**d)


@dataclass
class FeatureMap:
    tensor: Tensor
    stride: int

    @property
    def channels(self) -> int:
        return self.tensor.shape[1]


class ConvBN(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, groups=1, act=True):
        self.conv = Conv2d(c_in, c_out, kernel, rng, stride=stride, groups=groups)
        self.bn = BatchNorm(c_out)
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn(self.conv(x))
        return T.silu(y) if self.act else y


class SqueezeExcite(Module):
    """Per-channel gate ``sigmoid(fc2(silu(fc1(mean_hw(x)))))`` times ``x``."""

    def __init__(self, channels: int, squeeze: int, rng: np.random.Generator):
        self.fc1 = Linear(channels, squeeze, rng)
        self.fc2 = Linear(squeeze, channels, rng)

    def gate(self, x: Tensor) -> Tensor:
        pooled = T.mean(x, axis=(2, 3))
        return T.sigmoid(self.fc2(T.silu(self.fc1(pooled))))

    def forward(self, x: Tensor) -> Tensor:
        b, c = x.shape[:2]
        return x * T.reshape(self.gate(x), (b, c, 1, 1))


def squeeze_excitation(x: Tensor, reduction: float, rng: Optional[np.random.Generator] = None,
                       module: Optional[SqueezeExcite] = None) -> Tensor:
    """Functional SE; builds a fresh gate unless ``module`` is supplied."""
    c = x.shape[1]
    if module is None:
        squeeze = int(c * reduction)
        if squeeze < 1:
            raise ConfigurationError("channels * reduction must be at least 1")
        module = SqueezeExcite(c, squeeze, rng if rng is not None else np.random.default_rng(0))
    return module(x)


class MBConv(Module):
    def __init__(self, c_in: int, c_out: int, spec: StageSpec, stride: int, rng):
        hidden = c_in * spec.expand
        self.expand = ConvBN(c_in, hidden, 1, rng) if spec.expand != 1 else None
        self.dw = ConvBN(hidden, hidden, spec.kernel, rng, stride=stride, groups=hidden)
        self.se = SqueezeExcite(hidden, max(1, int(c_in * spec.se_ratio)), rng)
        self.project = ConvBN(hidden, c_out, 1, rng, act=False)
        self.residual = stride == 1 and c_in == c_out

    def forward(self, x: Tensor) -> Tensor:
        y = self.expand(x) if self.expand is not None else x
        y = self.project(self.se(self.dw(y)))
        return x + y if self.residual else y


class Stage(Module):
    def __init__(self, c_in: int, spec: StageSpec, rng):
        self.block = [MBConv(c_in if i == 0 else spec.channels, spec.channels, spec,
                             spec.stride if i == 0 else 1, rng)
                      for i in range(spec.repeats)]


class Backbone(Module):
    def __init__(self, config: CnnConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        self.stem = ConvBN(3, config.stem_channels, 3, rng, stride=config.stem_stride)
        stages, c = [], config.stem_channels
        for spec in config.stages:
            stages.append(Stage(c, spec, rng))
            c = spec.channels
        self.stage = stages
        self.head = ConvBN(c, config.feature_channels, 1, rng)
        if config.zero_init_last_bn:
            self.head.bn.weight.data[...] = 0.0

    @property
    def layer_names(self) -> list[str]:
        return ["cnn.stem"] + [f"cnn.stage{i}" for i in range(len(self.stage))] + ["cnn.head"]

    def forward(self, images: Tensor, capture: Optional[dict] = None) -> FeatureMap:
        x = T.check_finite(self.stem(images), "cnn.stem")
        if capture is not None:
            capture["cnn.stem"] = x
        for i, stage in enumerate(self.stage):
            for j, block in enumerate(stage.block):
                x = T.check_finite(block(x), f"cnn.stage{i}.block{j}")
            if capture is not None:
                capture[f"cnn.stage{i}"] = x
        x = T.check_finite(self.head(x), "cnn.head")
        if capture is not None:
            capture["cnn.head"] = x
        return FeatureMap(x, self.config.output_stride)


def build_backbone(config: CnnConfig, init_seed: int) -> Backbone:
    return Backbone(config, np.random.default_rng(init_seed))
