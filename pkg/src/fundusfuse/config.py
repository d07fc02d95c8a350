"""Experiment configuration: one JSON document describing a whole run.

Every field has a default, and the defaults are the published training
protocol, so ``{}`` is a valid config.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from .data import AugmentationConfig, Layout
from .fusion import ModelConfig, VariantTag
from .training import TrainConfig


@dataclass
class ExperimentConfig:
    data_root: Optional[Union[str, list]] = None  # root, or list of roots / LAYOUT=ROOT
    layout: str = Layout.SYNTHETIC.value
    model: ModelConfig = field(default_factory=lambda: ModelConfig.preset("desk"))
    train: TrainConfig = field(default_factory=TrainConfig)
    augmentation: Optional[AugmentationConfig] = field(default_factory=AugmentationConfig)
    seed: int = 0

    def __post_init__(self):
        self.train.seed = self.seed
        if self.augmentation is not None:
            self.augmentation.seed = self.seed

    @property
    def variant(self) -> VariantTag:
        return self.model.variant.tag

    def with_variant(self, tag) -> "ExperimentConfig":
        return ExperimentConfig.from_dict({**self.to_dict(), "model": self.model.with_tag(tag).to_dict()})

    def to_dict(self) -> dict:
        return {
            "data_root": self.data_root,
            "layout": self.layout,
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "augmentation": self.augmentation.to_dict() if self.augmentation else None,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "model" in d and d["model"] is not None:
            model = ModelConfig.from_dict(d["model"])
        else:
            model = ModelConfig.preset(d.get("preset", "desk"), d.get("variant", "CROSS_ATTENTION"))
        if "variant" in d and "model" in d:
            model = model.with_tag(d["variant"])
        aug = d.get("augmentation", {})
        return cls(
            data_root=d.get("data_root"),
            layout=Layout(d.get("layout", Layout.SYNTHETIC.value)).value,
            model=model,
            train=TrainConfig(**d.get("train", {})),
            augmentation=AugmentationConfig(**aug) if aug is not None else None,
            seed=int(d.get("seed", 0)),
        )

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))
