"""Grad-CAM heat maps over named feature maps, plus colour overlays."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .data import resize_bilinear
from .fusion import HybridModel
from .tensor import Tensor


def _jet_table() -> np.ndarray:
    x = np.linspace(0.0, 1.0, 256)
    r = np.clip(1.5 - np.abs(4 * x - 3), 0, 1)
    g = np.clip(1.5 - np.abs(4 * x - 2), 0, 1)
    b = np.clip(1.5 - np.abs(4 * x - 1), 0, 1)
    return np.round(np.stack([r, g, b], axis=1) * 255).astype(np.uint8)


# 256-entry blue -> red table; endpoints (0, 0, 128) and (128, 0, 0)
JET = _jet_table()


@dataclass
class HeatMap:
    values: np.ndarray  # Hf x Wf in [0, 1]
    target_layer: str
    upsampled: np.ndarray  # S x S in [0, 1]
    probability: float
    logit: float
    degenerate: bool = False

    @property
    def predicted_class(self) -> int:
        return int(self.probability >= 0.5)


def cam_from(activations: np.ndarray, gradients: np.ndarray) -> tuple[np.ndarray, bool]:
    """ReLU(sum_k mean(grad_k) * A_k), max-normalised.

    ``activations``/``gradients`` are K x H x W. Returns ``(map, degenerate)``;
    a map with no positive entry is returned as zeros with ``degenerate=True``.
    """
    alpha = gradients.mean(axis=(1, 2))
    raw = np.maximum(np.tensordot(alpha, activations, axes=1), 0.0)
    peak = raw.max()
    if not peak > 0:
        return np.zeros_like(raw, dtype=np.float32), True
    return (raw / peak).astype(np.float32), False


def default_layer(model: HybridModel) -> str:
    if model.cnn is not None:
        return f"cnn.stage{len(model.cnn.stage) - 1}"
    return "vit.patch_embed"


def gradcam(model: HybridModel, image, target_layer: Optional[str] = None) -> HeatMap:
    """Heat map for the glaucoma logit of one 3 x S x S image."""
    layer = target_layer or default_layer(model)
    valid = model.layer_names
    if layer not in valid:
        raise KeyError(f"unknown layer {layer!r}; valid layers: {', '.join(valid)}")
    img = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float32)
    was = model.training
    model.eval()
    capture: dict = {}
    try:
        with T.Tape() as tape:
            logit = model(Tensor(img[None]), capture)
            score = T.tsum(logit)
        acts = capture[layer]
        acts.retain_grad = True
        tape.backward(score)
        grads = acts.grad if acts.grad is not None else np.zeros_like(acts.data)
    finally:
        model.zero_grad()
        model.train(was)
    values, degenerate = cam_from(acts.data[0], grads[0])
    size = img.shape[-1]
    up = np.clip(resize_bilinear(values, size, size), 0.0, 1.0).astype(np.float32)
    z = float(logit.data[0])
    return HeatMap(values, layer, up, float(T._sigmoid64(np.array(z))), z, degenerate)


def colorize(values: np.ndarray) -> np.ndarray:
    idx = np.clip(np.round(values * 255), 0, 255).astype(np.int64)
    return JET[idx]


def overlay(heat: HeatMap, original, alpha: float = 0.4) -> np.ndarray:
    """Blend ``alpha * colormap(heat) + (1 - alpha) * original`` as uint8 RGB."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    base = original.data if isinstance(original, Tensor) else np.asarray(original)
    base = base.transpose(1, 2, 0).astype(np.float64)
    color = colorize(heat.upsampled).astype(np.float64) / 255.0
    mixed = alpha * color + (1.0 - alpha) * base
    return np.clip(np.round(mixed * 255.0), 0, 255).astype(np.uint8)


def top_decile_centroid(values: np.ndarray, decile: float = 0.9) -> Optional[tuple[float, float]]:
    """(x, y) centroid of the top-decile heat region.

    The region is every pixel whose normalised heat lies in the top tenth of
    the map's range, i.e. ``values >= decile * max``. Returns ``None`` for an
    all-zero map.
    """
    peak = values.max()
    if not peak > 0:
        return None
    ys, xs = np.nonzero(values >= decile * peak)
    return float(xs.mean()), float(ys.mean())


def inside(point, bbox) -> bool:
    x, y = point
    x0, y0, x1, y1 = bbox
    return x0 <= x <= x1 and y0 <= y <= y1
