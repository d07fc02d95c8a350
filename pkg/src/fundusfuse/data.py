"""Fundus image loading, preprocessing, augmentation and batching.

On-disk layout (shared by real datasets and the synthetic fixture)::

    root/{train,test}/{normal,glaucoma}/*.{png,jpg,jpeg}
"""

from __future__ import annotations

import json
import logging
import math
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .tensor import ConfigurationError, Tensor

log = logging.getLogger(__name__)

IMAGE_SIZE = 224
CLASSES = ("normal", "glaucoma")  # index == label
SPLITS = ("train", "test")
SUFFIXES = {".png", ".jpg", ".jpeg"}
FIXTURE_META = "fixture_meta.json"


class Layout(str, Enum):
    ACRIMA = "ACRIMA"
    DRISHTI = "DRISHTI"
    SYNTHETIC = "SYNTHETIC"


class Role(str, Enum):
    TRAIN = "TRAIN"
    TEST = "TEST"


class DatasetError(RuntimeError):
    pass


@dataclass
class LabeledExample:
    image: np.ndarray  # float32, 3 x S x S, values in [0, 1]
    label: int
    source: str
    id: str


@dataclass
class DatasetSplit:
    examples: list[LabeledExample]
    role: Role
    skipped: list[str] = field(default_factory=list)

    @property
    def counts(self) -> dict[str, int]:
        tally = {name: 0 for name in CLASSES}
        for ex in self.examples:
            tally[CLASSES[ex.label]] += 1
        return tally

    @property
    def raw_count(self) -> int:
        """Files found on disk, including ones that failed to decode."""
        return len(self.examples) + len(self.skipped)

    def __len__(self) -> int:
        return len(self.examples)

    def labels(self) -> np.ndarray:
        return np.array([ex.label for ex in self.examples], dtype=np.float32)

    def images(self) -> np.ndarray:
        return np.stack([ex.image for ex in self.examples])


# ----------------------------------------------------------- preprocessing


def to_rgb(raw) -> np.ndarray:
    """Coerce a PIL image or uint8 array to H x W x 3 uint8."""
    if isinstance(raw, Image.Image):
        return np.asarray(raw.convert("RGB"))
    arr = np.asarray(raw)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    elif arr.ndim == 3 and arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    elif arr.ndim == 3 and arr.shape[2] == 4:
        arr = arr[:, :, :3]
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DatasetError(f"cannot interpret array of shape {arr.shape} as an image")
    return np.ascontiguousarray(arr.astype(np.uint8))


def preprocess(raw, size: int = IMAGE_SIZE) -> np.ndarray:
    """Bilinear resize to ``size`` x ``size`` and scale to [0, 1]; returns CHW float32."""
    rgb = to_rgb(raw)
    if rgb.shape[0] < 1 or rgb.shape[1] < 1:
        raise DatasetError("image has an empty dimension")
    if rgb.shape[:2] != (size, size):
        rgb = np.asarray(Image.fromarray(rgb).resize((size, size), Image.BILINEAR))
    return (rgb.astype(np.float32) / 255.0).transpose(2, 0, 1).copy()


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling of a (..., H, W) array, half-pixel centres."""
    h, w = img.shape[-2:]
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(img.dtype)[:, None]
    wx = (xs - x0).astype(img.dtype)[None, :]
    top = img[..., y0, :][..., x0] * (1 - wx) + img[..., y0, :][..., x1] * wx
    bot = img[..., y1, :][..., x0] * (1 - wx) + img[..., y1, :][..., x1] * wx
    return top * (1 - wy) + bot * wy


# ------------------------------------------------------------- augmentation


@dataclass
class AugmentationConfig:
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    jitter_p: float = 0.8
    hflip_p: float = 0.5
    rotation_deg: float = 15.0
    translate: float = 0.05
    scale: tuple = (0.9, 1.1)
    affine_p: float = 0.5
    blur_kernel: int = 5
    blur_sigma: tuple = (0.1, 1.5)
    blur_p: float = 0.3
    crop_scale: tuple = (0.8, 1.0)
    crop_ratio: tuple = (3 / 4, 4 / 3)
    crop_p: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.scale = tuple(self.scale)
        self.blur_sigma = tuple(self.blur_sigma)
        self.crop_scale = tuple(self.crop_scale)
        self.crop_ratio = tuple(self.crop_ratio)
        for name in ("jitter_p", "hflip_p", "affine_p", "blur_p", "crop_p"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"{name} must be a probability")
        for name in ("scale", "blur_sigma", "crop_scale", "crop_ratio"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ConfigurationError(f"{name} must be an ordered non-negative range")
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise ConfigurationError("blur kernel size must be odd and positive")

    @classmethod
    def identity(cls, **overrides) -> "AugmentationConfig":
        base = cls(brightness=0.0, contrast=0.0, saturation=0.0, jitter_p=0.0, hflip_p=0.0,
                   rotation_deg=0.0, translate=0.0, scale=(1.0, 1.0), affine_p=0.0,
                   blur_p=0.0, crop_scale=(1.0, 1.0), crop_ratio=(1.0, 1.0), crop_p=0.0)
        return replace(base, **overrides)

    def to_dict(self) -> dict:
        return asdict(self)


def _random_resized_crop(img, rng, cfg):
    _, h, w = img.shape
    area = h * w
    log_r = (math.log(cfg.crop_ratio[0]), math.log(cfg.crop_ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(*cfg.crop_scale)
        ratio = math.exp(rng.uniform(*log_r))
        cw = int(round(math.sqrt(target * ratio)))
        ch = int(round(math.sqrt(target / ratio)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            if (ch, cw) == (h, w):
                return img
            return resize_bilinear(img[:, top:top + ch, left:left + cw], h, w)
    return img


def _affine(img, rng, cfg):
    _, h, w = img.shape
    angle = math.radians(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
    tx = rng.uniform(-cfg.translate, cfg.translate) * w
    ty = rng.uniform(-cfg.translate, cfg.translate) * h
    s = rng.uniform(*cfg.scale)
    # output -> input mapping: inverse of (rotate by angle, scale by s, shift)
    c, si = math.cos(angle), math.sin(angle)
    inv = np.array([[c, si], [-si, c]]) / s
    centre = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = centre - inv @ (centre + np.array([ty, tx]))
    return np.stack([ndimage.affine_transform(ch, inv, offset=offset, order=1, mode="constant")
                     for ch in img]).astype(np.float32)


def _jitter(img, rng, cfg):
    b = rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)
    c = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)
    s = rng.uniform(1 - cfg.saturation, 1 + cfg.saturation)
    img = np.clip(img * b, 0, 1)
    gray = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    img = np.clip((img - gray.mean()) * c + gray.mean(), 0, 1)
    gray = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    return ((img - gray) * s + gray).astype(np.float32)


def _blur(img, rng, cfg):
    sigma = rng.uniform(*cfg.blur_sigma)
    if sigma <= 0:
        return img
    radius = (cfg.blur_kernel - 1) / 2
    return np.stack([ndimage.gaussian_filter(ch, sigma, mode="reflect", truncate=radius / sigma)
                     for ch in img]).astype(np.float32)


def augment(example: LabeledExample, rng: np.random.Generator,
            config: AugmentationConfig) -> LabeledExample:
    """Random resized crop, affine, flip, colour jitter, blur; clamp to [0, 1].

    Each stage fires with its own probability; a stage with probability 0 is
    skipped entirely, so the identity configuration returns the input bits.
    """
    img = example.image
    if config.crop_p > 0 and rng.random() < config.crop_p:
        img = _random_resized_crop(img, rng, config)
    if config.affine_p > 0 and rng.random() < config.affine_p:
        img = _affine(img, rng, config)
    if config.hflip_p > 0 and rng.random() < config.hflip_p:
        img = img[:, :, ::-1]
    if config.jitter_p > 0 and rng.random() < config.jitter_p:
        img = _jitter(img, rng, config)
    if config.blur_p > 0 and rng.random() < config.blur_p:
        img = _blur(img, rng, config)
    img = np.ascontiguousarray(np.clip(img, 0.0, 1.0), dtype=np.float32)
    return replace(example, image=img)


# ------------------------------------------------------------------ loading


def _class_files(folder: Path) -> list[Path]:
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in SUFFIXES)


def load_split(root: Path, split: str, layout: Layout, size: int = IMAGE_SIZE) -> DatasetSplit:
    out = DatasetSplit([], Role.TRAIN if split == "train" else Role.TEST)
    for label, cls in enumerate(CLASSES):
        folder = Path(root) / split / cls
        if not folder.is_dir():
            raise DatasetError(
                f"missing folder {folder}; expected layout root/{{train,test}}/{{normal,glaucoma}}/*.png|jpg")
        files = _class_files(folder)
        if not files:
            raise DatasetError(f"class folder {folder} contains no images")
        for path in files:
            try:
                with Image.open(path) as im:
                    image = preprocess(im, size)
            except (UnidentifiedImageError, OSError, DatasetError) as exc:
                log.warning("skipping unreadable image %s: %s", path, exc)
                out.skipped.append(str(path))
                continue
            rel = f"{split}/{cls}/{path.name}"
            out.examples.append(LabeledExample(image, label, layout.value, f"{layout.value}:{rel}"))
    return out


def load_dataset(root, layout=Layout.SYNTHETIC, size: int = IMAGE_SIZE):
    """Return ``(train, test)`` splits read from ``root``."""
    layout = Layout(layout)
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(
            f"dataset root {root} not found; expected root/{{train,test}}/{{normal,glaucoma}}/*.png|jpg")
    train = load_split(root, "train", layout, size)
    test = load_split(root, "test", layout, size)
    overlap = {e.id for e in train.examples} & {e.id for e in test.examples}
    if overlap:
        raise DatasetError(f"examples present in both splits: {sorted(overlap)[:3]}")
    return train, test


def combine(*pairs) -> tuple[DatasetSplit, DatasetSplit]:
    """Concatenate several ``(train, test)`` pairs into one pair."""
    train = DatasetSplit([e for tr, _ in pairs for e in tr.examples], Role.TRAIN,
                         [s for tr, _ in pairs for s in tr.skipped])
    test = DatasetSplit([e for _, te in pairs for e in te.examples], Role.TEST,
                        [s for _, te in pairs for s in te.skipped])
    return train, test


def summary(train: DatasetSplit, test: DatasetSplit) -> dict:
    """{split -> class -> count} plus totals and skipped-file counts."""
    out = {}
    for name, split in (("train", train), ("test", test)):
        out[name] = dict(split.counts, total=len(split), skipped=len(split.skipped),
                         raw=split.raw_count)
    out["overall"] = {cls: train.counts[cls] + test.counts[cls] for cls in CLASSES}
    out["overall"]["total"] = len(train) + len(test)
    return out


# ----------------------------------------------------------------- batching


def epoch_order(split: DatasetSplit, shuffle_seed: int, epoch: int = 0) -> np.ndarray:
    n = len(split)
    if split.role == Role.TEST:
        return np.arange(n)
    return np.random.default_rng([shuffle_seed, epoch]).permutation(n)


def make_batches(split: DatasetSplit, batch_size: int, shuffle_seed: int = 0, epoch: int = 0,
                 augmentation: Optional[AugmentationConfig] = None,
                 workers: int = 1, shuffle: Optional[bool] = None) -> list[tuple[Tensor, Tensor]]:
    """Partition one epoch into ``(images B x 3 x S x S, labels B)`` batches.

    TRAIN splits are permuted by ``(shuffle_seed, epoch)``; TEST keeps file
    order. ``shuffle`` overrides the role-based default. Augmentation (TRAIN only) draws from a per-example generator keyed
    by ``(seed, epoch, example index)``, so results do not depend on
    ``workers``.
    """
    if batch_size < 1:
        raise ConfigurationError("batch size must be at least 1")
    if not split.examples:
        raise DatasetError("cannot batch an empty split")
    if shuffle is None or shuffle == (split.role == Role.TRAIN):
        order = epoch_order(split, shuffle_seed, epoch)
    elif shuffle:
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(len(split))
    else:
        order = np.arange(len(split))
    use_aug = augmentation is not None and split.role == Role.TRAIN

    def fetch(i: int) -> np.ndarray:
        ex = split.examples[i]
        if use_aug:
            rng = np.random.default_rng([augmentation.seed, epoch, int(i)])
            ex = augment(ex, rng, augmentation)
        return ex.image

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            images = list(pool.map(fetch, order))
    else:
        images = [fetch(i) for i in order]
    labels = np.array([split.examples[i].label for i in order], dtype=np.float32)
    batches = []
    for start in range(0, len(order), batch_size):
        stop = start + batch_size
        batches.append((Tensor(np.stack(images[start:stop])), Tensor(labels[start:stop])))
    return batches


# ----------------------------------------------------------------- fixtures


def _ellipse_mask(h, w, cy, cx, ry, rx):
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def draw_fundus(rng: np.random.Generator, glaucoma: bool, size: int = IMAGE_SIZE):
    """Procedural fundus: orange retina, yellow optic disc, pale cup.

    Glaucoma draws a cup/disc area ratio in [0.65, 0.8]; normal in [0.15, 0.35].
    Returns ``(uint8 H x W x 3, metadata)``.
    """
    s = size
    img = np.zeros((s, s, 3), dtype=np.float64)
    retina = _ellipse_mask(s, s, (s - 1) / 2, (s - 1) / 2, 0.47 * s, 0.47 * s)
    yy, xx = np.mgrid[0:s, 0:s]
    r = np.hypot(yy - (s - 1) / 2, xx - (s - 1) / 2) / (0.47 * s)
    shade = 1.0 - 0.35 * r ** 2
    base = np.array([0.72, 0.30, 0.12]) * rng.uniform(0.9, 1.1)
    img[retina] = (shade[retina, None] * base)
    img[retina] += rng.normal(0.0, 0.02, (int(retina.sum()), 3))

    cx = rng.uniform(0.32, 0.68) * s
    cy = rng.uniform(0.35, 0.65) * s
    rx = rng.uniform(0.09, 0.12) * s
    ry = rx * rng.uniform(0.9, 1.1)
    ratio = rng.uniform(0.65, 0.8) if glaucoma else rng.uniform(0.15, 0.35)
    k = math.sqrt(ratio)
    disc = _ellipse_mask(s, s, cy, cx, ry, rx)
    cup = _ellipse_mask(s, s, cy, cx, ry * k, rx * k)
    img[disc] = np.array([0.92, 0.66, 0.30])
    img[cup] = np.array([1.0, 0.98, 0.88])
    img = np.clip(img, 0.0, 1.0)
    meta = {
        "label": int(glaucoma),
        "disc_bbox": [cx - rx, cy - ry, cx + rx, cy + ry],  # x0, y0, x1, y1
        "cup_disc_ratio": ratio,
        "drawn_cup_disc_ratio": float(cup.sum() / disc.sum()),
    }
    return (img * 255.0 + 0.5).astype(np.uint8), meta


def generate_fixture(out_dir, per_class: int = 8, seed: int = 0, size: int = IMAGE_SIZE,
                     force: bool = False) -> dict:
    """Write a synthetic dataset in the standard layout plus a metadata file."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise DatasetError(f"{out} is not empty; pass force to overwrite")
        shutil.rmtree(out)
    meta = {"seed": seed, "per_class": per_class, "size": size, "images": {}}
    for si, split in enumerate(SPLITS):
        for label, cls in enumerate(CLASSES):
            folder = out / split / cls
            folder.mkdir(parents=True, exist_ok=True)
            for i in range(per_class):
                rng = np.random.default_rng([seed, si, label, i])
                pixels, info = draw_fundus(rng, bool(label), size)
                name = f"{cls}_{i:04d}.png"
                Image.fromarray(pixels).save(folder / name, optimize=False)
                meta["images"][f"{split}/{cls}/{name}"] = info
    (out / FIXTURE_META).write_text(json.dumps(meta, indent=2, sort_keys=True))
    return meta


def load_fixture_meta(root) -> dict:
    return json.loads((Path(root) / FIXTURE_META).read_text())["images"]
