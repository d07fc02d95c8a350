"""Measure how often Grad-CAM heat lands on the drawn optic disc.

Trains one model on a synthetic fixture, then, for every correctly classified
image (train and test), checks whether the centroid of the hottest region
falls inside the disc bounding box recorded by the fixture generator. The rate
is printed for every CNN layer and for two readings of "hottest region":

* ``value``: pixels with heat >= 0.9 * max (the reading the library uses);
* ``rank``: the 10% of pixels with the highest heat.
"""

from __future__ import annotations

import argparse
import tempfile

import numpy as np

from fundusfuse import data, gradcam, training
from fundusfuse.fusion import HybridModel, ModelConfig, VariantTag

AUGMENTATIONS = {
    "none": None,
    "geometric": dict(jitter_p=0.0, blur_p=0.0, crop_p=0.0, rotation_deg=0.0,
                      scale=(1.0, 1.0), translate=0.1),
    "default": {},
}


def rank_centroid(values: np.ndarray, fraction: float = 0.1):
    if not values.max() > 0:
        return None
    ys, xs = np.nonzero(values >= np.quantile(values, 1.0 - fraction))
    return float(xs.mean()), float(ys.mean())


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--per-class", type=int, default=32)
    p.add_argument("--variant", default=VariantTag.CROSS_ATTENTION.value)
    p.add_argument("--epochs", type=int, default=120)
    p.add_argument("--augment", choices=sorted(AUGMENTATIONS), default="default")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    root = tempfile.mkdtemp(prefix="fundusfuse_loc_")
    data.generate_fixture(root, per_class=args.per_class, seed=1, force=True)
    train, test = data.load_dataset(root)
    meta = data.load_fixture_meta(root)
    aug = AUGMENTATIONS[args.augment]
    aug = None if aug is None else data.AugmentationConfig(seed=args.seed, **aug)
    model = HybridModel(ModelConfig.preset("micro", args.variant), args.seed)
    result = training.train(model, train, test,
                            training.TrainConfig(epochs=args.epochs, seed=args.seed), aug)
    last = result.log.epochs[-1]
    print(f"{args.variant}: final train loss {last.train_loss:.4f}, test acc {last.test_acc:.3f}")

    model.eval()
    layers = [n for n in model.layer_names if n.startswith("cnn.")]
    print(f"{'layer':14s} {'correct':>7s} {'value':>7s} {'rank':>7s}")
    for layer in layers:
        hits = {"value": 0, "rank": 0}
        correct = 0
        for ex in train.examples + test.examples:
            heat = gradcam.gradcam(model, ex.image, layer)
            if heat.predicted_class != ex.label:
                continue
            correct += 1
            box = meta[ex.id.split(":", 1)[1]]["disc_bbox"]
            for name, fn in (("value", gradcam.top_decile_centroid), ("rank", rank_centroid)):
                c = fn(heat.upsampled)
                hits[name] += c is not None and gradcam.inside(c, box)
        rate = {k: v / correct if correct else 0.0 for k, v in hits.items()}
        print(f"{layer:14s} {correct:7d} {rate['value']:7.1%} {rate['rank']:7.1%}")


if __name__ == "__main__":
    main()
