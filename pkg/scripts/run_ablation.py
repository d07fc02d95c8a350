"""Train every fusion variant on one dataset and print the ablation table.

Without ``--data`` a synthetic fixture is generated first. Example::

    python scripts/run_ablation.py --per-class 16 --preset micro --epochs 40 --out runs/ablation
"""

from __future__ import annotations

import argparse
from pathlib import Path

from threadpoolctl import threadpool_limits

from fundusfuse import cli
from fundusfuse.config import ExperimentConfig
from fundusfuse.fusion import VariantTag


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--data", help="dataset root (default: generate a fixture under --out)")
    p.add_argument("--per-class", type=int, default=16)
    p.add_argument("--preset", default="micro", choices=["desk", "micro", "full"])
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--out", default="runs/ablation")
    args = p.parse_args()

    out = Path(args.out)
    root = args.data
    if root is None:
        root = out / "fixture"
        cli.cmd_fixture(root, per_class=args.per_class, seed=1, force=True)
    cfg = ExperimentConfig.from_dict({
        "data_root": str(root), "preset": args.preset, "seed": args.seed,
        "train": {"epochs": args.epochs},
        **({"augmentation": None} if args.no_augment else {}),
    })
    with threadpool_limits(args.threads):
        cli.cmd_ablate(cfg, [t.value for t in VariantTag], out / "runs", jobs=args.jobs)


if __name__ == "__main__":
    main()
