"""Command-line entry point: fixture, train, eval, gradcam, ablate."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from threadpoolctl import threadpool_limits

from . import data, gradcam as gc, metrics, training
from .config import ExperimentConfig
from .fusion import REFERENCE_ACCURACY, ROW_LABELS, HybridModel, VariantTag
from .tensor import NonFiniteError

log = logging.getLogger("fundusfuse")


class CommandError(RuntimeError):
    pass


# ------------------------------------------------------------------ helpers


def _load_config(args) -> ExperimentConfig:
    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    if getattr(args, "data", None):
        raw["data_root"] = args.data[0] if len(args.data) == 1 else list(args.data)
    if getattr(args, "layout", None):
        raw["layout"] = args.layout
    if getattr(args, "preset", None):
        raw.pop("model", None)
        raw["preset"] = args.preset
    if getattr(args, "variant", None):
        raw["variant"] = args.variant
    if args.seed is not None:
        raw["seed"] = args.seed
    if getattr(args, "epochs", None):
        raw.setdefault("train", {})["epochs"] = args.epochs
    if getattr(args, "no_augment", False):
        raw["augmentation"] = None
    return ExperimentConfig.from_dict(raw)


def _data_sources(cfg: ExperimentConfig) -> list[tuple[str, str]]:
    """``(layout, root)`` pairs; a root may be written ``LAYOUT=ROOT``."""
    roots = [cfg.data_root] if isinstance(cfg.data_root, str) else list(cfg.data_root)
    out = []
    for item in roots:
        layout, sep, root = str(item).partition("=")
        if sep and layout.upper() in data.Layout.__members__:
            out.append((layout.upper(), root))
        else:
            out.append((cfg.layout, str(item)))
    return out


def _load_data(cfg: ExperimentConfig):
    if not cfg.data_root:
        raise CommandError("no dataset given: pass --data ROOT (layout root/{train,test}/{normal,glaucoma}/*.png)")
    pairs = [data.load_dataset(root, layout, cfg.model.image_size)
             for layout, root in _data_sources(cfg)]
    return pairs[0] if len(pairs) == 1 else data.combine(*pairs)


def _prepare_out(out: Path, force: bool) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_report(out: Path, model: HybridModel, split: data.DatasetSplit, batch_size: int,
                  threshold: float) -> metrics.ClassificationReport:
    _, _, probs = training.evaluate(model, split, batch_size, threshold)
    cm = metrics.confusion((probs >= threshold).astype(int), split.labels())
    rep = metrics.report(cm)
    (out / "report.json").write_text(rep.to_json())
    (out / "report.txt").write_text(rep.to_text())
    return rep


# ----------------------------------------------------------------- commands


def cmd_fixture(out_dir, per_class: int = 8, seed: int = 0, size: int = 224, force: bool = False):
    meta = data.generate_fixture(out_dir, per_class, seed, size, force)
    print(f"wrote {len(meta['images'])} images to {out_dir}")
    return meta


def cmd_train(cfg: ExperimentConfig, out_dir, splits=None) -> training.TrainResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    train_split, test_split = splits if splits is not None else _load_data(cfg)
    (out / "dataset_summary.json").write_text(
        json.dumps(data.summary(train_split, test_split), indent=2, sort_keys=True))
    model = HybridModel(cfg.model, cfg.seed)
    result = training.train(model, train_split, test_split, cfg.train, cfg.augmentation,
                            out_dir=out, snapshot=cfg.to_dict())
    model.load_state_dict(result.best_state)
    _write_report(out, model, test_split, cfg.train.batch_size, cfg.train.threshold)
    return result


def cmd_eval(checkpoint, data_root=None, out_dir=None):
    model, manifest = training.load_checkpoint(checkpoint)
    cfg = ExperimentConfig.from_dict(manifest["config"])
    if data_root:
        cfg.data_root = data_root
    _, test_split = _load_data(cfg)
    out = Path(out_dir) if out_dir else Path(checkpoint).parent if Path(checkpoint).is_file() else Path(checkpoint)
    out.mkdir(parents=True, exist_ok=True)
    rep = _write_report(out, model, test_split, cfg.train.batch_size, cfg.train.threshold)
    print(rep.to_text(), end="")
    print(f"accuracy {rep.accuracy!r} (checkpoint recorded {manifest['test_accuracy']!r})")
    return rep, manifest


def _image_paths(items: Sequence[str]) -> list[Path]:
    paths = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            paths.extend(sorted(q for q in p.rglob("*") if q.suffix.lower() in data.SUFFIXES))
        else:
            paths.append(p)
    return paths


def cmd_gradcam(checkpoint, images: Sequence[str], out_dir, layer: Optional[str] = None,
                alpha: float = 0.4) -> list[dict]:
    model, manifest = training.load_checkpoint(checkpoint)
    size = model.config.image_size
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for path in _image_paths(images):
        with Image.open(path) as im:
            img = data.preprocess(im, size)
        heat = gc.gradcam(model, img, layer)
        ident = path.stem
        Image.fromarray(gc.colorize(heat.upsampled)).save(out / f"{ident}_heatmap.png")
        Image.fromarray(gc.overlay(heat, img, alpha)).save(out / f"{ident}_overlay.png")
        rec = {"image": str(path), "target_layer": heat.target_layer,
               "probability": heat.probability, "predicted_class": heat.predicted_class,
               "degenerate": heat.degenerate}
        (out / f"{ident}.json").write_text(json.dumps(rec, indent=2, sort_keys=True))
        records.append(rec)
    return records


@dataclass
class AblationRow:
    tag: str
    label: str
    accuracy: float  # best test accuracy, percent
    params: int
    epochs_to_best: int
    first_train_loss: float
    final_train_loss: float
    final_train_acc: float
    reference: float
    status: str = "ok"


ABLATION_FIELDS = ("variant", "tag", "best_test_accuracy_pct", "params", "epochs_to_best",
                   "first_train_loss", "final_train_loss", "final_train_acc",
                   "reference_accuracy_pct", "status")


def _run_variant(cfg_dict: dict, tag: str, out_dir: str, splits=None) -> AblationRow:
    cfg = ExperimentConfig.from_dict(cfg_dict).with_variant(tag)
    vt = VariantTag(tag)
    try:
        result = cmd_train(cfg, Path(out_dir), splits)
        params = HybridModel(cfg.model, cfg.seed).num_parameters()
        epochs = result.log.epochs
        return AblationRow(tag, ROW_LABELS[vt], 100.0 * result.best_test_acc, params,
                           result.best_epoch + 1, epochs[0].train_loss, epochs[-1].train_loss,
                           epochs[-1].train_acc, REFERENCE_ACCURACY[vt])
    except (NonFiniteError, ValueError, RuntimeError) as exc:
        log.error("variant %s failed: %s", tag, exc)
        return AblationRow(tag, ROW_LABELS[vt], math.nan, 0, 0, math.nan, math.nan, math.nan,
                           REFERENCE_ACCURACY[vt], f"failed: {exc}")


def sort_rows(rows: list[AblationRow]) -> list[AblationRow]:
    """Descending accuracy, ties broken by row label; failures last."""
    return sorted(rows, key=lambda r: (math.isnan(r.accuracy),
                                       -r.accuracy if not math.isnan(r.accuracy) else 0.0,
                                       r.label))


def ablation_csv(rows: list[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_FIELDS)
    for r in rows:
        w.writerow([r.label, r.tag, f"{r.accuracy:.2f}", r.params, r.epochs_to_best,
                    repr(r.first_train_loss), repr(r.final_train_loss), repr(r.final_train_acc),
                    f"{r.reference:.2f}", r.status])
    return buf.getvalue()


def ablation_table(rows: list[AblationRow]) -> str:
    width = max(len(r.label) for r in rows)
    lines = [f"{'Model Variant':<{width}}  {'Accuracy (%)':>12}  {'Params':>9}  "
             f"{'Best@ep':>7}  {'Published (%)':>13}"]
    for r in rows:
        acc = "failed" if math.isnan(r.accuracy) else f"{r.accuracy:.2f}"
        lines.append(f"{r.label:<{width}}  {acc:>12}  {r.params:>9d}  {r.epochs_to_best:>7d}  "
                     f"{r.reference:>13.2f}")
    return "\n".join(lines) + "\n"


def cmd_ablate(cfg: ExperimentConfig, variants: Sequence[str], out_dir, jobs: int = 1,
               splits=None) -> list[AblationRow]:
    if len(variants) < 2:
        raise CommandError("ablation needs at least two variants")
    tags = [VariantTag(v).value for v in variants]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    if splits is None:
        splits = _load_data(cfg)
    cfg_dict = cfg.to_dict()
    # a repeated tag is trained again in its own directory (a determinism check)
    runs, seen = [], {}
    for t in tags:
        seen[t] = seen.get(t, 0) + 1
        runs.append((t, t.lower() if seen[t] == 1 else f"{t.lower()}_{seen[t]}"))
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            futures = [pool.submit(_run_variant, cfg_dict, t, str(out / d), splits) for t, d in runs]
            results = [f.result() for f in futures]
    else:
        results = [_run_variant(cfg_dict, t, str(out / d), splits) for t, d in runs]
    rows = sort_rows(results)
    (out / "ablation.csv").write_text(ablation_csv(rows))
    (out / "ablation.txt").write_text(ablation_table(rows))
    print(ablation_table(rows), end="")
    return rows


# ---------------------------------------------------------------------- CLI


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment JSON file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default="runs/latest", help="output directory")
    common.add_argument("--threads", type=int, default=1,
                        help="BLAS threads (1 = deterministic reference mode)")
    common.add_argument("--force", action="store_true", help="overwrite a non-empty output")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fundusfuse", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    fx = sub.add_parser("fixture", parents=[common], help="write a synthetic fundus dataset")
    fx.add_argument("--per-class", type=int, default=8)
    fx.add_argument("--size", type=int, default=224)

    def model_args(sp):
        sp.add_argument("--data", nargs="+",
                        help="dataset root(s); prefix LAYOUT= per root to combine datasets, "
                             "e.g. ACRIMA=/data/acrima DRISHTI=/data/drishti")
        sp.add_argument("--layout", choices=[l.value for l in data.Layout])
        sp.add_argument("--preset", choices=["desk", "micro", "full", "gradcheck"])
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--no-augment", action="store_true")

    tr = sub.add_parser("train", parents=[common], help="train one model variant")
    model_args(tr)
    tr.add_argument("--variant", choices=[t.value for t in VariantTag])

    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", nargs="+",
                    help="dataset root(s) (defaults to the ones in the checkpoint)")

    gr = sub.add_parser("gradcam", parents=[common], help="export Grad-CAM heat maps")
    gr.add_argument("--checkpoint", required=True)
    gr.add_argument("--images", nargs="+", required=True, help="image files or directories")
    gr.add_argument("--layer", help="target layer (default: last CNN stage)")
    gr.add_argument("--alpha", type=float, default=0.4)

    ab = sub.add_parser("ablate", parents=[common], help="train and compare model variants")
    model_args(ab)
    ab.add_argument("--variants", nargs="+", default=[t.value for t in VariantTag],
                    choices=[t.value for t in VariantTag])
    ab.add_argument("--jobs", type=int, default=1, help="parallel variant processes")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            if args.command == "fixture":
                cmd_fixture(args.out, args.per_class, args.seed or 0, args.size, args.force)
            elif args.command == "train":
                cfg = _load_config(args)
                out = Path(args.out)
                if out.exists() and any(out.iterdir()) and not args.force:
                    raise CommandError(f"{out} is not empty; pass --force to overwrite")
                result = cmd_train(cfg, out)
                print(f"best test accuracy {result.best_test_acc:.4f} at epoch {result.best_epoch}")
            elif args.command == "eval":
                cmd_eval(args.checkpoint, args.data, args.out)
            elif args.command == "gradcam":
                recs = cmd_gradcam(args.checkpoint, args.images, args.out, args.layer, args.alpha)
                print(f"wrote {2 * len(recs)} heat map images to {args.out}")
            elif args.command == "ablate":
                cmd_ablate(_load_config(args), args.variants, args.out, args.jobs)
    except (CommandError, data.DatasetError, NonFiniteError, KeyError, FileNotFoundError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
