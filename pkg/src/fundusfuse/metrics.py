"""Binary confusion matrix and a per-class classification report."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

CLASS_NAMES = ("Glaucoma", "Normal")


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with glaucoma (label 1) as the positive class."""

    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class ClassScores:
    precision: float
    recall: float
    f1: float
    support: int
    degenerate: bool = False


@dataclass
class ClassificationReport:
    classes: dict[str, ClassScores]
    accuracy: float
    macro_avg: ClassScores
    weighted_avg: ClassScores
    total: int
    degenerate_rows: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "classes": {k: asdict(v) for k, v in self.classes.items()},
            "accuracy": self.accuracy,
            "macro_avg": asdict(self.macro_avg),
            "weighted_avg": asdict(self.weighted_avg),
            "total": self.total,
            "degenerate_rows": self.degenerate_rows,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"{'Class':<14}{'Precision':>10}{'Recall':>10}{'F1-score':>10}{'Support':>9}"]
        for name, s in self.classes.items():
            lines.append(f"{name:<14}{s.precision:>10.3f}{s.recall:>10.3f}{s.f1:>10.3f}{s.support:>9d}")
        lines.append("")
        lines.append(f"{'Accuracy':<14}{'':>10}{'':>10}{self.accuracy:>10.3f}{self.total:>9d}")
        for name, s in (("Macro avg", self.macro_avg), ("Weighted avg", self.weighted_avg)):
            lines.append(f"{name:<14}{s.precision:>10.3f}{s.recall:>10.3f}{s.f1:>10.3f}{s.support:>9d}")
        return "\n".join(lines) + "\n"


def confusion(pred, label) -> ConfusionMatrix:
    pred = np.asarray(pred).astype(int).ravel()
    label = np.asarray(label).astype(int).ravel()
    if pred.shape != label.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions vs {label.size} labels")
    if not np.isin(pred, (0, 1)).all() or not np.isin(label, (0, 1)).all():
        raise ValueError("predictions and labels must be 0 or 1")
    return ConfusionMatrix(
        tp=int(((pred == 1) & (label == 1)).sum()),
        fp=int(((pred == 1) & (label == 0)).sum()),
        fn=int(((pred == 0) & (label == 1)).sum()),
        tn=int(((pred == 0) & (label == 0)).sum()),
    )


def _ratio(num: int, den: int) -> tuple[float, bool]:
    return (num / den, False) if den else (0.0, True)


def _scores(tp: int, fp: int, fn: int) -> ClassScores:
    precision, bad_p = _ratio(tp, tp + fp)
    recall, bad_r = _ratio(tp, tp + fn)
    f1, bad_f = _ratio(2 * tp, 2 * tp + fp + fn)
    return ClassScores(precision, recall, f1, tp + fn, bad_p or bad_r or bad_f)


def report(cm: ConfusionMatrix) -> ClassificationReport:
    """Per-class precision/recall/F1 (each class scored as its own positive),
    accuracy, and macro / support-weighted averages.

    Zero denominators yield 0.0 and mark the row degenerate.
    """
    if cm.total <= 0:
        raise ValueError("cannot report on an empty confusion matrix")
    glaucoma = _scores(cm.tp, cm.fp, cm.fn)
    normal = _scores(cm.tn, cm.fn, cm.fp)
    rows = {CLASS_NAMES[0]: glaucoma, CLASS_NAMES[1]: normal}
    total = cm.total

    def avg(weights):
        w = np.asarray(weights, dtype=float)
        w = w / w.sum() if w.sum() else np.full(len(w), 1.0 / len(w))
        vals = lambda attr: float(sum(wi * getattr(r, attr) for wi, r in zip(w, rows.values())))
        return ClassScores(vals("precision"), vals("recall"), vals("f1"), total)

    return ClassificationReport(
        classes=rows,
        accuracy=(cm.tp + cm.tn) / total,
        macro_avg=avg([1, 1]),
        weighted_avg=avg([r.support for r in rows.values()]),
        total=total,
        degenerate_rows=[name for name, r in rows.items() if r.degenerate],
    )
