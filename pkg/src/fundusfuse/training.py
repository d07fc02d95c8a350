"""Training protocol: BCE loss, clipped Adam with cosine-annealed learning
rate, per-epoch evaluation and best-test-accuracy checkpointing."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .data import AugmentationConfig, DatasetSplit, make_batches
from .fusion import HybridModel, ModelConfig
from .nn import Module
from .tensor import ConfigurationError, ContractError, NonFiniteError, Tensor

log = logging.getLogger(__name__)

FORMAT_VERSION = "1"
PROB_EPS = 1e-7


@dataclass
class TrainConfig:
    lr: float = 5e-4
    weight_decay: float = 1e-4
    epochs: int = 50
    batch_size: int = 16
    clip_maxnorm: float = 1.0
    seed: int = 0
    eta_min: float = 0.0
    scheduler: str = "epoch"  # "epoch" or "step" granularity
    decoupled_weight_decay: bool = True
    threshold: float = 0.5
    max_steps: Optional[int] = None

    def validate(self) -> None:
        if self.lr <= 0 or self.clip_maxnorm <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("lr, clip_maxnorm, batch_size and epochs must be positive")
        if self.weight_decay < 0 or self.eta_min < 0 or self.eta_min > self.lr:
            raise ConfigurationError("weight decay >= 0 and 0 <= eta_min <= lr required")
        if self.scheduler not in ("epoch", "step"):
            raise ConfigurationError("scheduler must be 'epoch' or 'step'")

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------- pieces


def bce_loss(prob: Tensor, label) -> Tensor:
    """Mean binary cross-entropy; probabilities clamped to [1e-7, 1 - 1e-7]."""
    y = label.data if isinstance(label, Tensor) else np.asarray(label, dtype=np.float32)
    if not np.isin(y, (0.0, 1.0)).all():
        raise ContractError("labels must be 0 or 1")
    y = Tensor(y.reshape(prob.shape))
    p = T.clamp(prob, PROB_EPS, 1.0 - PROB_EPS)
    ll = y * T.log(p) + (1.0 - y) * T.log(1.0 - p)
    return -T.mean(ll)


def global_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return math.sqrt(total)


def clip_grad_norm(params, maxnorm: float = 1.0) -> float:
    """Scale all gradients so their joint L2 norm is at most ``maxnorm``.

    Returns the applied scale (1.0 when no clipping was needed).
    """
    norm = global_norm(params)
    if not math.isfinite(norm):
        raise NonFiniteError(f"gradient norm is {norm}")
    if norm <= maxnorm:
        return 1.0
    scale = maxnorm / norm
    for p in params:
        if p.grad is not None:
            p.grad = (p.grad * scale).astype(np.float32)
    return scale


@dataclass
class OptimizerState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params) -> "OptimizerState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params, state: OptimizerState, lr_t: float, weight_decay: float = 0.0,
              decoupled: bool = True) -> None:
    """One Adam update from ``p.grad`` with bias correction.

    Decoupled decay shrinks ``p`` by ``(1 - lr_t * weight_decay)`` before the
    Adam delta; otherwise ``weight_decay * p`` is added to the gradient.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, p in enumerate(params):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if weight_decay and not decoupled:
            g = g + weight_decay * p.data
        state.m[i] = (b1 * state.m[i] + (1 - b1) * g).astype(np.float32)
        state.v[i] = (b2 * state.v[i] + (1 - b2) * g * g).astype(np.float32)
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        if weight_decay and decoupled:
            p.data *= np.float32(1.0 - lr_t * weight_decay)
        p.data -= (lr_t * m_hat / (np.sqrt(v_hat) + state.eps)).astype(np.float32)


@dataclass
class SchedulerState:
    base_lr: float
    eta_min: float
    t_max: int
    step: int = 0


def cosine_lr(t: int, state: SchedulerState) -> float:
    if t >= state.t_max:
        return state.eta_min
    return state.eta_min + 0.5 * (state.base_lr - state.eta_min) * (1 + math.cos(math.pi * t / state.t_max))


# ---------------------------------------------------------------- logging


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float


@dataclass
class StepRecord:
    epoch: int
    step: int
    lr: float
    loss: float
    grad_norm: float
    clipped_norm: float


@dataclass
class TrainingLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    steps: list[StepRecord] = field(default_factory=list)

    CSV_FIELDS = ("epoch", "lr", "train_loss", "train_acc", "test_loss", "test_acc")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.CSV_FIELDS)
        for r in self.epochs:
            writer.writerow([r.epoch, repr(r.lr), repr(r.train_loss), repr(r.train_acc),
                             repr(r.test_loss), repr(r.test_acc)])
        return buf.getvalue()


@dataclass
class TrainResult:
    log: TrainingLog
    manifest: dict
    best_state: dict
    best_epoch: int
    best_test_acc: float


# -------------------------------------------------------------- evaluation


def evaluate(model: HybridModel, split: DatasetSplit, batch_size: int = 16,
             threshold: float = 0.5):
    """Inference-mode pass in file order; returns ``(mean loss, accuracy,
    probabilities)``."""
    was = model.training
    model.eval()
    probs, losses = [], []
    for images, labels in make_batches(split, batch_size, shuffle=False):
        p = T.sigmoid(model(images))
        losses.append(float(bce_loss(p, labels).data) * len(labels))
        probs.append(p.data)
    model.train(was)
    probs = np.concatenate(probs)
    labels = split.labels()
    acc = float(np.mean((probs >= threshold).astype(np.float32) == labels))
    return sum(losses) / len(split), acc, probs


# -------------------------------------------------------------- checkpoint


def save_checkpoint(out_dir, state: dict, manifest: dict) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = T.save_tensors(state, out_dir / "checkpoint.bin")
    doc = dict(manifest, tensors=index, format_version=FORMAT_VERSION, blob="checkpoint.bin")
    (out_dir / "checkpoint.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_checkpoint(path) -> tuple[HybridModel, dict]:
    """Rebuild the model recorded in ``checkpoint.json`` and load its tensors."""
    path = Path(path)
    manifest_path = path / "checkpoint.json" if path.is_dir() else path
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format_version')!r}")
    model_cfg = ModelConfig.from_dict(manifest["config"]["model"])
    model = HybridModel(model_cfg, manifest["config"].get("seed", 0))
    state = T.load_tensors(manifest["tensors"], manifest_path.parent / manifest["blob"])
    model.load_state_dict(state)
    model.eval()
    return model, manifest


# -------------------------------------------------------------------- loop


def train(model: HybridModel, train_split: DatasetSplit, test_split: DatasetSplit,
          config: TrainConfig, augmentation: Optional[AugmentationConfig] = None,
          out_dir=None, snapshot: Optional[dict] = None,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> TrainResult:
    """Run the full protocol; the checkpoint tracks the best test accuracy.

    The checkpoint is replaced only on a strict improvement, so ties keep
    the earlier epoch. ``snapshot`` is the experiment config stored in the
    manifest (defaults to the model and train configs).
    """
    config.validate()
    params = model.parameters()
    opt = OptimizerState.for_params(params)
    steps_per_epoch = math.ceil(len(train_split) / config.batch_size)
    t_max = config.epochs if config.scheduler == "epoch" else config.epochs * steps_per_epoch
    sched = SchedulerState(config.lr, config.eta_min, t_max)
    snapshot = snapshot or {"model": model.config.to_dict(), "train": config.to_dict(),
                            "seed": config.seed}
    log_ = TrainingLog()
    best_acc, best_epoch, best_state, manifest = -1.0, -1, {}, {}
    step = 0

    for epoch in range(config.epochs):
        if config.max_steps is not None and step >= config.max_steps:
            break
        model.train()
        batches = make_batches(train_split, config.batch_size, config.seed, epoch, augmentation)
        total_loss, correct, seen = 0.0, 0, 0
        epoch_lr = cosine_lr(epoch, sched) if config.scheduler == "epoch" else None
        for images, labels in batches:
            if config.max_steps is not None and step >= config.max_steps:
                break
            lr_t = epoch_lr if epoch_lr is not None else cosine_lr(step, sched)
            model.zero_grad()
            with T.Tape() as tape:
                logits = model(images)
                prob = T.sigmoid(logits)
                loss = bce_loss(prob, labels)
            loss_val = float(loss.data)
            if not math.isfinite(loss_val):
                raise NonFiniteError(f"non-finite loss at epoch {epoch} step {step}")
            tape.backward(loss)
            norm = global_norm(params)
            if not math.isfinite(norm):
                raise NonFiniteError(f"non-finite gradient at epoch {epoch} step {step}")
            clip_grad_norm(params, config.clip_maxnorm)
            adam_step(params, opt, lr_t, config.weight_decay, config.decoupled_weight_decay)
            log_.steps.append(StepRecord(epoch, step, lr_t, loss_val, norm, global_norm(params)))
            n = len(labels)
            total_loss += loss_val * n
            correct += int(((prob.data >= config.threshold) == (labels.data == 1)).sum())
            seen += n
            step += 1
        if seen == 0:
            break
        test_loss, test_acc, _ = evaluate(model, test_split, config.batch_size, config.threshold)
        record = EpochRecord(epoch, epoch_lr if epoch_lr is not None else lr_t,
                             total_loss / seen, correct / seen, test_loss, test_acc)
        log_.epochs.append(record)
        log.info("epoch %d lr %.3g train %.4f/%.3f test %.4f/%.3f", epoch, record.lr,
                 record.train_loss, record.train_acc, test_loss, test_acc)
        if on_epoch is not None:
            on_epoch(record)
        if test_acc > best_acc:
            best_acc, best_epoch = test_acc, epoch
            best_state = model.state_dict()
            manifest = {"variant": model.tag.value, "config": snapshot, "epoch": epoch,
                        "test_accuracy": test_acc}
            if out_dir is not None:
                save_checkpoint(out_dir, best_state, manifest)
    if out_dir is not None:
        Path(out_dir, "training_log.csv").write_text(log_.to_csv())
    return TrainResult(log_, manifest, best_state, best_epoch, best_acc)
