"""Training loop, evaluation metrics and per-run seeding."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import AugmentConfig, Dataset, augment
from .diffcore import SGD, AdamW, NonFiniteError, cosine_lr, ops
from .net import DUNet, build_geometry, segment

# stream ids for the counter-based seed split
DATA, INIT, AUGMENT, ORDER = range(4)


def stream_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(stream,)).generate_state(1)[0])


def confusion_matrix(pred, labels, num_classes: int) -> np.ndarray:
    """cm[t, p] counts points of true class t predicted as p."""
    pred = np.asarray(pred, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if pred.shape != labels.shape:
        raise ValueError("prediction and label shapes differ")
    if labels.size and (labels.max() >= num_classes or pred.max() >= num_classes
                        or labels.min() < 0 or pred.min() < 0):
        raise ValueError(f"class index out of range for {num_classes} classes")
    return np.bincount(labels * num_classes + pred, minlength=num_classes**2).reshape(num_classes, num_classes)


def iou_from_confusion(cm: np.ndarray):
    """Per-class IoU = TP / (TP + FP + FN); NaN for classes absent from the ground truth."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    fp = cm.sum(0) - tp
    fn = cm.sum(1) - tp
    present = cm.sum(1) > 0
    iou = np.full(len(tp), np.nan)
    iou[present] = tp[present] / (tp + fp + fn)[present]
    return iou


def mean_iou(cm: np.ndarray) -> float:
    iou = iou_from_confusion(cm)
    if np.isnan(iou).all():
        raise ValueError("no ground-truth classes present")
    return float(np.nanmean(iou))


def metrics_from_confusion(cm: np.ndarray) -> dict:
    iou = iou_from_confusion(cm)
    total = cm.sum()
    return {
        "miou": mean_iou(cm),
        "accuracy": float(np.trace(cm) / total) if total else float("nan"),
        "per_class_iou": [None if np.isnan(v) else float(v) for v in iou],
    }


@dataclass
class TrainSettings:
    epochs: int = 20
    lr: float = 0.005
    optimizer: str = "adamw"
    weight_decay: float = 1e-4
    momentum: float = 0.9
    schedule: str = "cosine"
    label_smoothing: float = 0.2
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if not 0 <= self.label_smoothing < 1:
            raise ValueError("label smoothing must lie in [0, 1)")
        self.augment.validate()


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int, op: str):
        super().__init__(f"non-finite value at epoch {epoch} step {step} in op {op!r}")
        self.epoch, self.step, self.op = epoch, step, op


def evaluate(net: DUNet, dataset: Dataset, indices=None, geometries=None) -> dict:
    indices = dataset.test if indices is None else indices
    c = net.spec.num_classes
    if dataset.num_classes != c:
        raise ValueError(f"class-count mismatch: network has {c}, dataset has {dataset.num_classes}")
    was_training = net.training
    net.eval()
    cm = np.zeros((c, c), dtype=np.int64)
    for j, i in enumerate(indices):
        cloud = dataset.samples[i]
        geo = geometries[j] if geometries is not None else None
        pred = segment(net, cloud, geo).data.argmax(1)
        cm += confusion_matrix(pred, cloud.labels, c)
    net.train(was_training)
    out = metrics_from_confusion(cm)
    out["confusion"] = cm.tolist()
    return out


def make_optimizer(net: DUNet, settings: TrainSettings):
    params = net.parameters()
    if settings.optimizer == "adamw":
        return AdamW(params, settings.lr, weight_decay=settings.weight_decay)
    return SGD(params, settings.lr, momentum=settings.momentum, weight_decay=settings.weight_decay)


def train(net: DUNet, dataset: Dataset, settings: TrainSettings, seed: int, log=None) -> list:
    """Train in place; one cloud per step.  ``log`` receives one dict per epoch."""
    settings.validate()
    if dataset.num_classes != net.spec.num_classes:
        raise ValueError(f"class-count mismatch: network has {net.spec.num_classes}, "
                         f"dataset has {dataset.num_classes}")
    opt = make_optimizer(net, settings)
    order_rng = np.random.default_rng(stream_seed(seed, ORDER))
    aug_seed = stream_seed(seed, AUGMENT)
    test_geo = [build_geometry(net.spec, dataset.samples[i]) for i in dataset.test]
    total = settings.epochs * len(dataset.train)
    step = 0
    history = []
    net.train()
    for epoch in range(settings.epochs):
        losses = []
        for i in order_rng.permutation(dataset.train):
            cloud = dataset.samples[i]
            cloud = augment(cloud, settings.augment, (aug_seed, step))
            lr = cosine_lr(step, total, settings.lr) if settings.schedule == "cosine" else settings.lr
            try:
                logits = segment(net, cloud)
                loss = ops.cross_entropy_label_smoothing(logits, cloud.labels, settings.label_smoothing)
                opt.zero_grad()
                loss.backward()
                opt.step(lr)
            except NonFiniteError as exc:
                raise TrainingDiverged(epoch, step, exc.op) from exc
            losses.append(loss.item())
            step += 1
        metrics = evaluate(net, dataset, geometries=test_geo) if dataset.test else {}
        row = {"epoch": epoch, "loss": float(np.mean(losses)), "lr": lr,
               "test_miou": metrics.get("miou", math.nan), "test_accuracy": metrics.get("accuracy", math.nan)}
        history.append(row)
        if log is not None:
            log(row)
    return history
