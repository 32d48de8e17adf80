"""Binary-map metrics for defocus blur detection: MAE, F-beta, IoU and
micro-averaged precision/recall curves.

Predictions are binarised with a strict ``pred > threshold``; labels with
``label > 0.5``. Defocus (blur) pixels are the positive class.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .exceptions import DimensionError

DEFAULT_THRESHOLDS = tuple(round(i / 20, 10) for i in range(21))


@dataclass
class MetricConfig:
    beta_squared: float = 0.3
    binarize_threshold: float = 0.5
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS
    positive_class: str = "defocus"


@dataclass
class MetricsReport:
    mae: float
    f_beta: float
    iou: float
    thresholds: List[float]
    precision: List[float]
    recall: List[float]
    n_images: int
    config_echo: dict = field(default_factory=dict)

    def summary_line(self) -> str:
        return (f"mae={self.mae!r} f_beta={self.f_beta!r} iou={self.iou!r} "
                f"n_images={self.n_images}")

    def to_text(self) -> str:
        lines = [
            f"mae: {self.mae!r}",
            f"f_beta: {self.f_beta!r}",
            f"iou: {self.iou!r}",
            f"n_images: {self.n_images}",
        ]
        for k in sorted(self.config_echo):
            lines.append(f"config.{k}: {self.config_echo[k]!r}")
        lines.append("pr_thresholds: " + ",".join(repr(float(t)) for t in self.thresholds))
        lines.append("pr_precision: " + ",".join(repr(float(p)) for p in self.precision))
        lines.append("pr_recall: " + ",".join(repr(float(r)) for r in self.recall))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        import ast

        fields = {}
        echo = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition(": ")
            if key.startswith("config."):
                echo[key[len("config."):]] = ast.literal_eval(value)
            elif key.startswith("pr_"):
                fields[key] = [float(v) for v in value.split(",")] if value else []
            else:
                fields[key] = ast.literal_eval(value)
        return cls(mae=fields["mae"], f_beta=fields["f_beta"], iou=fields["iou"],
                   thresholds=fields["pr_thresholds"], precision=fields["pr_precision"],
                   recall=fields["pr_recall"], n_images=fields["n_images"],
                   config_echo=echo)

    @classmethod
    def read(cls, path) -> "MetricsReport":
        return cls.from_text(Path(path).read_text())


def _as_pair(pred, label):
    pred = np.asarray(pred, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    if pred.shape != label.shape:
        raise DimensionError(f"prediction {pred.shape} vs label {label.shape}")
    return pred, label


def confusion_counts(pred, label, threshold=0.5):
    """(TP, FP, FN, TN) with ``pred > threshold`` positive and ``label > 0.5``
    positive."""
    pred, label = _as_pair(pred, label)
    p = pred > threshold
    g = label > 0.5
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return tp, fp, fn, p.size - tp - fp - fn


def mae(pred, label) -> float:
    pred, label = _as_pair(pred, label)
    return float(np.mean(np.abs(pred - label)))


def fbeta_from_counts(tp, fp, fn, beta_squared=0.3) -> float:
    if tp + fp == 0 and tp + fn == 0:
        return 1.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    denom = beta_squared * precision + recall
    if denom == 0:
        return 0.0
    return (1 + beta_squared) * precision * recall / denom


def fbeta(pred, label, beta_squared: float = 0.3, binarize_threshold: float = 0.5) -> float:
    tp, fp, fn, _ = confusion_counts(pred, label, binarize_threshold)
    return fbeta_from_counts(tp, fp, fn, beta_squared)


def iou(pred, label, binarize_threshold: float = 0.5) -> float:
    tp, fp, fn, _ = confusion_counts(pred, label, binarize_threshold)
    union = tp + fp + fn
    return 1.0 if union == 0 else tp / union


def pr_curve(preds: Sequence, labels: Sequence, thresholds: Sequence[float]):
    """Dataset precision/recall per threshold from confusion counts summed
    over all images (micro average). Returns ``(precision, recall)`` arrays."""
    if len(preds) == 0:
        raise ValueError("pr_curve needs at least one image")
    if len(preds) != len(labels):
        raise DimensionError("preds and labels differ in length")
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if np.any(np.diff(thresholds) <= 0) or thresholds.min() < 0 or thresholds.max() > 1:
        raise ValueError("thresholds must be strictly increasing within [0, 1]")
    tp = np.zeros(len(thresholds), np.int64)
    fp = np.zeros_like(tp)
    fn = np.zeros_like(tp)
    for pred, label in zip(preds, labels):
        pred, label = _as_pair(pred, label)
        g = (label > 0.5).ravel()
        p = pred.ravel()
        # pixels with pred > t, counted per threshold via sorted search
        pos = np.sort(p[g])
        neg = np.sort(p[~g])
        tp_t = pos.size - np.searchsorted(pos, thresholds, side="right")
        fp_t = neg.size - np.searchsorted(neg, thresholds, side="right")
        tp += tp_t
        fp += fp_t
        fn += pos.size - tp_t
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1), 0.0)
        recall = np.where(tp + fn > 0, tp / np.maximum(tp + fn, 1), 0.0)
    return precision.astype(np.float64), recall.astype(np.float64)


def resize_prediction(pred: np.ndarray, size) -> np.ndarray:
    """Bilinear resize of a ``[..., H, W]`` probability map to ``size``."""
    import torch
    import torch.nn.functional as F

    if tuple(np.shape(pred)[-2:]) == tuple(size):
        return np.asarray(pred)
    pred = np.asarray(pred, dtype=np.float32)
    t = torch.from_numpy(pred.reshape(1, 1, *pred.shape[-2:]))
    out = F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False)
    return out.numpy().reshape(*pred.shape[:-2], *size)


def evaluate_predictions(preds: Sequence, labels: Sequence,
                         config: Optional[MetricConfig] = None) -> MetricsReport:
    """Per-image MAE/F-beta/IoU averaged over images; PR curve micro-averaged."""
    config = config or MetricConfig()
    if len(preds) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    preds = [resize_prediction(p, np.shape(l)[-2:]) for p, l in zip(preds, labels)]
    maes = [mae(p, l) for p, l in zip(preds, labels)]
    fbs = [fbeta(p, l, config.beta_squared, config.binarize_threshold)
           for p, l in zip(preds, labels)]
    ious = [iou(p, l, config.binarize_threshold) for p, l in zip(preds, labels)]
    precision, recall = pr_curve(preds, labels, config.thresholds)
    return MetricsReport(
        mae=float(np.mean(maes)), f_beta=float(np.mean(fbs)), iou=float(np.mean(ious)),
        thresholds=[float(t) for t in config.thresholds],
        precision=precision.tolist(), recall=recall.tolist(),
        n_images=len(preds),
        config_echo={"beta_squared": float(config.beta_squared),
                     "binarize_threshold": float(config.binarize_threshold),
                     "positive_class": config.positive_class},
    )


def predict_records(model, records, batch_size: int = 8) -> List[np.ndarray]:
    """Run ``model`` over records and return ``[1,H,W]`` probability maps at
    each record's label resolution.

    ``model`` is either a DBDNet (images are resized to its input size) or
    any callable mapping a list of records to probability maps.
    """
    import torch

    from .data import _resize
    from .model import DBDNet

    if not isinstance(model, DBDNet):
        return [np.asarray(p, np.float32) for p in model(records)]
    size = model.config.input_size
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(records), batch_size):
            chunk = records[start:start + batch_size]
            x = torch.from_numpy(np.stack([_resize(r.image, size, 1) for r in chunk]))
            probs = model(x).final_prediction.numpy()
            for r, p in zip(chunk, probs):
                out.append(resize_prediction(p, r.blur_label.shape[-2:]))
    return out


def evaluate_dataset(model, records, config: Optional[MetricConfig] = None) -> MetricsReport:
    preds = predict_records(model, records)
    return evaluate_predictions(preds, [r.blur_label for r in records], config)


def plot_pr_curve(report: MetricsReport, path, label: str = "model") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(report.recall, report.precision, marker=".", label=label)
    ax.set_xlabel("Recall")
    ax.set_ylabel("Precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower left")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
