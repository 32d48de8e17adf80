"""Losses for two-stage depth-distilled defocus blur detection.

All functions take probability maps (post-sigmoid) shaped ``[B, 1, H, W]``
and return scalar tensors, so they compose with autograd.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import torch
import torch.nn.functional as F

from .exceptions import ConfigurationError, DimensionError

PROB_EPS = 1e-7
DICE_SMOOTH = 1.0


@dataclass
class LossWeights:
    lambda_edge: float = 0.5
    alpha_side: List[float] = field(default_factory=lambda: [1.0] * 4)
    beta_now: float = 0.0
    rdffnet_lambda: float = 1.0
    rdffnet_beta_side: List[float] = field(default_factory=lambda: [1.0] * 4)
    depth_loss: str = "normalized"  # or "mse"

    def __post_init__(self):
        values = [self.lambda_edge, self.beta_now, self.rdffnet_lambda,
                  *self.alpha_side, *self.rdffnet_beta_side]
        if any(v < 0 for v in values):
            raise ConfigurationError("loss weights must be non-negative")
        if self.depth_loss not in ("normalized", "mse"):
            raise ConfigurationError(f"unknown depth loss {self.depth_loss!r}")

    @classmethod
    def for_levels(cls, levels: int, **kw) -> "LossWeights":
        kw.setdefault("alpha_side", [1.0] * levels)
        kw.setdefault("rdffnet_beta_side", [1.0] * levels)
        return cls(**kw)


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shape {tuple(a.shape)} vs {tuple(b.shape)}")


def bce_loss(pred: torch.Tensor, label: torch.Tensor, eps: float = PROB_EPS) -> torch.Tensor:
    """Pixel-averaged binary cross entropy on clamped probabilities."""
    _same_shape(pred, label, "bce_loss")
    p = pred.clamp(eps, 1 - eps)
    return -(label * torch.log(p) + (1 - label) * torch.log(1 - p)).mean()


def _dilate(x):
    return F.max_pool2d(x, 3, stride=1, padding=1)


def _erode(x):
    return -F.max_pool2d(-x, 3, stride=1, padding=1)


def soft_edges(prob: torch.Tensor) -> torch.Tensor:
    """Morphological gradient of a probability map (3x3 dilation minus
    erosion); differentiable and in [0, 1]."""
    return _dilate(prob) - _erode(prob)


def extract_edges(mask: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """Binary boundary of ``mask`` after thresholding.

    A pixel is an edge pixel when its in-bounds 3x3 neighbourhood holds both
    classes.
    """
    if mask.dim() != 4 or mask.shape[1] != 1:
        raise DimensionError(f"expected [B,1,H,W] mask, got {tuple(mask.shape)}")
    binary = (mask > threshold).to(mask.dtype)
    return _dilate(binary) - _erode(binary)


def dice_edge_loss(pred_edge: torch.Tensor, label_edge: torch.Tensor,
                   smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """``1 - Dice`` per sample, averaged over the batch."""
    _same_shape(pred_edge, label_edge, "dice_edge_loss")
    dims = tuple(range(1, pred_edge.dim()))
    inter = (pred_edge * label_edge).sum(dims)
    total = pred_edge.sum(dims) + label_edge.sum(dims)
    dice = (2 * inter + smooth) / (total + smooth)
    return (1 - dice).mean()


def dbd_loss(pred: torch.Tensor, label: torch.Tensor, weights: LossWeights,
             parts: Optional[dict] = None) -> torch.Tensor:
    """BCE plus the lambda-weighted dice loss between prediction and label edges.

    When ``parts`` is given, the unweighted ``bce`` and ``edge`` terms are
    accumulated into it (as floats) for logging.
    """
    bce = bce_loss(pred, label)
    total = bce
    if weights.lambda_edge != 0 or parts is not None:
        edge = dice_edge_loss(soft_edges(pred), extract_edges(label, 0.5))
        if weights.lambda_edge != 0:
            total = bce + weights.lambda_edge * edge
        if parts is not None:
            parts["edge"] = parts.get("edge", 0.0) + edge.item()
    if parts is not None:
        parts["bce"] = parts.get("bce", 0.0) + bce.item()
    return total


def pairwise_similarity_loss(u: torch.Tensor, v: torch.Tensor,
                             eps: Optional[float] = None) -> torch.Tensor:
    """Squared distance between the L2-normalised flattened samples of ``u``
    and ``v``, averaged over the batch. Lies in [0, 4].

    A zero-norm sample raises ValueError unless ``eps`` is given, in which
    case norms are floored at ``eps``.
    """
    _same_shape(u, v, "pairwise_similarity_loss")
    a = u.reshape(u.shape[0], -1)
    b = v.reshape(v.shape[0], -1)
    na = a.norm(dim=1, keepdim=True)
    nb = b.norm(dim=1, keepdim=True)
    if eps is None:
        if bool((na == 0).any()) or bool((nb == 0).any()):
            raise ValueError("zero-norm feature in pairwise_similarity_loss")
    else:
        na = na.clamp_min(eps)
        nb = nb.clamp_min(eps)
    return ((a / na - b / nb) ** 2).sum(dim=1).mean()


def feature_distill_loss(student_feat, defocus_teacher_feat, depth_teacher_feat,
                         proj1, proj2, eps: Optional[float] = None) -> torch.Tensor:
    """Sum of the similarity losses between the two projections of the
    student feature and the (detached) defocus and depth teacher features."""
    p1 = proj1(student_feat)
    p2 = proj2(student_feat)
    if p1.shape[1] != defocus_teacher_feat.shape[1]:
        raise DimensionError(
            f"projector 1 emits {p1.shape[1]} channels, defocus teacher has "
            f"{defocus_teacher_feat.shape[1]}"
        )
    if p2.shape[1] != depth_teacher_feat.shape[1]:
        raise DimensionError(
            f"projector 2 emits {p2.shape[1]} channels, depth teacher has "
            f"{depth_teacher_feat.shape[1]}"
        )
    return (pairwise_similarity_loss(p1, defocus_teacher_feat.detach(), eps)
            + pairwise_similarity_loss(p2, depth_teacher_feat.detach(), eps))


def _check_levels(output, weights):
    if len(weights.alpha_side) != len(output.side_predictions):
        raise ConfigurationError(
            f"{len(weights.alpha_side)} side weights for "
            f"{len(output.side_predictions)} side outputs"
        )


def stage1_total(output, label, weights: LossWeights,
                 parts: Optional[dict] = None) -> torch.Tensor:
    _check_levels(output, weights)
    total = dbd_loss(output.final_prediction, label, weights, parts)
    for alpha, side in zip(weights.alpha_side, output.side_predictions):
        if alpha == 0 and parts is None:
            continue
        total = total + alpha * dbd_loss(side, label, weights, parts)
    return total


def stage2_total(output, label, distill_term: torch.Tensor, weights: LossWeights,
                 parts: Optional[dict] = None) -> torch.Tensor:
    """Stage-1 loss plus ``beta_now`` times the feature distillation loss."""
    total = stage1_total(output, label, weights, parts)
    if parts is not None:
        value = distill_term.detach() if torch.is_tensor(distill_term) else distill_term
        parts["feat"] = parts.get("feat", 0.0) + float(value)
    if weights.beta_now == 0:
        return total
    return total + weights.beta_now * distill_term


def beta_schedule(epoch: int, last_epoch: int) -> float:
    """Distillation weight for a 1-based ``epoch``: 3 up to epoch 15, then
    ``3 * (epoch - 15) / last_epoch``."""
    if last_epoch < 1 or not 1 <= epoch <= last_epoch:
        raise ValueError(f"epoch {epoch} outside [1, {last_epoch}]")
    if epoch <= 15:
        return 3.0
    return 3 * ((epoch - 15) / last_epoch)


def depth_regression_loss(pred, target, kind="normalized"):
    _same_shape(pred, target, "depth_regression_loss")
    if kind == "mse":
        return F.mse_loss(pred, target)
    return pairwise_similarity_loss(pred, target, eps=1e-12)


def rdffnet_total(output, blur_label, depth_label, weights: LossWeights,
                  parts: Optional[dict] = None) -> torch.Tensor:
    """Stage-1 loss plus depth regression on the final and side depth heads
    against depth pseudo-labels."""
    if output.depth_prediction is None or output.side_depth_predictions is None:
        raise ConfigurationError("rdffnet_total needs a model built with depth_heads=True")
    if len(weights.rdffnet_beta_side) != len(output.side_depth_predictions):
        raise ConfigurationError("rdffnet_beta_side length does not match side depth heads")
    total = stage1_total(output, blur_label, weights, parts)
    if weights.rdffnet_lambda == 0 and parts is None:
        return total
    depth = depth_regression_loss(output.depth_prediction, depth_label, weights.depth_loss)
    for b, side in zip(weights.rdffnet_beta_side, output.side_depth_predictions):
        depth = depth + b * depth_regression_loss(side, depth_label, weights.depth_loss)
    if parts is not None:
        parts["depth"] = parts.get("depth", 0.0) + depth.item()
    if weights.rdffnet_lambda == 0:
        return total
    return total + weights.rdffnet_lambda * depth
