"""scikit-learn style wrapper around the training and inference code."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .data import SampleRecord, _resize
from .distillation import (DistillConfig, TeacherBundle, TrainConfig, make_depth_teacher,
                           student_from, train_stage1, train_stage2)
from .evaluation import fbeta, resize_prediction
from .exceptions import ConfigurationError, DimensionError
from .model import ModelConfig, build_model


def check_images(X) -> np.ndarray:
    """Return images as float32 ``[N, 3, H, W]`` in [0, 1].

    Accepts channels-first or channels-last arrays; uint8 input is scaled by
    1/255.
    """
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise DimensionError(f"expected a 4-D image batch, got shape {X.shape}")
    if X.shape[1] != 3 and X.shape[-1] == 3:
        X = np.moveaxis(X, -1, 1)
    if X.shape[1] != 3:
        raise DimensionError(f"images must have 3 channels, got shape {X.shape}")
    if X.dtype == np.uint8:
        X = X.astype(np.float32) / 255.0
    X = X.astype(np.float32)
    if not np.isfinite(X).all():
        raise ValueError("images contain NaN or infinite values")
    return np.ascontiguousarray(X)


def check_masks(y, n_samples=None, size=None) -> np.ndarray:
    """Return masks as float32 ``[N, 1, H, W]`` in {0, 1} (threshold 0.5 of
    full range)."""
    y = np.asarray(y)
    if y.ndim == 3:
        y = y[:, None]
    if y.ndim != 4 or y.shape[1] != 1:
        raise DimensionError(f"expected masks shaped [N,H,W] or [N,1,H,W], got {y.shape}")
    scale = 255.0 if y.dtype == np.uint8 else 1.0
    y = (y.astype(np.float32) / scale > 0.5).astype(np.float32)
    if n_samples is not None and len(y) != n_samples:
        raise DimensionError(f"{len(y)} masks for {n_samples} images")
    if size is not None and tuple(y.shape[-2:]) != tuple(size):
        raise DimensionError(f"mask size {y.shape[-2:]} differs from image size {size}")
    return y


class DefocusBlurDetector(ClassifierMixin, BaseEstimator):
    """Per-pixel defocus blur detector.

    ``fit`` trains a DFFNet/PDNet with the stage-1 loss. With
    ``distill=True`` it then trains a fresh student with depth feature
    distillation from the stage-1 model and a depth teacher, and the student
    becomes the fitted model; ``fit`` then requires ground-truth ``depth``.

    ``predict_proba`` returns ``[N, H, W]`` blur probabilities at input
    resolution, ``predict`` the binarised maps, ``score`` the mean F-beta.
    """

    def __init__(self, backbone="tiny", variant="dffnet", base_channels=8,
                 num_decoder_levels=4, input_size=(64, 64), max_epochs=75,
                 batch_size=6, lr=1e-4, lambda_edge=0.5, stage1_loss="bce_and_edge",
                 distill=False, stage2_loss="bce_and_edge", beta="schedule",
                 depth_channels=16, augment=True, threshold=0.5, beta_squared=0.3,
                 random_state=0):
        self.backbone = backbone
        self.variant = variant
        self.base_channels = base_channels
        self.num_decoder_levels = num_decoder_levels
        self.input_size = input_size
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lambda_edge = lambda_edge
        self.stage1_loss = stage1_loss
        self.distill = distill
        self.stage2_loss = stage2_loss
        self.beta = beta
        self.depth_channels = depth_channels
        self.augment = augment
        self.threshold = threshold
        self.beta_squared = beta_squared
        self.random_state = random_state

    def _configs(self):
        seed = 0 if self.random_state is None else int(self.random_state)
        model_cfg = ModelConfig(self.backbone, self.num_decoder_levels, self.base_channels,
                                tuple(self.input_size), self.variant).validate()
        train_cfg = TrainConfig(batch_size=self.batch_size, max_epochs=self.max_epochs,
                                lr_model=self.lr, seed=seed, stage1_loss=self.stage1_loss,
                                stage2_loss=self.stage2_loss, lambda_edge=self.lambda_edge,
                                augment=self.augment).validate()
        distill_cfg = DistillConfig(beta=self.beta, depth_channels=self.depth_channels).validate()
        return model_cfg, train_cfg, distill_cfg, seed

    def fit(self, X, y, depth=None):
        X = check_images(X)
        y = check_masks(y, len(X), X.shape[-2:])
        if depth is not None:
            depth = np.asarray(depth, np.float32)
            if depth.ndim == 3:
                depth = depth[:, None]
            if depth.shape != y.shape:
                raise DimensionError(f"depth shape {depth.shape} differs from mask shape {y.shape}")
        if self.distill and depth is None:
            raise ConfigurationError("distill=True needs ground-truth depth maps")
        model_cfg, train_cfg, distill_cfg, seed = self._configs()
        records = [SampleRecord(X[i], y[i], None if depth is None else depth[i], {})
                   for i in range(len(X))]

        teacher = build_model(model_cfg, seed=seed)
        result = train_stage1(teacher, records, train_cfg)
        self.teacher_ = result.model
        self.history_ = list(result.history)
        self.model_ = self.teacher_
        if self.distill:
            stride = self.teacher_.encoder_strides[-1]
            depth_teacher = make_depth_teacher("synthetic_oracle", self.depth_channels,
                                               [stride], seed=seed)
            bundle = TeacherBundle(self.teacher_, depth_teacher)
            student = student_from(model_cfg, seed + 1, distill_cfg, self.teacher_)
            result = train_stage2(student, bundle, records, train_cfg, distill_cfg)
            self.model_ = result.model
            self.projectors_ = result.projectors
            self.history_ += result.history
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X)
        size = self.model_.config.input_size
        self.model_.eval()
        out = []
        with torch.no_grad():
            for start in range(0, len(X), 16):
                chunk = np.stack([_resize(x, size, 1) for x in X[start:start + 16]])
                probs = self.model_(torch.from_numpy(chunk)).final_prediction.numpy()
                out.extend(resize_prediction(p, X.shape[-2:])[0] for p in probs)
        return np.stack(out)

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) > self.threshold).astype(np.uint8)

    def score(self, X, y, sample_weight=None):
        """Mean per-image F-beta at the configured threshold."""
        probs = self.predict_proba(X)
        y = check_masks(y, len(probs), probs.shape[-2:])[:, 0]
        scores = [fbeta(p, t, self.beta_squared, self.threshold) for p, t in zip(probs, y)]
        return float(np.average(scores, weights=sample_weight))
