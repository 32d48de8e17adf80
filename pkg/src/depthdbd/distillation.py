"""Training: stage-1 defocus teacher, stage-2 depth feature distillation into a
student, and the response-based R-DFFNet baseline.

All loops share the same plumbing: Adam on the model with a per-iteration
poly learning-rate policy, deterministic shuffling/augmentation derived from
``(seed, epoch, index)``, a JSON-lines history (one line per epoch) and a
resumable checkpoint written after every epoch.
"""
from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import losses as L
from .data import SampleRecord, augment
from .exceptions import ConfigurationError, NonFiniteLossError
from .model import DBDNet, ModelConfig, build_model, read_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

LOSS_KINDS = ("bce", "bce_and_edge")


@dataclass
class TrainConfig:
    batch_size: int = 6
    max_epochs: int = 75
    lr_model: float = 1e-4
    lr_poly_power: float = 0.9
    lr_projector: float = 1e-1
    wd_projector: float = 5e-4
    seed: int = 0
    stage1_loss: str = "bce_and_edge"
    stage2_loss: str = "bce_and_edge"
    lambda_edge: float = 0.5
    augment: bool = True
    flip_prob: float = 0.5
    jitter: float = 0.2

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigurationError("batch_size and max_epochs must be >= 1")
        if self.lr_model < 0 or self.lr_projector < 0 or self.wd_projector < 0:
            raise ConfigurationError("learning rates and weight decay must be >= 0")
        for kind in (self.stage1_loss, self.stage2_loss):
            if kind not in LOSS_KINDS:
                raise ConfigurationError(f"unknown loss kind {kind!r}; use {LOSS_KINDS}")
        return self

    def lambda_for(self, kind: str) -> float:
        return self.lambda_edge if kind == "bce_and_edge" else 0.0


@dataclass
class DistillConfig:
    defocus_teacher: Optional[str] = None     # stage-1 checkpoint path
    depth_teacher: str = "synthetic_oracle"   # or "external_checkpoint"
    depth_checkpoint: Optional[str] = None
    depth_channels: int = 16
    beta: Union[str, float] = "schedule"      # "schedule" or a constant
    taps: str = "final"                       # "final" or "all" encoder stages
    warm_start: bool = False
    norm_eps: Optional[float] = None

    def validate(self) -> "DistillConfig":
        if self.depth_teacher not in ("synthetic_oracle", "external_checkpoint"):
            raise ConfigurationError(f"unknown depth teacher {self.depth_teacher!r}")
        if self.taps not in ("final", "all"):
            raise ConfigurationError(f"taps must be 'final' or 'all', not {self.taps!r}")
        if self.beta != "schedule":
            try:
                if float(self.beta) < 0:
                    raise ValueError
            except (TypeError, ValueError):
                raise ConfigurationError("beta must be 'schedule' or a number >= 0")
        if self.depth_channels < 1:
            raise ConfigurationError("depth_channels must be >= 1")
        return self

    def beta_at(self, epoch: int, last_epoch: int) -> float:
        if self.beta == "schedule":
            return L.beta_schedule(epoch, last_epoch)
        return float(self.beta)


def poly_lr(base_lr: float, iteration: int, max_iter: int, power: float = 0.9) -> float:
    return base_lr * (1 - iteration / max_iter) ** power


# -- teachers and projectors -------------------------------------------------

class Projector(nn.Module):
    """1x1 convolution mapping student channels to a teacher's channels."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 1)

    @property
    def out_channels(self) -> int:
        return self.conv.out_channels

    def forward(self, x):
        return self.conv(x)


def _freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def _inverse_depth(depth: torch.Tensor) -> torch.Tensor:
    inv = 1.0 / depth
    flat = inv.flatten(1)
    lo = flat.min(1).values.view(-1, 1, 1, 1)
    hi = flat.max(1).values.view(-1, 1, 1, 1)
    span = hi - lo
    return torch.where(span > 1e-12, (inv - lo) / span.clamp_min(1e-12), torch.ones_like(inv))


class SyntheticDepthTeacher(nn.Module):
    """Frozen stand-in for a monocular depth network on synthetic data.

    Encodes the normalised inverse ground-truth depth with a fixed random
    3x3 convolution + tanh at each requested output stride.
    """

    def __init__(self, channels: int, strides: Sequence[int], seed: int = 0):
        super().__init__()
        self.channels = channels
        self.strides = list(strides)
        g = torch.Generator().manual_seed(seed)
        self.convs = nn.ModuleList()
        for _ in self.strides:
            conv = nn.Conv2d(2, channels, 3, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * 0.5)
                conv.bias.copy_(torch.randn(conv.bias.shape, generator=g) * 0.1)
            self.convs.append(conv)
        _freeze(self)

    def depth_map(self, images, depth=None):
        if depth is None:
            raise ConfigurationError("the synthetic depth teacher needs ground-truth depth")
        return _inverse_depth(depth)

    def forward(self, images, depth=None) -> List[torch.Tensor]:
        inv = self.depth_map(images, depth)
        x = torch.cat([inv, 1 - inv], dim=1)
        return [torch.tanh(conv(F.avg_pool2d(x, s))) for conv, s in zip(self.convs, self.strides)]

    def train(self, mode: bool = True):
        return super().train(False)


class ExternalDepthTeacher(nn.Module):
    """Frozen TorchScript depth model.

    The scripted module maps ``[B,3,H,W]`` images to a feature tensor, a list
    of per-stage features (shallow to deep), or a dict with ``"features"``
    and ``"depth"`` entries.
    """

    def __init__(self, path):
        super().__init__()
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"depth teacher checkpoint {path} not found")
        self.net = torch.jit.load(str(path), map_location="cpu")
        _freeze(self)

    def _run(self, images):
        out = self.net(images)
        if isinstance(out, dict):
            return out
        if isinstance(out, torch.Tensor):
            return {"features": [out]}
        return {"features": list(out)}

    def depth_map(self, images, depth=None):
        out = self._run(images)
        if "depth" not in out:
            raise ConfigurationError("external depth teacher does not emit a depth map")
        return out["depth"]

    def forward(self, images, depth=None) -> List[torch.Tensor]:
        return list(self._run(images)["features"])

    def train(self, mode: bool = True):
        return super().train(False)


def make_depth_teacher(source: str = "synthetic_oracle", channels: int = 16,
                       strides: Sequence[int] = (16,), path=None, seed: int = 0) -> nn.Module:
    if source == "synthetic_oracle":
        return SyntheticDepthTeacher(channels, strides, seed)
    if source == "external_checkpoint":
        if path is None:
            raise ConfigurationError("external depth teacher needs a checkpoint path")
        return ExternalDepthTeacher(path)
    raise ConfigurationError(f"unknown depth teacher source {source!r}")


@dataclass
class TeacherBundle:
    defocus_teacher: DBDNet
    depth_teacher: nn.Module

    def __post_init__(self):
        _freeze(self.defocus_teacher)
        _freeze(self.depth_teacher)


# -- batching ----------------------------------------------------------------

def _aug_seed(seed, epoch, index):
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


def iterate_batches(records: Sequence[SampleRecord], config: TrainConfig, epoch: int, size):
    """Yield ``(images, labels, depth)`` tensors for one epoch."""
    order = np.random.default_rng([config.seed, epoch]).permutation(len(records))
    for start in range(0, len(order), config.batch_size):
        batch = []
        for idx in order[start:start + config.batch_size]:
            rec = records[int(idx)]
            if config.augment:
                rec = augment(rec, _aug_seed(config.seed, epoch, int(idx)), size=size,
                              flip_prob=config.flip_prob, jitter=config.jitter)
            else:
                rec = augment(rec, 0, size=size, flip_prob=0.0, jitter=0.0)
            batch.append(rec)
        images = torch.from_numpy(np.stack([r.image for r in batch]))
        labels = torch.from_numpy(np.stack([r.blur_label for r in batch]))
        depth = None
        if all(r.depth is not None for r in batch):
            depth = torch.from_numpy(np.stack([r.depth for r in batch]).astype(np.float32))
        yield images, labels, depth


# -- shared loop -------------------------------------------------------------

@dataclass
class TrainResult:
    model: DBDNet
    history: List[dict]
    projectors: Optional[nn.ModuleList] = None


def _write_history_line(path: Optional[Path], entry: dict):
    if path is None:
        return
    with open(path, "a") as fh:
        fh.write(json.dumps(entry, sort_keys=True) + "\n")


def read_history(path) -> List[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def _fit(model: DBDNet, records, config: TrainConfig, stage: str, step_fn: Callable,
         out_dir=None, resume=None, projectors: Optional[nn.Module] = None,
         extra_state: Optional[dict] = None) -> TrainResult:
    config.validate()
    if len(records) == 0:
        raise ConfigurationError("cannot train on an empty dataset")
    n_batches = math.ceil(len(records) / config.batch_size)
    max_iter = config.max_epochs * n_batches
    power = config.lr_poly_power
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr_model)
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda it: max(0.0, 1 - it / max_iter) ** power)
    proj_opt = None
    if projectors is not None:
        proj_opt = torch.optim.Adam(projectors.parameters(), lr=config.lr_projector,
                                    weight_decay=config.wd_projector)

    history: List[dict] = []
    start_epoch = 1
    out_dir = Path(out_dir) if out_dir is not None else None
    hist_path = ckpt_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        hist_path = out_dir / f"{stage}_history.jsonl"
        ckpt_path = out_dir / f"{stage}.pt"
    if resume is not None:
        state = read_checkpoint(resume)
        if state.get("stage") != stage:
            raise ConfigurationError(f"cannot resume {stage} from a {state.get('stage')} checkpoint")
        model.load_state_dict(state["state_dict"])
        optimizer.load_state_dict(state["optimizer"])
        scheduler.load_state_dict(state["scheduler"])
        if projectors is not None:
            projectors.load_state_dict(state["projectors"])
            proj_opt.load_state_dict(state["projector_optimizer"])
        history = list(state["history"])
        start_epoch = state["epoch"] + 1
        if hist_path is not None:
            hist_path.write_text("".join(json.dumps(h, sort_keys=True) + "\n" for h in history))
    elif hist_path is not None and hist_path.exists():
        hist_path.unlink()

    size = model.config.input_size
    for epoch in range(start_epoch, config.max_epochs + 1):
        model.train()
        lr_epoch = optimizer.param_groups[0]["lr"]
        totals: dict = {}
        step_losses = []
        for b, (images, labels, depth) in enumerate(iterate_batches(records, config, epoch, size)):
            parts: dict = {}
            loss = step_fn(images, labels, depth, epoch, parts)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(epoch, b, dict(parts, total=loss.item()))
            optimizer.zero_grad(set_to_none=True)
            if proj_opt is not None:
                proj_opt.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            if proj_opt is not None:
                proj_opt.step()
            scheduler.step()
            step_losses.append(loss.item())
            for k, v in parts.items():
                totals[k] = totals.get(k, 0.0) + v
        n = len(step_losses)
        entry = {"stage": stage, "epoch": epoch, "lr": lr_epoch,
                 "loss": float(np.mean(step_losses)), "step_losses": step_losses}
        entry.update({k: v / n for k, v in totals.items()})
        history.append(entry)
        _write_history_line(hist_path, entry)
        logger.info("%s epoch %d loss %.5f", stage, epoch, entry["loss"])
        if ckpt_path is not None:
            extra = {"stage": stage, "epoch": epoch, "history": history,
                     "optimizer": optimizer.state_dict(), "scheduler": scheduler.state_dict(),
                     "train_config": dataclasses.asdict(config)}
            if projectors is not None:
                extra["projectors"] = projectors.state_dict()
                extra["projector_optimizer"] = proj_opt.state_dict()
            if extra_state:
                extra.update(extra_state)
            save_checkpoint(ckpt_path, model, **extra)
    model.eval()
    return TrainResult(model, history, projectors)


# -- stages ------------------------------------------------------------------

def train_stage1(model: DBDNet, records, config: TrainConfig,
                 weights: Optional[L.LossWeights] = None, out_dir=None,
                 resume=None) -> TrainResult:
    """Train a defocus model (the future teacher) with the stage-1 loss."""
    levels = model.config.num_decoder_levels
    weights = weights or L.LossWeights.for_levels(levels)
    weights = dataclasses.replace(weights, lambda_edge=config.lambda_for(config.stage1_loss))

    def step(images, labels, depth, epoch, parts):
        out = model(images)
        loss = L.stage1_total(out, labels, weights, parts)
        parts["edge_term"] = weights.lambda_edge * parts.get("edge", 0.0)
        parts["lambda_edge"] = weights.lambda_edge
        return loss

    return _fit(model, records, config, "stage1", step, out_dir, resume)


def make_projectors(student: DBDNet, teachers: TeacherBundle, distill: DistillConfig,
                    seed: int = 0) -> nn.ModuleList:
    """One (defocus, depth) projector pair per tap point, flattened as
    ``[p1_tap0, p2_tap0, p1_tap1, ...]``. Initialised from a private RNG so
    the global stream (and thus the student trajectory) is untouched."""
    s_widths = student.encoder_widths
    t_widths = teachers.defocus_teacher.encoder_widths
    taps = range(len(s_widths)) if distill.taps == "all" else [len(s_widths) - 1]
    depth_ch = getattr(teachers.depth_teacher, "channels", distill.depth_channels)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed + 7919)
        mods = []
        for k in taps:
            mods.append(Projector(s_widths[k], t_widths[k]))
            mods.append(Projector(s_widths[k], depth_ch))
    return nn.ModuleList(mods)


def _tap_features(feats: List[torch.Tensor], distill: DistillConfig):
    return feats if distill.taps == "all" else feats[-1:]


def train_stage2(student: DBDNet, teachers: TeacherBundle, records, config: TrainConfig,
                 distill: DistillConfig, weights: Optional[L.LossWeights] = None,
                 out_dir=None, resume=None) -> TrainResult:
    """Train ``student`` with the DBD loss plus beta-weighted feature
    distillation from the frozen defocus and depth teachers.

    Student parameters are on the poly-scheduled Adam; projectors on a
    separate fixed-rate Adam with weight decay.
    """
    distill.validate()
    if distill.taps == "all" and len(teachers.defocus_teacher.encoder_widths) != len(student.encoder_widths):
        raise ConfigurationError("per-stage taps need teacher and student with equal stage counts")
    levels = student.config.num_decoder_levels
    weights = weights or L.LossWeights.for_levels(levels)
    weights = dataclasses.replace(weights, lambda_edge=config.lambda_for(config.stage2_loss))
    projectors = make_projectors(student, teachers, distill, config.seed)
    teacher, depth_teacher = teachers.defocus_teacher, teachers.depth_teacher
    _check_tap_resolution(student, teachers, distill, records)

    def step(images, labels, depth, epoch, parts):
        with torch.no_grad():
            t_feats = _tap_features(teacher.encode(images).stage_features, distill)
            d_feats = list(depth_teacher(images, depth))
            d_feats = d_feats[-len(t_feats):]
        out = student(images)
        s_feats = _tap_features(out.encoder.stage_features, distill)
        feat = 0.0
        for k, (s, t, d) in enumerate(zip(s_feats, t_feats, d_feats)):
            feat = feat + L.feature_distill_loss(s, t, d, projectors[2 * k], projectors[2 * k + 1],
                                                 distill.norm_eps)
        w = dataclasses.replace(weights, beta_now=distill.beta_at(epoch, config.max_epochs))
        loss = L.stage2_total(out, labels, feat, w, parts)
        parts["edge_term"] = w.lambda_edge * parts.get("edge", 0.0)
        parts["lambda_edge"] = w.lambda_edge
        parts["beta"] = w.beta_now
        parts["beta_feat"] = w.beta_now * parts["feat"]
        return loss

    return _fit(student, records, config, "stage2", step, out_dir, resume, projectors)


def _check_tap_resolution(student, teachers, distill, records):
    h, w = student.config.input_size
    probe = torch.zeros(1, 3, h, w)
    depth = None
    rec = records[0] if len(records) else None
    if rec is not None and rec.depth is not None:
        depth = torch.full((1, 1, h, w), float(np.median(rec.depth)))
        depth[..., : h // 2, :] *= 2  # non-constant so normalisation is defined
    training = student.training
    student.eval()
    with torch.no_grad():
        s_feats = _tap_features(student.encode(probe).stage_features, distill)
        t_feats = _tap_features(teachers.defocus_teacher.encode(probe).stage_features, distill)
        d_feats = list(teachers.depth_teacher(probe, depth))[-len(t_feats):]
    student.train(training)
    if len(d_feats) < len(t_feats):
        raise ConfigurationError("depth teacher provides fewer tap features than requested")
    for s, t, d in zip(s_feats, t_feats, d_feats):
        if s.shape[-2:] != t.shape[-2:] or s.shape[-2:] != d.shape[-2:]:
            raise ConfigurationError(
                f"tap resolution mismatch: student {tuple(s.shape[-2:])}, defocus teacher "
                f"{tuple(t.shape[-2:])}, depth teacher {tuple(d.shape[-2:])}"
            )


def train_rdffnet(model: DBDNet, depth_teacher: nn.Module, records, config: TrainConfig,
                  weights: Optional[L.LossWeights] = None, out_dir=None,
                  resume=None) -> TrainResult:
    """Single-stage training with extra depth heads supervised by the depth
    teacher's pseudo-labels (response-based distillation baseline)."""
    if not model.config.depth_heads:
        raise ConfigurationError("R-DFFNet training needs a model built with depth_heads=True")
    _freeze(depth_teacher)
    levels = model.config.num_decoder_levels
    weights = weights or L.LossWeights.for_levels(levels)
    weights = dataclasses.replace(weights, lambda_edge=config.lambda_for(config.stage1_loss))

    def step(images, labels, depth, epoch, parts):
        with torch.no_grad():
            pseudo = depth_teacher.depth_map(images, depth)
        out = model(images)
        loss = L.rdffnet_total(out, labels, pseudo, weights, parts)
        parts["edge_term"] = weights.lambda_edge * parts.get("edge", 0.0)
        parts["lambda_edge"] = weights.lambda_edge
        return loss

    return _fit(model, records, config, "rdffnet", step, out_dir, resume)


def student_from(config: ModelConfig, seed: int, distill: DistillConfig,
                 teacher: Optional[DBDNet] = None) -> DBDNet:
    """Fresh student, or a copy of the stage-1 teacher when warm-starting."""
    if distill.warm_start:
        if teacher is None:
            raise ConfigurationError("warm_start needs the stage-1 teacher")
        student = copy.deepcopy(teacher)
        for p in student.parameters():
            p.requires_grad_(True)
        return student
    return build_model(config, seed=seed)
