"""DFFNet / PDNet defocus blur detectors.

The network is split into an encoder (a pluggable backbone producing one
feature map per stage) and a decoder made of receptive field blocks, an
optional dense feature fusion module, side classifiers, an optional
prediction-driven spatial attention and a bottom-up aggregation path.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import ConfigurationError, DimensionError

VARIANTS = ("dffnet", "pdnet")


@dataclass
class ModelConfig:
    backbone_id: str = "tiny"
    num_decoder_levels: int = 4
    base_channels: int = 8
    input_size: Tuple[int, int] = (64, 64)
    variant: str = "dffnet"
    depth_heads: bool = False

    def __post_init__(self):
        self.input_size = tuple(int(s) for s in self.input_size)

    def validate(self) -> "ModelConfig":
        if self.backbone_id not in _BACKBONES:
            raise ConfigurationError(
                f"unknown backbone {self.backbone_id!r}; "
                f"choose from {sorted(_BACKBONES)}"
            )
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}")
        if self.num_decoder_levels < 1:
            raise ConfigurationError("num_decoder_levels must be >= 1")
        if self.base_channels < 1:
            raise ConfigurationError("base_channels must be >= 1")
        if len(self.input_size) != 2:
            raise ConfigurationError("input_size must be (height, width)")
        stride = backbone_stride(self)
        h, w = self.input_size
        if h <= 0 or w <= 0 or h % stride or w % stride:
            raise ConfigurationError(
                f"input size {self.input_size} is not divisible by the "
                f"backbone output stride {stride}"
            )
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EncoderOutput:
    stage_features: List[torch.Tensor]

    @property
    def final_feature(self) -> torch.Tensor:
        return self.stage_features[-1]


@dataclass
class ModelOutput:
    final_prediction: torch.Tensor
    side_predictions: List[torch.Tensor]
    encoder: EncoderOutput
    depth_prediction: Optional[torch.Tensor] = None
    side_depth_predictions: Optional[List[torch.Tensor]] = None


def conv_bn_relu(in_ch, out_ch, kernel_size=3, stride=1, dilation=1):
    padding = dilation * (kernel_size - 1) // 2
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel_size, stride=stride, padding=padding,
                  dilation=dilation, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


# -- backbones ---------------------------------------------------------------

class TinyBackbone(nn.Module):
    """Plain convnet, one stride-2 stage per decoder level."""

    def __init__(self, levels, base_channels):
        super().__init__()
        self.widths = [base_channels * 2 ** i for i in range(levels)]
        self.strides = [2 ** (i + 1) for i in range(levels)]
        stages = []
        in_ch = 3
        for w in self.widths:
            stages.append(nn.Sequential(conv_bn_relu(in_ch, w, stride=2),
                                        conv_bn_relu(w, w)))
            in_ch = w
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class BasicBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )

    def forward(self, x):
        identity = x if self.shortcut is None else self.shortcut(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity)


class MediumBackbone(nn.Module):
    """Small residual network: a stem then two basic blocks per stage."""

    def __init__(self, levels, base_channels):
        super().__init__()
        self.widths = [base_channels * 2 ** (i + 1) for i in range(levels)]
        self.strides = [2 ** (i + 1) for i in range(levels)]
        self.stem = conv_bn_relu(3, base_channels)
        stages = []
        in_ch = base_channels
        for w in self.widths:
            stages.append(nn.Sequential(BasicBlock(in_ch, w, 2), BasicBlock(w, w)))
            in_ch = w
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class ResNetAdapter(nn.Module):
    """Wraps a torchvision ResNet so its four residual stages act as encoder
    stages. Weights are randomly initialised; load pretrained weights into
    ``self.net`` yourself if you have them."""

    def __init__(self, levels, base_channels, arch="resnet50"):
        super().__init__()
        if levels != 4:
            raise ConfigurationError("the large backbone exposes exactly 4 stages")
        import torchvision

        self.net = getattr(torchvision.models, arch)(weights=None)
        self.net.fc = nn.Identity()
        expansion = 4 if arch in ("resnet50", "resnet101", "resnet152") else 1
        self.widths = [64 * expansion, 128 * expansion, 256 * expansion, 512 * expansion]
        self.strides = [4, 8, 16, 32]

    def forward(self, x):
        n = self.net
        x = n.maxpool(n.relu(n.bn1(n.conv1(x))))
        feats = []
        for layer in (n.layer1, n.layer2, n.layer3, n.layer4):
            x = layer(x)
            feats.append(x)
        return feats


BackboneFactory = Callable[[int, int], nn.Module]

_BACKBONES: Dict[str, BackboneFactory] = {
    "tiny": TinyBackbone,
    "medium": MediumBackbone,
    "large": ResNetAdapter,
}
_STRIDES: Dict[str, Callable[[int], int]] = {
    "tiny": lambda levels: 2 ** levels,
    "medium": lambda levels: 2 ** levels,
    "large": lambda levels: 32,
}


def register_backbone(name: str, factory: BackboneFactory, stride: Callable[[int], int]):
    """Make an external backbone selectable through ``ModelConfig.backbone_id``.

    ``factory(levels, base_channels)`` must return a module whose forward
    returns one feature map per stage (shallow to deep) and which exposes
    ``widths`` and ``strides`` lists. ``stride(levels)`` gives the total
    output stride used to validate input sizes.
    """
    _BACKBONES[name] = factory
    _STRIDES[name] = stride


def backbone_stride(config: ModelConfig) -> int:
    return _STRIDES[config.backbone_id](config.num_decoder_levels)


# -- decoder blocks ----------------------------------------------------------

class RFB(nn.Module):
    """Receptive field block: dilated 3x3 branches (rates 1, 3, 5) and a 1x1
    shortcut, concatenated and fused by a 1x1 convolution."""

    def __init__(self, in_ch, out_ch, dilations=(1, 3, 5)):
        super().__init__()
        mid = max(out_ch // 2, 1)
        self.branches = nn.ModuleList(
            nn.Sequential(conv_bn_relu(in_ch, mid, 1), conv_bn_relu(mid, mid, 3, dilation=d))
            for d in dilations
        )
        self.shortcut = conv_bn_relu(in_ch, mid, 1)
        self.fuse = conv_bn_relu(mid * (len(dilations) + 1), out_ch, 1)

    def forward(self, x):
        outs = [b(x) for b in self.branches]
        outs.append(self.shortcut(x))
        return self.fuse(torch.cat(outs, dim=1))


class DFFM(nn.Module):
    """Dense top-down fusion: each level is fused with every deeper level,
    upsampled to its resolution, through a 1x1 + 3x3 convolution pair."""

    def __init__(self, levels, channels):
        super().__init__()
        self.fusers = nn.ModuleList(
            nn.Sequential(conv_bn_relu(channels * (levels - k), channels, 1),
                          conv_bn_relu(channels, channels, 3))
            for k in range(levels)
        )

    def forward(self, feats):
        fused = []
        for k, fuser in enumerate(self.fusers):
            size = feats[k].shape[-2:]
            deeper = [_resize(f, size) for f in feats[k + 1:]]
            fused.append(fuser(torch.cat([feats[k]] + deeper, dim=1)))
        return fused


def _resize(x, size):
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def spatial_attention(prediction: torch.Tensor, features: torch.Tensor) -> torch.Tensor:
    """Weight ``features`` by a single-channel probability map.

    ``prediction`` is resized bilinearly to the feature resolution when needed.
    """
    if prediction.dim() != 4 or features.dim() != 4:
        raise DimensionError("spatial_attention expects 4-D tensors")
    if prediction.shape[1] != 1:
        raise DimensionError(f"prediction must have 1 channel, got {prediction.shape[1]}")
    if prediction.shape[0] != features.shape[0]:
        raise DimensionError(
            f"batch mismatch: prediction {prediction.shape[0]} vs features {features.shape[0]}"
        )
    prediction = _resize(prediction, features.shape[-2:])
    return features * prediction


class DBDNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        levels = config.num_decoder_levels
        self.backbone = _BACKBONES[config.backbone_id](levels, config.base_channels)
        widths = list(self.backbone.widths)
        ch = 2 * config.base_channels
        self.decoder_channels = ch
        self.rfbs = nn.ModuleList(RFB(w, ch) for w in widths)
        full = config.variant == "dffnet"
        self.dffm = DFFM(levels, ch) if full else None
        self.side_classifiers = nn.ModuleList(nn.Conv2d(ch, 1, 1) for _ in range(levels))
        self.use_attention = full
        self.agg = nn.ModuleList(conv_bn_relu(2 * ch, ch) for _ in range(levels - 1))
        self.classifier = nn.Conv2d(ch, 1, 1)
        if config.depth_heads:
            self.side_depth_heads = nn.ModuleList(nn.Conv2d(ch, 1, 1) for _ in range(levels))
            self.depth_head = nn.Conv2d(ch, 1, 1)
        else:
            self.side_depth_heads = None
            self.depth_head = None

    @property
    def encoder_widths(self) -> List[int]:
        return list(self.backbone.widths)

    @property
    def encoder_strides(self) -> List[int]:
        return list(self.backbone.strides)

    def _check_input(self, images):
        if images.dim() != 4 or images.shape[1] != 3:
            raise DimensionError(f"expected [B,3,H,W] images, got {tuple(images.shape)}")
        if tuple(images.shape[-2:]) != tuple(self.config.input_size):
            raise DimensionError(
                f"image size {tuple(images.shape[-2:])} does not match "
                f"configured input size {self.config.input_size}"
            )

    def encode(self, images) -> EncoderOutput:
        self._check_input(images)
        return EncoderOutput(list(self.backbone(images)))

    def forward(self, images) -> ModelOutput:
        enc = self.encode(images)
        size = images.shape[-2:]
        feats = [rfb(f) for rfb, f in zip(self.rfbs, enc.stage_features)]
        if self.dffm is not None:
            feats = self.dffm(feats)

        side_logits = [cls(f) for cls, f in zip(self.side_classifiers, feats)]
        if self.use_attention:
            feats = [spatial_attention(torch.sigmoid(s), f)
                     for s, f in zip(side_logits, feats)]

        agg = feats[-1]
        for k in range(len(feats) - 2, -1, -1):
            up = _resize(agg, feats[k].shape[-2:])
            agg = self.agg[k](torch.cat([feats[k], up], dim=1))

        out = ModelOutput(
            final_prediction=torch.sigmoid(_resize(self.classifier(agg), size)),
            side_predictions=[torch.sigmoid(_resize(s, size)) for s in side_logits],
            encoder=enc,
        )
        if self.depth_head is not None:
            out.depth_prediction = _resize(self.depth_head(agg), size)
            out.side_depth_predictions = [
                _resize(h(f), size) for h, f in zip(self.side_depth_heads, feats)
            ]
        return out


def build_model(config: ModelConfig, seed: Optional[int] = None) -> DBDNet:
    """Construct a detector; with ``seed`` set, initialisation is reproducible
    and leaves the global RNG state untouched."""
    config.validate()
    if seed is None:
        return DBDNet(config)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return DBDNet(config)


def forward(model: DBDNet, images: torch.Tensor) -> ModelOutput:
    return model(images)


def encoder_features(model: DBDNet, images: torch.Tensor) -> EncoderOutput:
    return model.encode(images)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_FORMAT = "depthdbd-checkpoint-v1"


def save_checkpoint(path, model: DBDNet, **extra) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "state_dict": model.state_dict(),
    }
    payload.update(extra)
    torch.save(payload, path)


def read_checkpoint(path) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise ConfigurationError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"{path} is not a depthdbd checkpoint")
    return payload


def load_checkpoint(path, expected_config: Optional[ModelConfig] = None) -> DBDNet:
    """Rebuild a model from a checkpoint.

    Raises ConfigurationError when ``expected_config`` differs from the
    configuration stored in the archive.
    """
    payload = read_checkpoint(path)
    stored = ModelConfig.from_dict(payload["config"])
    if expected_config is not None and expected_config.to_dict() != stored.to_dict():
        diff = {
            k: (v, stored.to_dict()[k])
            for k, v in expected_config.to_dict().items()
            if stored.to_dict()[k] != v
        }
        raise ConfigurationError(f"checkpoint config mismatch (expected, stored): {diff}")
    model = DBDNet(stored)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model


def parameter_digest(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in name order."""
    import hashlib

    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
