"""Datasets: on-disk image/mask(/depth) corpora, paired augmentation, and a
thin-lens synthetic scene generator with ground-truth depth and blur labels.

On-disk layout::

    root/images/<stem>.png     RGB, 8 bit
    root/masks/<stem>.png      single channel, 0 = in focus, 255 = defocus
    root/depth/<stem>.npy      optional float32 metric depth
    root/<manifest>            one record per line (JSON object with "stem",
                               or a bare stem)
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from .exceptions import ConfigurationError, DatasetError

logger = logging.getLogger(__name__)

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
DEFAULT_MANIFEST = "manifest.jsonl"


@dataclass
class SampleRecord:
    image: np.ndarray                 # [3, H, W] float32 in [0, 1]
    blur_label: np.ndarray            # [1, H, W] float32 in {0, 1}; 1 = defocus
    depth: Optional[np.ndarray] = None  # [1, H, W] float32 metric depth
    meta: dict = field(default_factory=dict)

    @property
    def stem(self) -> str:
        return self.meta.get("source_id", "")


@dataclass(frozen=True)
class LensParams:
    focal_length: float = 50.0        # mm
    f_number: float = 1.8
    focus_distance: float = 2000.0    # mm
    sensor_scale: float = 10.0        # pixels per mm on the sensor
    coc_in_focus_threshold: float = 1.0  # pixels
    max_radius: float = 8.0           # pixels; blur radius clamp

    def __post_init__(self):
        for name in ("focal_length", "f_number", "focus_distance", "sensor_scale",
                     "coc_in_focus_threshold", "max_radius"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"LensParams.{name} must be positive")
        if self.f_number < 0.5:
            raise ConfigurationError("f_number must be >= 0.5")
        if self.focus_distance <= self.focal_length:
            raise ConfigurationError("focus distance must exceed the focal length")

    @property
    def aperture(self) -> float:
        return self.focal_length / self.f_number

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def parse_regime(token: str, base: Optional[LensParams] = None) -> LensParams:
    """``"f1.8"`` or ``"1.8"`` -> LensParams with that f-number."""
    base = base or LensParams()
    t = token.strip().lower()
    if t.startswith("f/"):
        t = t[2:]
    elif t.startswith("f"):
        t = t[1:]
    try:
        return replace(base, f_number=float(t))
    except ValueError as exc:
        raise ConfigurationError(f"bad lens regime {token!r}") from exc


def circle_of_confusion(depth, lens: LensParams) -> np.ndarray:
    """Blur-circle size in pixels for scene depth(s) under a thin lens."""
    d = np.asarray(depth, dtype=np.float64)
    if np.any(d <= lens.focal_length):
        raise ConfigurationError("scene depth must exceed the focal length")
    f, df = lens.focal_length, lens.focus_distance
    c_mm = lens.aperture * np.abs(d - df) * f / (d * (df - f))
    return c_mm * lens.sensor_scale


# -- scene layouts -----------------------------------------------------------

@dataclass
class Layer:
    shape: str                        # "full", "rect" or "ellipse"
    box: Tuple[float, float, float, float]  # y0, x0, y1, x1 as image fractions
    depth: float
    texture: str                      # "noise", "stripes" or "flat"
    color: Tuple[float, float, float]
    seed: int = 0


@dataclass
class SceneLayout:
    size: Tuple[int, int]
    layers: List[Layer]
    homogeneous: bool = False


def random_layout(seed: int, size=(64, 64), focus_distance: float = 2000.0,
                  homogeneous: bool = False) -> SceneLayout:
    """Textured far background plus 1-3 objects, mostly at the focus distance.

    With ``homogeneous`` at least one object is a flat, textureless plane
    sitting exactly at the focus distance.
    """
    rng = np.random.default_rng(seed)
    layers = [Layer("full", (0.0, 0.0, 1.0, 1.0),
                    float(focus_distance * rng.uniform(2.5, 4.0)), "noise",
                    tuple(rng.uniform(0.3, 1.0, 3)), int(rng.integers(2**31)))]
    n_obj = int(rng.integers(1, 4))
    for i in range(n_obj):
        h, w = rng.uniform(0.25, 0.6, 2)
        y0, x0 = rng.uniform(0, 1 - h), rng.uniform(0, 1 - w)
        in_focus = (homogeneous and i == 0) or rng.random() < 0.7
        depth = focus_distance if in_focus else focus_distance * rng.uniform(1.6, 2.2)
        if homogeneous and i == 0:
            texture = "flat"
        else:
            texture = str(rng.choice(["noise", "stripes", "flat"], p=[0.5, 0.3, 0.2]))
        layers.append(Layer(str(rng.choice(["rect", "ellipse"])),
                            (float(y0), float(x0), float(y0 + h), float(x0 + w)),
                            float(depth), texture, tuple(rng.uniform(0.1, 1.0, 3)),
                            int(rng.integers(2**31))))
    return SceneLayout(tuple(size), layers, homogeneous)


def _layer_mask(layer: Layer, h: int, w: int) -> np.ndarray:
    if layer.shape == "full":
        return np.ones((h, w), bool)
    y0, x0, y1, x1 = layer.box
    yy, xx = np.mgrid[0:h, 0:w]
    yc, xc = (yy + 0.5) / h, (xx + 0.5) / w
    if layer.shape == "rect":
        return (yc >= y0) & (yc < y1) & (xc >= x0) & (xc < x1)
    if layer.shape == "ellipse":
        cy, cx = (y0 + y1) / 2, (x0 + x1) / 2
        ry, rx = (y1 - y0) / 2, (x1 - x0) / 2
        return ((yc - cy) / ry) ** 2 + ((xc - cx) / rx) ** 2 <= 1.0
    raise ConfigurationError(f"unknown layer shape {layer.shape!r}")


def _layer_texture(layer: Layer, h: int, w: int) -> np.ndarray:
    color = np.asarray(layer.color, np.float64)[:, None, None]
    if layer.texture == "flat":
        return np.broadcast_to(color, (3, h, w)).copy()
    rng = np.random.default_rng(layer.seed)
    if layer.texture == "noise":
        pattern = rng.random((h, w))
    elif layer.texture == "stripes":
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(3.0, 7.0)
        yy, xx = np.mgrid[0:h, 0:w]
        pattern = 0.5 + 0.5 * np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period)
    else:
        raise ConfigurationError(f"unknown texture {layer.texture!r}")
    return color * (0.35 + 0.65 * pattern[None])


def render_sharp(layout: SceneLayout) -> Tuple[np.ndarray, np.ndarray]:
    """All-in-focus image ``[3,H,W]`` and metric depth ``[H,W]``; nearer
    layers occlude farther ones."""
    h, w = layout.size
    image = np.zeros((3, h, w))
    depth = np.full((h, w), np.inf)
    for layer in sorted(layout.layers, key=lambda l: -l.depth):
        m = _layer_mask(layer, h, w)
        image[:, m] = _layer_texture(layer, h, w)[:, m]
        depth[m] = layer.depth
    if np.isinf(depth).any():
        raise ConfigurationError("layout leaves pixels uncovered; add a full-frame layer")
    return image, depth


def disc_kernel(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    k = (xx ** 2 + yy ** 2 <= r * r + 1e-9).astype(np.float64)
    return k / k.sum()


def disc_blur(image: np.ndarray, radius: np.ndarray) -> np.ndarray:
    """Spatially varying uniform-disc blur; fractional radii interpolate
    between the two neighbouring integer disc sizes."""
    radius = np.asarray(radius, np.float64)
    r_max = int(np.ceil(radius.max())) if radius.size else 0
    levels = [image]
    for r in range(1, r_max + 1):
        k = disc_kernel(r)
        levels.append(np.stack([ndimage.correlate(ch, k, mode="reflect") for ch in image]))
    lo = np.floor(radius).astype(int)
    hi = np.minimum(lo + 1, r_max)
    t = radius - lo
    stack = np.stack(levels)  # [R+1, 3, H, W]
    rows, cols = np.indices(radius.shape)
    a = stack[lo, :, rows, cols]  # [H, W, 3]
    b = stack[hi, :, rows, cols]
    out = (1 - t)[..., None] * a + t[..., None] * b
    return np.moveaxis(out, -1, 0)


def synth_scene(layout: SceneLayout, lens: LensParams, seed: int = 0) -> SampleRecord:
    """Render a defocused image, its blur label and depth for one layout."""
    for layer in layout.layers:
        if layer.depth <= lens.focal_length:
            raise ConfigurationError(
                f"layer at depth {layer.depth} is not beyond focal length {lens.focal_length}"
            )
    sharp, depth = render_sharp(layout)
    coc = circle_of_confusion(depth, lens)
    blurred = disc_blur(sharp, np.minimum(coc, lens.max_radius))
    rng = np.random.default_rng(seed)
    blurred = blurred + rng.normal(0.0, 0.005, blurred.shape)
    label = (coc > lens.coc_in_focus_threshold).astype(np.float32)[None]
    return SampleRecord(
        image=np.clip(blurred, 0, 1).astype(np.float32),
        blur_label=label,
        depth=depth.astype(np.float32)[None],
        meta={"aperture_f_number": lens.f_number,
              "focus_distance": lens.focus_distance,
              "focal_length": lens.focal_length,
              "homogeneous": layout.homogeneous,
              "source_id": ""},
    )


def synth_dataset(root, n: int, regimes: Sequence[LensParams], seed: int = 0,
                  size=(64, 64), homogeneous_fraction: float = 0.5,
                  manifest_name: str = DEFAULT_MANIFEST) -> Path:
    """Write ``n`` synthetic samples in the on-disk layout; returns the
    manifest path. Sample ``i`` uses ``regimes[i % len(regimes)]``."""
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    if not regimes:
        raise ConfigurationError("at least one lens regime is required")
    root = Path(root)
    try:
        for sub in ("images", "masks", "depth"):
            (root / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create dataset under {root}: {exc}") from exc
    seeds = np.random.SeedSequence(seed).generate_state(n, dtype=np.uint32)
    n_homog = int(round(n * homogeneous_fraction))
    lines = []
    for i in range(n):
        lens = regimes[i % len(regimes)]
        homog = i % max(1, round(n / n_homog)) == 0 if n_homog else False
        layout_seed = int(seeds[i])
        layout = random_layout(layout_seed, size, lens.focus_distance, homog)
        rec = synth_scene(layout, lens, seed=layout_seed)
        stem = f"syn_{i:05d}"
        write_record(root, stem, rec)
        entry = {"stem": stem, "layout_seed": layout_seed,
                 "homogeneous": bool(homog), "size": list(size)}
        entry.update(lens.to_dict())
        lines.append(json.dumps(entry, sort_keys=True))
    manifest = root / manifest_name
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def write_record(root, stem: str, rec: SampleRecord) -> None:
    root = Path(root)
    img = np.round(np.moveaxis(rec.image, 0, -1) * 255).astype(np.uint8)
    Image.fromarray(img, "RGB").save(root / "images" / f"{stem}.png")
    mask = (rec.blur_label[0] > 0.5).astype(np.uint8) * 255
    Image.fromarray(mask, "L").save(root / "masks" / f"{stem}.png")
    if rec.depth is not None:
        (root / "depth").mkdir(exist_ok=True)
        np.save(root / "depth" / f"{stem}.npy", rec.depth[0].astype(np.float32))


# -- loading -----------------------------------------------------------------

def read_manifest(path) -> List[dict]:
    entries = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        entries.append(json.loads(line) if line.startswith("{") else {"stem": line})
    return entries


def _find(directory: Path, stem: str) -> Optional[Path]:
    for ext in IMAGE_EXTS:
        p = directory / f"{stem}{ext}"
        if p.exists():
            return p
    return None


def _read_image(path: Path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert(mode))
    except Exception as exc:
        raise DatasetError(f"cannot decode {path}: {exc}") from exc


def load_dataset(root, split_manifest=None, polarity: str = "defocus",
                 require_depth: bool = False) -> List[SampleRecord]:
    """Load records in manifest order.

    ``polarity="defocus"`` reads white mask pixels as defocus (positive);
    ``"focus"`` inverts masks stored with in-focus as white.
    """
    root = Path(root)
    if polarity not in ("defocus", "focus"):
        raise ConfigurationError(f"polarity must be 'defocus' or 'focus', not {polarity!r}")
    if split_manifest is None:
        default = root / DEFAULT_MANIFEST
        if default.exists():
            entries = read_manifest(default)
        else:
            entries = [{"stem": p.stem} for p in sorted((root / "images").iterdir())
                       if p.suffix.lower() in IMAGE_EXTS]
    else:
        mpath = Path(split_manifest)
        if not mpath.is_absolute() and not mpath.exists():
            mpath = root / mpath
        if not mpath.exists():
            raise DatasetError(f"manifest {mpath} not found")
        entries = read_manifest(mpath)

    records = []
    for entry in entries:
        stem = entry["stem"]
        img_path = _find(root / "images", stem)
        if img_path is None:
            raise DatasetError(f"missing image for stem {stem!r}")
        mask_path = _find(root / "masks", stem)
        if mask_path is None:
            raise DatasetError(f"missing mask for stem {stem!r}")
        image = _read_image(img_path, "RGB").astype(np.float32) / 255.0
        mask = _read_image(mask_path, "L").astype(np.float32) / 255.0
        label = (mask > 0.5).astype(np.float32)
        if polarity == "focus":
            label = 1.0 - label
        if image.shape[:2] != label.shape:
            raise DatasetError(f"image and mask sizes differ for stem {stem!r}")
        depth = None
        depth_path = root / "depth" / f"{stem}.npy"
        if depth_path.exists():
            depth = np.load(depth_path).astype(np.float32)[None]
        elif require_depth:
            raise DatasetError(f"missing depth for stem {stem!r}")
        meta = {k: v for k, v in entry.items() if k != "stem"}
        meta["source_id"] = stem
        if "f_number" in entry:
            meta["aperture_f_number"] = entry["f_number"]
        records.append(SampleRecord(np.moveaxis(image, -1, 0).copy(), label[None], depth, meta))
    return records


# -- augmentation ------------------------------------------------------------

def _resize(arr: np.ndarray, size, order: int) -> np.ndarray:
    """Resize ``[C,H,W]``; order 1 = bilinear, 0 = nearest."""
    import torch
    import torch.nn.functional as F

    if tuple(arr.shape[-2:]) == tuple(size):
        return arr
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))[None]
    if order:
        out = F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False)
    else:
        out = F.interpolate(t, size=tuple(size), mode="nearest")
    return out[0].numpy()


def _gray(img):
    return (0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2])[None]


def augment(record: SampleRecord, seed: int, size=None, flip_prob: float = 0.5,
            jitter: float = 0.2) -> SampleRecord:
    """Resize, random vertical flip (image, label and depth together) and
    colour jitter (image only). Deterministic for a given ``seed``."""
    rng = np.random.default_rng(seed)
    flip = bool(rng.random() < flip_prob)
    b, c, s = rng.uniform(1 - jitter, 1 + jitter, 3) if jitter > 0 else (1.0, 1.0, 1.0)
    order = rng.permutation(3)

    image, label, depth = record.image, record.blur_label, record.depth
    if size is not None:
        image = _resize(image, size, 1)
        label = _resize(label, size, 0)
        depth = None if depth is None else _resize(depth, size, 0)
    if flip:
        image, label = image[:, ::-1], label[:, ::-1]
        depth = None if depth is None else depth[:, ::-1]
    if jitter > 0:
        img = image.astype(np.float32)
        for op in order:
            if op == 0:
                img = img * b
            elif op == 1:
                img = _gray(img).mean() + c * (img - _gray(img).mean())
            else:
                img = _gray(img) + s * (img - _gray(img))
            img = np.clip(img, 0, 1)
        image = img
    meta = dict(record.meta, flipped=flip)
    return SampleRecord(np.ascontiguousarray(image, dtype=np.float32),
                        np.ascontiguousarray(label, dtype=np.float32),
                        None if depth is None else np.ascontiguousarray(depth),
                        meta)


def normalized_inverse_depth(depth: np.ndarray) -> np.ndarray:
    """Per-image min-max normalised inverse depth (near = 1, far = 0)."""
    inv = 1.0 / np.asarray(depth, np.float64)
    lo, hi = inv.min(), inv.max()
    if hi - lo < 1e-12:
        return np.ones_like(inv, dtype=np.float32)
    return ((inv - lo) / (hi - lo)).astype(np.float32)


def stack_records(records: Sequence[SampleRecord]):
    """Batch records into ``(images, labels, depth_or_None)`` numpy arrays."""
    images = np.stack([r.image for r in records])
    labels = np.stack([r.blur_label for r in records])
    depth = None
    if all(r.depth is not None for r in records):
        depth = np.stack([r.depth for r in records])
    return images, labels, depth
