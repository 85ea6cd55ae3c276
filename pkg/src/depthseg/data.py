"""Dataset layout, file codecs, the synthetic scene generator and tensor conversion.

On-disk layout::

    root/manifest.json
    root/<split>/image/<id>.png     8-bit RGB
    root/<split>/depth/<id>.png     16-bit millimeters, 0 = invalid   (or <id>.npy, float32 meters)
    root/<split>/label/<id>.png     8-bit class ids, ignore_id = unlabeled
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, NamedTuple, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from depthseg.depth_space import DepthMap, DepthRange, to_log_depth, validity_mask

MANIFEST_NAME = "manifest.json"
IGNORE_ID = 255
PNG16_MAX_M = 65.535


class DataError(Exception):
    """Raised for missing, malformed or inconsistent dataset files."""


@dataclass
class Sample:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    depth: DepthMap  # meters
    labels: np.ndarray  # H x W integers in {0..K-1} U {ignore_id}
    id: str = ""

    def __post_init__(self):
        hw = self.image.shape[:2]
        if self.depth.values.shape != hw or self.labels.shape != hw:
            raise ValueError(
                f"sample {self.id!r}: image {hw}, depth {self.depth.values.shape}, labels {self.labels.shape} differ"
            )


@dataclass
class DatasetManifest:
    num_classes: int
    d_min: float
    d_max: float
    ignore_id: int = IGNORE_ID
    class_names: list[str] = field(default_factory=list)
    mean: list[float] = field(default_factory=lambda: [0.5, 0.5, 0.5])
    std: list[float] = field(default_factory=lambda: [0.5, 0.5, 0.5])
    image_size: list[int] = field(default_factory=lambda: [64, 64])
    splits: dict[str, int] = field(default_factory=dict)
    seed: Optional[int] = None
    root: Optional[str] = None

    @property
    def depth_range(self) -> DepthRange:
        return DepthRange(self.d_min, self.d_max)

    def save(self, root: Path) -> Path:
        d = asdict(self)
        d.pop("root")
        path = Path(root) / MANIFEST_NAME
        path.write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, root) -> "DatasetManifest":
        path = Path(root)
        if path.is_dir():
            path = path / MANIFEST_NAME
        if not path.exists():
            raise DataError(f"manifest not found: {path}")
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: {exc}") from exc
        unknown = set(d) - {f for f in cls.__dataclass_fields__ if f != "root"}
        if unknown:
            raise DataError(f"{path}: unknown manifest keys {sorted(unknown)}")
        return cls(**d, root=str(path.parent))


# ---------------------------------------------------------------------------
# codecs


def depth_extension(d_max: float) -> str:
    """PNG16 when the range fits in millimeters, float32 ``.npy`` otherwise."""
    return ".png" if d_max <= PNG16_MAX_M else ".npy"


def write_depth(path: Path, depth: DepthMap) -> None:
    """PNG16 millimeters (0 = invalid) for ``.png``; float32 meters (0 = invalid) for ``.npy``."""
    valid = validity_mask(depth)
    vals = np.where(valid, depth.values, 0.0)
    if path.suffix == ".npy":
        np.save(path, vals.astype(np.float32))
        return
    if vals.max(initial=0.0) > PNG16_MAX_M:
        raise ValueError(f"{path}: depth above {PNG16_MAX_M} m does not fit PNG16 millimeters, use .npy")
    mm = np.where(valid, np.clip(np.rint(vals * 1000.0), 1, 65535), 0).astype(np.uint16)
    Image.fromarray(mm).save(path)


def read_depth(path: Path) -> DepthMap:
    path = Path(path)
    if path.suffix == ".npy":
        vals = np.load(path).astype(np.float64)
    elif path.suffix == ".png":
        with Image.open(path) as im:
            raw = np.array(im)
        if raw.dtype != np.uint16:
            raise DataError(f"{path}: expected a 16-bit depth PNG, got {raw.dtype}")
        vals = raw.astype(np.float64) / 1000.0
    else:
        raise DataError(f"{path}: unsupported depth format")
    if vals.ndim != 2:
        raise DataError(f"{path}: depth must be 2-D, got shape {vals.shape}")
    d = DepthMap(vals, np.ones(vals.shape, dtype=bool))
    valid = validity_mask(d)
    return DepthMap(np.where(valid, vals, 0.0), valid)


def read_disparity(path: Path) -> np.ndarray:
    return np.load(path).astype(np.float64)


def write_labels(path: Path, labels: np.ndarray) -> None:
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise ValueError(f"{path}: labels must fit in 8 bits")
    Image.fromarray(labels.astype(np.uint8)).save(path)


def read_labels(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            raise DataError(f"{path}: expected an 8-bit label PNG, got mode {im.mode}")
        return np.array(im).astype(np.int64)


def write_image(path: Path, image: np.ndarray) -> None:
    Image.fromarray(np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)).save(path)


def read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def write_sample(root: Path, split: str, sample: Sample, depth_ext: str = ".png") -> None:
    base = Path(root) / split
    for sub in ("image", "depth", "label"):
        (base / sub).mkdir(parents=True, exist_ok=True)
    write_image(base / "image" / f"{sample.id}.png", sample.image)
    write_depth(base / "depth" / f"{sample.id}{depth_ext}", sample.depth)
    write_labels(base / "label" / f"{sample.id}.png", sample.labels)


def load_dataset(root, split: str, manifest: Optional[DatasetManifest] = None) -> Iterator[Sample]:
    """Yield samples of ``split`` in lexicographic id order."""
    root = Path(root)
    manifest = manifest or DatasetManifest.load(root)
    image_dir = root / split / "image"
    if not image_dir.exists():
        return
    for img_path in sorted(image_dir.glob("*.png")):
        sid = img_path.stem
        depth_path = None
        for ext in (".png", ".npy"):
            cand = root / split / "depth" / f"{sid}{ext}"
            if cand.exists():
                depth_path = cand
                break
        if depth_path is None:
            raise DataError(f"missing depth file for {img_path}")
        label_path = root / split / "label" / f"{sid}.png"
        if not label_path.exists():
            raise DataError(f"missing label file {label_path}")
        image = read_image(img_path)
        depth = read_depth(depth_path)
        labels = read_labels(label_path)
        if depth.values.shape != image.shape[:2] or labels.shape != image.shape[:2]:
            raise DataError(
                f"shape mismatch for {sid}: image {image.shape[:2]}, {depth_path.name} {depth.values.shape}, "
                f"{label_path.name} {labels.shape}"
            )
        bad = (labels != manifest.ignore_id) & (labels >= manifest.num_classes)
        if bad.any():
            raise DataError(f"{label_path}: label {int(labels[bad][0])} >= num_classes {manifest.num_classes}")
        yield Sample(image, depth, labels, sid)


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class SyntheticSpec:
    height: int = 64
    width: int = 64
    num_classes: int = 5
    d_min: float = 0.1
    d_max: float = 10.0
    min_shapes: int = 3
    max_shapes: int = 8
    noise: float = 0.02


@dataclass(frozen=True)
class Shape:
    kind: str  # "rect" or "ellipse"
    class_id: int
    depth: float
    cy: float
    cx: float
    hy: float  # half extents in pixels
    hx: float

    def covers(self, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
        """Pixel-center coverage test."""
        dy = (yy + 0.5 - self.cy) / self.hy
        dx = (xx + 0.5 - self.cx) / self.hx
        if self.kind == "rect":
            return (np.abs(dy) <= 1) & (np.abs(dx) <= 1)
        return dy**2 + dx**2 <= 1


def class_palette(num_classes: int) -> np.ndarray:
    """Gray background, evenly spaced saturated hues for foreground classes."""
    import colorsys

    pal = [(0.5, 0.5, 0.5)]
    for k in range(1, num_classes):
        pal.append(colorsys.hsv_to_rgb((k - 1) / (num_classes - 1), 0.8, 1.0))
    return np.asarray(pal, dtype=np.float64)


def random_scene(rng: np.random.Generator, spec: SyntheticSpec) -> list[Shape]:
    h, w = spec.height, spec.width
    n = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    lo, hi = math.log(spec.d_min), math.log(spec.d_max * 0.9)
    shapes = []
    for _ in range(n):
        shapes.append(
            Shape(
                kind="rect" if rng.random() < 0.5 else "ellipse",
                class_id=int(rng.integers(1, spec.num_classes)),
                depth=float(math.exp(rng.uniform(lo, hi))),
                cy=float(rng.uniform(0, h)),
                cx=float(rng.uniform(0, w)),
                hy=float(rng.uniform(h / 16, h / 4)),
                hx=float(rng.uniform(w / 16, w / 4)),
            )
        )
    return shapes


def render_scene(shapes: Sequence[Shape], spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """Paint back-to-front onto a background plane at d_max; returns (depth, labels)."""
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width]
    depth = np.full((spec.height, spec.width), spec.d_max)
    labels = np.zeros((spec.height, spec.width), dtype=np.int64)
    for s in sorted(shapes, key=lambda s: -s.depth):
        m = s.covers(yy, xx)
        depth[m] = s.depth
        labels[m] = s.class_id
    return depth, labels


def shade_image(depth: np.ndarray, labels: np.ndarray, spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Class color scaled by a brightness that falls off with log depth, plus noise."""
    rng_ = DepthRange(spec.d_min, spec.d_max)
    u = np.log(depth / rng_.d_min) / rng_.log_span
    shade = 0.25 + 0.75 * (1.0 - u)
    img = class_palette(spec.num_classes)[labels] * shade[..., None]
    img = img + rng.normal(0.0, spec.noise, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synthetic_sample(seed: int, split_index: int, index: int, spec: SyntheticSpec) -> tuple[Sample, list[Shape]]:
    rng = np.random.default_rng([seed, split_index, index])
    shapes = random_scene(rng, spec)
    depth, labels = render_scene(shapes, spec)
    image = shade_image(depth, labels, spec, rng)
    sample = Sample(image, DepthMap(depth, np.ones_like(depth, dtype=bool)), labels, f"{index:06d}")
    return sample, shapes


SPLIT_ORDER = ("train", "val", "test")


def gen_synthetic(out, seed: int, counts: dict[str, int], spec: SyntheticSpec = SyntheticSpec()) -> DatasetManifest:
    """Write a deterministic synthetic dataset under ``out`` and return its manifest."""
    if spec.num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {spec.num_classes}")
    if spec.num_classes > 8:
        raise ValueError(f"synthetic scenes support at most 8 classes, got {spec.num_classes}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    depth_ext = depth_extension(spec.d_max)
    for split, n in counts.items():
        split_index = SPLIT_ORDER.index(split) if split in SPLIT_ORDER else len(SPLIT_ORDER) + sorted(counts).index(split)
        for sub in ("image", "depth", "label"):
            (out / split / sub).mkdir(parents=True, exist_ok=True)
        for i in range(n):
            sample, _ = synthetic_sample(seed, split_index, i, spec)
            write_sample(out, split, sample, depth_ext)
    manifest = DatasetManifest(
        num_classes=spec.num_classes,
        d_min=spec.d_min,
        d_max=spec.d_max,
        class_names=["background"] + [f"class{k}" for k in range(1, spec.num_classes)],
        image_size=[spec.height, spec.width],
        splits=dict(counts),
        seed=seed,
    )
    manifest.save(out)
    manifest.root = str(out)
    return manifest


# ---------------------------------------------------------------------------
# tensors


class TensorSample(NamedTuple):
    image: torch.Tensor  # 3 x H x W normalized
    log_depth: torch.Tensor  # 1 x H x W in [0, 1], 0 where invalid
    labels: torch.Tensor  # H x W int64
    valid: torch.Tensor  # H x W bool
    depth: torch.Tensor  # H x W metric meters, 0 where invalid


def normalize(image: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    return (image - np.asarray(mean, dtype=image.dtype)) / np.asarray(std, dtype=image.dtype)


def denormalize(image: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    return image * np.asarray(std, dtype=image.dtype) + np.asarray(mean, dtype=image.dtype)


def center_crop(sample: Sample, size: Sequence[int]) -> Sample:
    """Central H x W window of every map; an empty ``size`` returns the sample as is."""
    if not size:
        return sample
    h, w = size
    H, W = sample.labels.shape
    if not (0 < h <= H and 0 < w <= W):
        raise ValueError(f"crop {h}x{w} does not fit sample {sample.id!r} of size {H}x{W}")
    y, x = (H - h) // 2, (W - w) // 2
    win = (slice(y, y + h), slice(x, x + w))
    depth = DepthMap(sample.depth.values[win].copy(), sample.depth.valid[win].copy())
    return Sample(sample.image[win].copy(), depth, sample.labels[win].copy(), sample.id)


def sample_to_tensors(sample: Sample, manifest: DatasetManifest) -> TensorSample:
    rng_ = manifest.depth_range
    valid = validity_mask(sample.depth)
    depth = DepthMap(np.where(valid, sample.depth.values, 0.0), valid)
    logd = to_log_depth(depth, rng_)
    metric = np.where(valid, np.clip(depth.values, rng_.d_min, rng_.d_max), 0.0)
    img = normalize(sample.image.astype(np.float32), manifest.mean, manifest.std)
    return TensorSample(
        torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).float(),
        torch.from_numpy(logd.values).float().unsqueeze(0),
        torch.from_numpy(sample.labels.astype(np.int64)),
        torch.from_numpy(valid),
        torch.from_numpy(metric).float(),
    )


def collate(items: Sequence[TensorSample]) -> TensorSample:
    return TensorSample(*(torch.stack(list(t)) for t in zip(*items)))
