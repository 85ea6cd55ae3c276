"""Training-time augmentation applied consistently to images, depth, labels and masks."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np
from skimage.color import hsv2rgb, rgb2hsv

from depthseg.data import Sample
from depthseg.depth_space import DepthMap


@dataclass(frozen=True)
class AugConfig:
    n_patches: int = 4
    min_frac: float = 1 / 8
    max_frac: float = 1 / 2
    mixup_p: float = 0.5
    cross_image: bool = True  # False: patches only move within their own image
    flip_p: float = 0.5
    brightness: float = 0.05  # additive, U[-b, b]
    contrast: float = 0.1  # factor U[1-c, 1+c] about the image mean
    gamma: float = 0.1  # exponent U[1-g, 1+g]
    hue: float = 0.02  # hue shift as a fraction of the color circle
    saturation: float = 0.05  # additive saturation shift

    def __post_init__(self):
        if self.n_patches < 0:
            raise ValueError(f"n_patches must be >= 0, got {self.n_patches}")
        if not 0 < self.min_frac <= self.max_frac <= 1:
            raise ValueError(f"need 0 < min_frac <= max_frac <= 1, got {self.min_frac}, {self.max_frac}")
        for name in ("mixup_p", "flip_p"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must be a probability, got {getattr(self, name)}")
        if self.gamma >= 1 or self.contrast >= 1:
            raise ValueError("gamma and contrast ranges must stay below 1")


def photometric(image: np.ndarray, rng: np.random.Generator, cfg: AugConfig) -> np.ndarray:
    """Brightness, contrast, gamma and HSV jitter; every draw is made even when
    its range is zero so the random stream does not depend on the config."""
    b = rng.uniform(-cfg.brightness, cfg.brightness)
    c = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)
    g = rng.uniform(1 - cfg.gamma, 1 + cfg.gamma)
    dh = rng.uniform(-cfg.hue, cfg.hue)
    ds = rng.uniform(-cfg.saturation, cfg.saturation)
    return adjust(image, brightness=b, contrast=c, gamma=g, hue=dh, saturation=ds)


def adjust(
    image: np.ndarray,
    brightness: float = 0.0,
    contrast: float = 1.0,
    gamma: float = 1.0,
    hue: float = 0.0,
    saturation: float = 0.0,
) -> np.ndarray:
    out = image
    if brightness != 0:
        out = np.clip(out + brightness, 0, 1)
    if contrast != 1:
        m = out.mean()
        out = np.clip((out - m) * contrast + m, 0, 1)
    if gamma != 1:
        out = out**gamma
    if hue != 0 or saturation != 0:
        hsv = rgb2hsv(out)
        hsv[..., 0] = (hsv[..., 0] + hue) % 1.0
        hsv[..., 1] = np.clip(hsv[..., 1] + saturation, 0, 1)
        out = np.clip(hsv2rgb(hsv), 0, 1)
    return out.astype(image.dtype, copy=False)


def flip_sample(sample: Sample) -> Sample:
    return replace(
        sample,
        image=sample.image[:, ::-1].copy(),
        depth=DepthMap(sample.depth.values[:, ::-1].copy(), sample.depth.valid[:, ::-1].copy()),
        labels=sample.labels[:, ::-1].copy(),
    )


def hflip(sample: Sample, rng: np.random.Generator, p: float) -> Sample:
    return flip_sample(sample) if rng.random() < p else sample


class PatchSlot(NamedTuple):
    image: int  # batch index
    y: int
    x: int
    side: int


def patch_sides(h: int, w: int, cfg: AugConfig) -> list[int]:
    """Allowed patch sides: multiples of h/8 inside [min_frac*h, max_frac*h]."""
    unit = max(1, h // 8)
    lo, hi = math.ceil(cfg.min_frac * h), math.floor(cfg.max_frac * h)
    if hi > min(h, w):
        raise ValueError(f"patch side up to {hi} px does not fit a {h}x{w} image")
    sides = [s for s in range(unit, hi + 1, unit) if s >= lo]
    if not sides:
        raise ValueError(f"no patch side in [{lo}, {hi}] is a multiple of {unit} for height {h}")
    return sides


def draw_slots(rng: np.random.Generator, batch_size: int, h: int, w: int, cfg: AugConfig) -> list[PatchSlot]:
    sides = np.asarray(patch_sides(h, w, cfg))
    lo, hi = math.ceil(cfg.min_frac * h), math.floor(cfg.max_frac * h)
    slots = []
    for b in range(batch_size):
        for _ in range(cfg.n_patches):
            raw = int(rng.integers(lo, hi + 1))
            side = int(sides[np.argmin(np.abs(sides - raw))])
            y = int(rng.integers(0, h - side + 1))
            x = int(rng.integers(0, w - side + 1))
            slots.append(PatchSlot(b, y, x, side))
    return slots


def draw_permutation(rng: np.random.Generator, slots: Sequence[PatchSlot], cross_image: bool) -> np.ndarray:
    """Uniform permutation within each group of equal-sized (and, if not
    ``cross_image``, same-image) patches, so every paste is size-exact."""
    perm = np.arange(len(slots))
    groups: dict[tuple, list[int]] = {}
    for i, s in enumerate(slots):
        key = (s.side,) if cross_image else (s.side, s.image)
        groups.setdefault(key, []).append(i)
    for key in sorted(groups):
        idx = np.asarray(groups[key])
        perm[idx] = idx[rng.permutation(len(idx))]
    return perm


def apply_patch_shuffle(batch: Sequence[Sample], slots: Sequence[PatchSlot], perm: Sequence[int]) -> list[Sample]:
    """Slot ``j`` receives the content originally under slot ``perm[j]``.

    All cuts read the unmodified batch; pastes happen in slot order, later ones
    overwriting earlier ones.
    """
    src = [(s.image, s.depth.values, s.depth.valid, s.labels) for s in batch]
    dst = [tuple(a.copy() for a in maps) for maps in src]
    for j, slot in enumerate(slots):
        origin = slots[perm[j]]
        if origin.side != slot.side:
            raise ValueError(f"slot {j}: cannot paste a {origin.side}px patch into a {slot.side}px slot")
        k = slot.side
        for a_dst, a_src in zip(dst[slot.image], src[origin.image]):
            a_dst[slot.y : slot.y + k, slot.x : slot.x + k] = a_src[origin.y : origin.y + k, origin.x : origin.x + k]
    return [
        replace(s, image=img, depth=DepthMap(dep, val), labels=lab) for s, (img, dep, val, lab) in zip(batch, dst)
    ]


def patch_mixup(batch: Sequence[Sample], rng: np.random.Generator, cfg: AugConfig) -> list[Sample]:
    if cfg.n_patches == 0 or not batch:
        return list(batch)
    h, w = batch[0].image.shape[:2]
    for s in batch:
        if s.image.shape[:2] != (h, w):
            raise ValueError("patch_mixup needs samples of identical size")
    slots = draw_slots(rng, len(batch), h, w, cfg)
    perm = draw_permutation(rng, slots, cfg.cross_image)
    return apply_patch_shuffle(batch, slots, perm)


def augment_batch(batch: Sequence[Sample], rng: np.random.Generator, cfg: AugConfig) -> list[Sample]:
    """photometric -> flip -> (with probability mixup_p) patch mixup."""
    out = [replace(s, image=photometric(s.image, rng, cfg)) for s in batch]
    out = [hflip(s, rng, cfg.flip_p) for s in out]
    if rng.random() < cfg.mixup_p:
        out = patch_mixup(out, rng, cfg)
    return out
