"""Conversions between metric depth, normalized log depth and stereo disparity.

Metric maps carry an explicit validity mask. Invalid pixels hold the sentinel
value 0 in every representation so that 16-bit PNG export stays lossless for
"no data".
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

logger = logging.getLogger(__name__)

LOG_TOL = 1e-6


@dataclass(frozen=True)
class DepthRange:
    d_min: float
    d_max: float

    def __post_init__(self):
        if not (math.isfinite(self.d_min) and math.isfinite(self.d_max)):
            raise ValueError(f"depth range must be finite, got {self}")
        if not 0 < self.d_min < self.d_max:
            raise ValueError(f"need 0 < d_min < d_max, got d_min={self.d_min}, d_max={self.d_max}")

    @property
    def log_span(self) -> float:
        return math.log(self.d_max / self.d_min)


@dataclass(frozen=True)
class DepthMap:
    """Metric depth in meters plus a validity mask of the same shape."""

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.valid.shape:
            raise ValueError(f"values shape {self.values.shape} != mask shape {self.valid.shape}")


@dataclass(frozen=True)
class LogDepthMap:
    """Depth normalized to [0, 1] on a log scale between d_min and d_max."""

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.valid.shape:
            raise ValueError(f"values shape {self.values.shape} != mask shape {self.valid.shape}")


def validity_mask(d: DepthMap, range: DepthRange | None = None) -> np.ndarray:
    """Stored mask AND finite AND strictly positive.

    ``range`` is accepted for interface symmetry; out-of-range pixels are
    clamped elsewhere, not invalidated here.
    """
    with np.errstate(invalid="ignore"):
        return d.valid.astype(bool) & np.isfinite(d.values) & (d.values > 0)


def clamp_depth(d: DepthMap, range: DepthRange) -> DepthMap:
    """Clamp valid pixels into [d_min, d_max]; invalid pixels become 0."""
    valid = validity_mask(d)
    vals = np.where(valid, d.values, 0.0)
    clamped = np.clip(vals, range.d_min, range.d_max)
    n_clamped = int(np.count_nonzero(valid & (clamped != vals)))
    if n_clamped:
        logger.debug("clamped %d depth pixels into [%g, %g]", n_clamped, range.d_min, range.d_max)
    return DepthMap(np.where(valid, clamped, 0.0), valid)


def to_log_depth(d: DepthMap, range: DepthRange) -> LogDepthMap:
    valid = d.valid.astype(bool)
    vals = np.asarray(d.values, dtype=np.float64)
    if not np.all(np.isfinite(vals[valid])):
        raise ValueError("non-finite depth on a valid pixel")
    vals = np.clip(np.where(valid, vals, range.d_min), range.d_min, range.d_max)
    out = np.log(vals / range.d_min) / range.log_span
    return LogDepthMap(np.where(valid, out, 0.0), valid)


def from_log_depth(l: LogDepthMap, range: DepthRange) -> DepthMap:
    valid = l.valid.astype(bool)
    vals = np.asarray(l.values, dtype=np.float64)
    v = vals[valid]
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite log depth on a valid pixel")
    if v.size and (v.min() < -LOG_TOL or v.max() > 1 + LOG_TOL):
        raise ValueError(f"log depth outside [0, 1]: range [{v.min()}, {v.max()}]")
    vals = np.clip(np.where(valid, vals, 0.0), 0.0, 1.0)
    out = range.d_min * np.exp(vals * range.log_span)
    return DepthMap(np.where(valid, out, 0.0), valid)


def disparity_to_depth(disparity: np.ndarray, focal_px: float, baseline: float) -> DepthMap:
    if not (focal_px > 0 and baseline > 0):
        raise ValueError(f"focal_px and baseline must be positive, got {focal_px}, {baseline}")
    disp = np.asarray(disparity, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        valid = np.isfinite(disp) & (disp > 0)
    safe = np.where(valid, disp, 1.0)
    depth = np.where(valid, focal_px * baseline / safe, 0.0)
    return DepthMap(depth, valid)


# Tensor-side helpers used by the model and training loop. ``space`` selects the
# head parameterization: "log" (normalized log depth) or "linear" (normalized
# metric depth), the latter only for the linear-vs-log ablation.


def unit_to_metric(u: torch.Tensor, range: DepthRange, space: str = "log") -> torch.Tensor:
    if space == "log":
        return range.d_min * torch.exp(u * range.log_span)
    if space == "linear":
        return range.d_min + u * (range.d_max - range.d_min)
    raise ValueError(f"unknown depth space {space!r}")


def metric_to_unit(d: torch.Tensor, range: DepthRange, space: str = "log") -> torch.Tensor:
    d = d.clamp(range.d_min, range.d_max)
    if space == "log":
        return torch.log(d / range.d_min) / range.log_span
    if space == "linear":
        return (d - range.d_min) / (range.d_max - range.d_min)
    raise ValueError(f"unknown depth space {space!r}")
