"""Depth error statistics and segmentation confusion-matrix metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from depthseg.depth_space import DepthMap, DepthRange, validity_mask

DEPTH_KEYS = ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3")
REPORT_KEYS = DEPTH_KEYS + ("miou", "pixel_acc")


@dataclass
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def mean(cls, items: list["DepthMetrics"]) -> "DepthMetrics":
        if not items:
            raise ValueError("no depth metrics to average")
        return cls(**{k: float(np.mean([getattr(m, k) for m in items])) for k in DEPTH_KEYS})


def depth_metrics(pred: DepthMap, gt: DepthMap, range: DepthRange) -> DepthMetrics:
    """Standard monocular-depth errors over gt-valid, in-range pixels.

    Predictions are clamped to the range first; the delta thresholds use a
    strict ``max(p/g, g/p) < 1.25**k``.
    """
    g_all = np.asarray(gt.values, dtype=np.float64)
    mask = validity_mask(gt)
    with np.errstate(invalid="ignore"):
        mask &= (g_all >= range.d_min) & (g_all <= range.d_max)
    if not mask.any():
        raise ValueError("depth metrics: evaluation mask is empty")
    g = g_all[mask]
    p = np.clip(np.asarray(pred.values, dtype=np.float64)[mask], range.d_min, range.d_max)
    diff = p - g
    ratio = np.maximum(p / g, g / p)
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff**2 / g)),
        rmse=float(np.sqrt(np.mean(diff**2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
    )


@dataclass
class SegAccumulator:
    """K x K confusion counts; rows are ground truth, columns predictions."""

    num_classes: int
    ignore_id: int = 255
    confusion: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.confusion is None:
            self.confusion = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    def merge(self, other: "SegAccumulator") -> "SegAccumulator":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge accumulators with different class counts")
        return SegAccumulator(self.num_classes, self.ignore_id, self.confusion + other.confusion)


def update_confusion(acc: SegAccumulator, pred_labels: np.ndarray, gt_labels: np.ndarray) -> SegAccumulator:
    pred = np.asarray(pred_labels)
    gt = np.asarray(gt_labels)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    K = acc.num_classes
    keep = gt != acc.ignore_id
    g = gt[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if g.size and (g.min() < 0 or g.max() >= K):
        raise ValueError(f"ground-truth label outside 0..{K - 1}")
    if p.size and (p.min() < 0 or p.max() >= K):
        raise ValueError(f"predicted label outside 0..{K - 1}")
    counts = np.bincount(g * K + p, minlength=K * K).reshape(K, K)
    return SegAccumulator(K, acc.ignore_id, acc.confusion + counts)


def miou(acc: SegAccumulator) -> tuple[float, np.ndarray, float]:
    """(mean IoU over classes with a non-zero union, per-class IoU, pixel accuracy).

    Per-class IoU is NaN for classes absent from both ground truth and prediction.
    """
    conf = acc.confusion.astype(np.float64)
    total = conf.sum()
    if total == 0:
        raise ValueError("miou: no scored pixels")
    tp = np.diag(conf)
    union = conf.sum(axis=0) + conf.sum(axis=1) - tp
    present = union > 0
    iou = np.full(acc.num_classes, np.nan)
    iou[present] = tp[present] / union[present]
    return float(iou[present].mean()), iou, float(tp.sum() / total)
