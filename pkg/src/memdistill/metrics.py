"""Segmentation, robustness and detection metrics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from memdistill.errors import DegenerateInputError, InvalidInputError

DISTANCE_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
NUM_SEVERITIES = 3
NUM_TP_METRICS = 5


class DegenerateBaselineError(DegenerateInputError):
    pass


# --------------------------------------------------------------------------
# segmentation


def confusion_matrix(labels, predictions, num_classes: int) -> np.ndarray:
    """Rows are ground truth, columns predictions."""
    labels = np.asarray(labels, dtype=np.int64).ravel()
    predictions = np.asarray(predictions, dtype=np.int64).ravel()
    if labels.shape != predictions.shape:
        raise InvalidInputError("labels and predictions differ in length")
    if len(labels) and (labels.min() < 0 or labels.max() >= num_classes or predictions.min() < 0 or predictions.max() >= num_classes):
        raise InvalidInputError("class id outside [0, num_classes)")
    return np.bincount(labels * num_classes + predictions, minlength=num_classes**2).reshape(num_classes, num_classes)


def _check_cm(cm) -> np.ndarray:
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.shape[0] == 0:
        raise InvalidInputError(f"confusion matrix must be non-empty K x K, got {cm.shape}")
    if np.any(cm < 0):
        raise InvalidInputError("confusion matrix has negative counts")
    return cm


def iou_per_class(cm) -> np.ndarray:
    """IoU per class; NaN where the class never occurs in truth or prediction."""
    cm = _check_cm(cm).astype(np.float64)
    tp = np.diag(cm)
    denom = cm.sum(axis=0) + cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, tp / np.where(denom > 0, denom, 1.0), np.nan)


def miou(cm) -> float:
    iou = iou_per_class(cm)
    present = ~np.isnan(iou)
    if not present.any():
        return float("nan")
    return float(iou[present].mean())


# --------------------------------------------------------------------------
# robustness


@dataclass
class RobustnessInput:
    clean_miou: float
    per_corruption: dict  # corruption id -> 3 severity mIoUs
    baseline: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, table in (("per_corruption", self.per_corruption), ("baseline", self.baseline)):
            for key, vals in table.items():
                if len(vals) != NUM_SEVERITIES:
                    raise InvalidInputError(f"{name}[{key!r}] needs {NUM_SEVERITIES} severities, got {len(vals)}")


def corruption_error(inp: RobustnessInput) -> tuple[dict, float]:
    ce = {}
    for key, vals in inp.per_corruption.items():
        if key not in inp.baseline:
            raise InvalidInputError(f"no baseline for corruption {key!r}")
        denom = sum(1.0 - v for v in inp.baseline[key])
        if denom == 0:
            raise DegenerateBaselineError(f"baseline is perfect on {key!r}; CE undefined")
        ce[key] = sum(1.0 - v for v in vals) / denom
    if not ce:
        raise InvalidInputError("no corruptions given")
    return ce, sum(ce.values()) / len(ce)


def resilience_rate(inp: RobustnessInput) -> tuple[dict, float]:
    if inp.clean_miou == 0:
        raise DegenerateBaselineError("clean mIoU is zero; RR undefined")
    rr = {key: sum(vals) / (NUM_SEVERITIES * inp.clean_miou) for key, vals in inp.per_corruption.items()}
    if not rr:
        raise InvalidInputError("no corruptions given")
    return rr, sum(rr.values()) / len(rr)


# --------------------------------------------------------------------------
# detection


@dataclass
class Prediction:
    cls: int
    center: tuple[float, float]
    confidence: float


@dataclass
class GroundTruth:
    cls: int
    center: tuple[float, float]


@dataclass
class DetectionSet:
    predictions: list
    ground_truth: list

    def __post_init__(self):
        for p in self.predictions:
            if not math.isfinite(p.confidence):
                raise InvalidInputError("non-finite confidence")

    def classes(self) -> list[int]:
        return sorted({g.cls for g in self.ground_truth} | {p.cls for p in self.predictions})


def match_predictions(preds, gts, threshold: float) -> np.ndarray:
    """Greedy matching in descending confidence; each ground truth is taken
    at most once, by the nearest still-free one within ``threshold``.

    Returns a 0/1 true-positive flag per prediction in ranked order.
    """
    order = sorted(range(len(preds)), key=lambda i: -preds[i].confidence)
    gt_xy = np.array([g.center for g in gts], dtype=np.float64).reshape(-1, 2)
    taken = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        if not len(gts):
            break
        d = np.hypot(*(gt_xy - np.asarray(preds[i].center, dtype=np.float64)).T)
        d[taken] = np.inf
        j = int(np.argmin(d))
        if d[j] <= threshold:
            taken[j] = True
            tp[rank] = 1.0
    return tp


def interpolated_ap(tp: np.ndarray, num_gt: int, points: int = 101) -> float:
    if num_gt == 0:
        raise InvalidInputError("AP undefined without ground truth")
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / num_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    # running max from the right gives the precision envelope
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    # k / (points - 1) rounds the same way as recall fractions such as 3/10
    levels = np.arange(points) / (points - 1)
    pos = np.searchsorted(recall, levels, side="left")
    return float(np.where(pos < len(recall), envelope[np.minimum(pos, len(recall) - 1)], 0.0).mean())


def average_precision(det: DetectionSet, cls: int, dist_threshold: float) -> float | None:
    """101-point interpolated AP; ``None`` when the class has no ground truth."""
    gts = [g for g in det.ground_truth if g.cls == cls]
    if not gts:
        return None
    preds = [p for p in det.predictions if p.cls == cls]
    return interpolated_ap(match_predictions(preds, gts, dist_threshold), len(gts))


def mean_average_precision(det: DetectionSet, thresholds=DISTANCE_THRESHOLDS) -> float:
    aps = [
        ap
        for c in det.classes()
        for d in thresholds
        if (ap := average_precision(det, c, d)) is not None
    ]
    if not aps:
        raise DegenerateInputError("no class has ground truth")
    return float(np.mean(aps))


def nds(map_value: float, mtp_values) -> float:
    if not 0.0 <= map_value <= 1.0:
        raise InvalidInputError(f"mAP {map_value} outside [0, 1]")
    mtp = list(mtp_values)
    if len(mtp) != NUM_TP_METRICS:
        raise InvalidInputError(f"expected {NUM_TP_METRICS} mTP values, got {len(mtp)}")
    if any(v < 0 or not math.isfinite(v) for v in mtp):
        raise InvalidInputError("mTP values must be finite and non-negative")
    return (5.0 * map_value + sum(1.0 - min(1.0, v) for v in mtp)) / 10.0


# --------------------------------------------------------------------------
# report


@dataclass
class MetricReport:
    miou: float | None = None
    per_class_iou: list | None = None
    mce: float | None = None  # percent
    mrr: float | None = None  # percent
    map: float | None = None
    nds: float | None = None
    confusion: list | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        out = {}
        for key in ("miou", "per_class_iou", "mce", "mrr", "map", "nds"):
            val = getattr(self, key)
            if val is None:
                continue
            if isinstance(val, list):
                val = [None if (v is None or math.isnan(v)) else float(v) for v in val]
            elif math.isnan(val):
                val = None
            out[key] = val
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=False)


def segmentation_report(cm) -> MetricReport:
    iou = iou_per_class(cm)
    return MetricReport(miou=miou(cm), per_class_iou=[float(v) for v in iou], confusion=np.asarray(cm).tolist())
