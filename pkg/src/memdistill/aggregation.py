"""Cross-view aggregation of per-camera feature samples."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from memdistill.encoders import FeatureSet
from memdistill.errors import InvalidInputError

MODES = ("mean", "max")


@dataclass
class ViewSamples:
    point_index: int
    samples: list  # list of C-vectors, one per camera that sees the point


def cross_view_aggregate(samples_per_point, mode: str = "mean", num_points: int | None = None) -> FeatureSet:
    """Collapse each point's view samples into one vector.

    Returns a FeatureSet with one row per point index in ``[0, num_points)``;
    rows of points with no samples are zero and masked out.
    """
    if mode not in MODES:
        raise InvalidInputError(f"unknown aggregation mode {mode!r}")
    if num_points is None:
        num_points = 1 + max((s.point_index for s in samples_per_point), default=-1)
    point_index, view_rows = [], []
    for s in samples_per_point:
        if len(s.samples) == 0:
            raise InvalidInputError(f"point {s.point_index} has no view samples")
        rows = np.asarray(s.samples, dtype=np.float64).reshape(len(s.samples), -1)
        point_index.extend([s.point_index] * len(rows))
        view_rows.append(rows)
    if not view_rows:
        return FeatureSet(np.zeros((num_points, 0)), np.zeros(num_points, dtype=bool))
    return aggregate_arrays(np.asarray(point_index), np.concatenate(view_rows), num_points, mode)


def aggregate_arrays(point_index: np.ndarray, samples: np.ndarray, num_points: int, mode: str = "mean") -> FeatureSet:
    """Vectorised form: ``samples[i]`` was observed for point ``point_index[i]``."""
    if mode not in MODES:
        raise InvalidInputError(f"unknown aggregation mode {mode!r}")
    samples = np.asarray(samples, dtype=np.float64)
    counts = np.bincount(point_index, minlength=num_points)
    visible = counts > 0
    out = np.zeros((num_points, samples.shape[1]))
    if mode == "mean":
        np.add.at(out, point_index, samples)
        out[visible] /= counts[visible, None]
    else:
        out[visible] = -np.inf
        np.maximum.at(out, point_index, samples)
    return FeatureSet(out, visible)
