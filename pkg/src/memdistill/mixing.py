"""Scene-level mixing of two sequences' clouds and the matching targets."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from memdistill.encoders import FeatureSet
from memdistill.errors import ConsistencyError, InvalidInputError
from memdistill.scenedata import PointCloud

DEFAULT_BANDS = 6
DEFAULT_EXTENT = math.pi


@dataclass
class MixedScene:
    cloud: PointCloud
    source_targets: FeatureSet  # mask marks points whose source row had a target


def inclination(coords: np.ndarray) -> np.ndarray:
    return np.arctan2(coords[:, 2], np.hypot(coords[:, 0], coords[:, 1]))


def azimuth(coords: np.ndarray) -> np.ndarray:
    return np.arctan2(coords[:, 1], coords[:, 0])


def _with_ids(cloud: PointCloud) -> PointCloud:
    return cloud if cloud.ids is not None else PointCloud(
        cloud.coords, cloud.intensity, cloud.label, cloud.provenance, cloud.point_ids()
    )


def lasermix_masks(a: PointCloud, b: PointCloud, num_bands: int, phase: int, inclination_range=None):
    """Boolean masks of the rows kept from ``a`` and ``b``.

    Bands split ``inclination_range`` evenly (default: the pooled extent of
    both clouds).  Band ``i`` goes to ``a`` when ``(i + phase)`` is even.
    """
    if num_bands < 2:
        raise InvalidInputError("num_bands must be >= 2")
    inc_a, inc_b = inclination(a.coords), inclination(b.coords)
    if inclination_range is None:
        pooled = np.concatenate([inc_a, inc_b])
        lo, hi = (pooled.min(), pooled.max()) if len(pooled) else (0.0, 1.0)
    else:
        lo, hi = inclination_range
    width = (hi - lo) / num_bands if hi > lo else 1.0

    def band(inc):
        return np.clip(np.floor((inc - lo) / width), 0, num_bands - 1).astype(np.int64)

    keep_a = (band(inc_a) + phase) % 2 == 0
    keep_b = (band(inc_b) + phase) % 2 == 1
    return keep_a, keep_b


def lasermix(a: PointCloud, b: PointCloud, num_bands: int = DEFAULT_BANDS, rng=None, inclination_range=None, phase: int | None = None) -> PointCloud:
    """Alternate inclination bands between the two clouds."""
    if phase is None:
        rng = rng if rng is not None else np.random.default_rng()
        phase = int(rng.integers(2))
    keep_a, keep_b = lasermix_masks(a, b, num_bands, phase, inclination_range)
    return PointCloud.concatenate([_with_ids(a).subset(keep_a), _with_ids(b).subset(keep_b)])


def sector_mask(coords: np.ndarray, azimuth_start: float, azimuth_extent: float) -> np.ndarray:
    if not 0.0 <= azimuth_extent <= 2 * math.pi:
        raise InvalidInputError("azimuth_extent must lie in [0, 2*pi]")
    if azimuth_extent >= 2 * math.pi:
        return np.ones(len(coords), dtype=bool)
    return np.mod(azimuth(coords) - azimuth_start, 2 * math.pi) < azimuth_extent


def polarmix_swap(a: PointCloud, b: PointCloud, azimuth_start: float = 0.0, azimuth_extent: float = DEFAULT_EXTENT) -> PointCloud:
    """Replace the points of ``a`` inside an azimuth sector by those of ``b``."""
    in_a = sector_mask(a.coords, azimuth_start, azimuth_extent)
    in_b = sector_mask(b.coords, azimuth_start, azimuth_extent)
    return PointCloud.concatenate([_with_ids(a).subset(~in_a), _with_ids(b).subset(in_b)])


def build_mixed_targets(mixed: PointCloud, fused_a: FeatureSet, fused_b: FeatureSet, sequence_a: int, sequence_b: int) -> MixedScene:
    """Look up each mixed point's target in its own source's fused features.

    ``fused_a``/``fused_b`` are indexed by the source clouds' original row
    ids; rows masked out there (not seen by any camera) stay masked here.
    """
    if fused_a.dim != fused_b.dim:
        raise InvalidInputError("source feature dimensions differ")
    ids = mixed.point_ids()
    targets = np.zeros((len(mixed), fused_a.dim))
    mask = np.zeros(len(mixed), dtype=bool)
    for seq, fused in ((sequence_b, fused_b), (sequence_a, fused_a)):
        rows = mixed.provenance == seq
        src = ids[rows]
        if np.any((src < 0) | (src >= len(fused))):
            raise ConsistencyError(f"mixed point ids {src[(src < 0) | (src >= len(fused))][:5]} have no source feature")
        targets[rows] = fused.features[src]
        mask[rows] = fused.valid()[src]
    unknown = ~np.isin(mixed.provenance, [sequence_a, sequence_b])
    if np.any(unknown):
        raise ConsistencyError(f"provenance {np.unique(mixed.provenance[unknown])} matches neither source")
    return MixedScene(mixed, FeatureSet(targets, mask))
