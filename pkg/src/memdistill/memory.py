"""FIFO bank of past unified features, ego-motion warping and temporal fusion."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from memdistill.encoders import FeatureSet, as_rows
from memdistill.errors import InvalidInputError, OrderingError
from memdistill.geometry import RigidPose, apply, inverse

DEFAULT_CAPACITY = 6
DEFAULT_RADIUS = 0.25


@dataclass
class MemoryEntry:
    timestamp: int
    ego_pose: RigidPose  # world-from-ego when the entry was recorded
    anchors: np.ndarray  # M x 3, world frame
    features: np.ndarray  # M x C

    def __post_init__(self):
        self.anchors = np.asarray(self.anchors, dtype=np.float64).reshape(-1, 3)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or len(self.features) != len(self.anchors):
            raise InvalidInputError("anchors and features must have the same row count")

    @classmethod
    def from_ego(cls, timestamp: int, ego_pose: RigidPose, points, features) -> MemoryEntry:
        return cls(timestamp, ego_pose, apply(ego_pose, points), as_rows(features))


class MemoryBank:
    def __init__(self, capacity: int = DEFAULT_CAPACITY, entries=()):
        if capacity < 0:
            raise InvalidInputError("capacity must be >= 0")
        self.capacity = capacity
        self.entries: deque[MemoryEntry] = deque()
        for e in entries:
            self.push(e)

    def __len__(self) -> int:
        return len(self.entries)

    def push(self, entry: MemoryEntry) -> MemoryBank:
        if self.entries and entry.timestamp <= self.entries[-1].timestamp:
            raise OrderingError(
                f"timestamp {entry.timestamp} not after newest stored {self.entries[-1].timestamp}"
            )
        if self.capacity == 0:
            return self
        self.entries.append(entry)
        while len(self.entries) > self.capacity:
            self.entries.popleft()
        return self

    def before(self, timestamp: int) -> list[MemoryEntry]:
        return [e for e in self.entries if e.timestamp < timestamp]

    def copy(self) -> MemoryBank:
        bank = MemoryBank(self.capacity)
        bank.entries = deque(self.entries)
        return bank


def push(bank: MemoryBank, entry: MemoryEntry) -> MemoryBank:
    return bank.push(entry)


def warp_entries(entries, current_pose: RigidPose) -> list[tuple[np.ndarray, np.ndarray]]:
    """Map stored world-frame anchors into the current ego frame."""
    if isinstance(entries, MemoryBank):
        entries = entries.entries
    to_ego = inverse(current_pose)
    return [(apply(to_ego, e.anchors), e.features) for e in entries]


def fuse_long_term(current_points, current_features, warped, radius: float = DEFAULT_RADIUS) -> FeatureSet:
    """Average each point's feature with its nearest warped match (within
    ``radius``) from every history entry; unmatched points keep their own."""
    if radius <= 0:
        raise InvalidInputError("radius must be positive")
    pts = np.asarray(current_points, dtype=np.float64).reshape(-1, 3)
    cur = as_rows(current_features)
    if len(cur) != len(pts):
        raise InvalidInputError("current points and features differ in length")
    total = cur.copy()
    count = np.ones(len(pts))
    for anchors, feats in warped:
        feats = as_rows(feats)
        if feats.ndim != 2 or (len(feats) and feats.shape[1] != cur.shape[1]):
            raise InvalidInputError(f"history feature dim {feats.shape} != current dim {cur.shape[1]}")
        if len(anchors) == 0 or len(pts) == 0:
            continue
        dist, idx = cKDTree(anchors).query(pts, k=1, distance_upper_bound=radius)
        hit = np.isfinite(dist)
        total[hit] += feats[idx[hit]]
        count[hit] += 1
    mask = current_features.mask if isinstance(current_features, FeatureSet) else None
    return FeatureSet(total / count[:, None], mask)
