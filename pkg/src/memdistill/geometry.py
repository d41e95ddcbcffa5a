"""Rigid poses, pinhole cameras and LiDAR-to-pixel correspondences."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from memdistill.errors import InvalidInputError

NEAR_PLANE = 1e-6


@dataclass(frozen=True)
class RigidPose:
    """Maps points x -> rotation @ x + translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> RigidPose:
        return cls()

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> RigidPose:
        c, s = np.cos(yaw), np.sin(yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(rot, np.asarray(translation, dtype=np.float64))

    @classmethod
    def random(cls, rng: np.random.Generator, max_translation: float = 10.0) -> RigidPose:
        q, r = np.linalg.qr(rng.normal(size=(3, 3)))
        q = q * np.sign(np.diag(r))
        if np.linalg.det(q) < 0:
            q[:, 0] = -q[:, 0]
        return cls(q, rng.uniform(-max_translation, max_translation, size=3))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def to_array(self) -> np.ndarray:
        """12 values: row-major rotation followed by translation."""
        return np.concatenate([self.rotation.ravel(), self.translation])

    @classmethod
    def from_array(cls, values) -> RigidPose:
        values = np.asarray(values, dtype=np.float64)
        return cls(values[:9].reshape(3, 3), values[9:12])

    def __eq__(self, other):
        if not isinstance(other, RigidPose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    __hash__ = None


def compose(a: RigidPose, b: RigidPose) -> RigidPose:
    """Pose equivalent to applying ``b`` first, then ``a``."""
    return RigidPose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(p: RigidPose) -> RigidPose:
    rt = p.rotation.T
    return RigidPose(rt, -rt @ p.translation)


def apply(p: RigidPose, x) -> np.ndarray:
    """Transform a single 3-vector or an (N, 3) array."""
    x = np.asarray(x, dtype=np.float64)
    return x @ p.rotation.T + p.translation


@dataclass(frozen=True)
class CameraModel:
    intrinsics: np.ndarray
    extrinsics: RigidPose  # ego/LiDAR frame -> camera frame
    width: int
    height: int

    def __post_init__(self):
        k = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        if k[2, 2] != 1.0 or k[0, 0] <= 0 or k[1, 1] <= 0:
            raise InvalidInputError(f"malformed intrinsics:\n{k}")
        if self.width <= 0 or self.height <= 0:
            raise InvalidInputError("image size must be positive")
        object.__setattr__(self, "intrinsics", k)

    @classmethod
    def pinhole(cls, fx, fy, cx, cy, width, height, extrinsics=None) -> CameraModel:
        k = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
        return cls(k, extrinsics if extrinsics is not None else RigidPose.identity(), width, height)

    def __eq__(self, other):
        if not isinstance(other, CameraModel):
            return NotImplemented
        return (
            np.array_equal(self.intrinsics, other.intrinsics)
            and self.extrinsics == other.extrinsics
            and (self.width, self.height) == (other.width, other.height)
        )

    __hash__ = None


@dataclass(frozen=True)
class Correspondence:
    point_index: int
    camera_index: int
    u: float
    v: float
    depth: float


def project_array(points, camera: CameraModel):
    """Vectorised projection.

    Returns ``(uv, depth, valid)`` where ``uv`` is (N, 2); rows with
    ``valid == False`` hold undefined values.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise InvalidInputError("non-finite point coordinate")
    cam = apply(camera.extrinsics, pts)
    depth = cam[:, 2]
    front = depth > NEAR_PLANE
    with np.errstate(divide="ignore", invalid="ignore"):
        pix = cam @ camera.intrinsics.T
        uv = pix[:, :2] / np.where(front, depth, 1.0)[:, None]
    valid = (
        front
        & (uv[:, 0] >= 0)
        & (uv[:, 0] < camera.width)
        & (uv[:, 1] >= 0)
        & (uv[:, 1] < camera.height)
    )
    return uv, depth, valid


def project_points(points, camera: CameraModel) -> list[tuple[float, float, float] | None]:
    uv, depth, valid = project_array(points, camera)
    return [
        (float(uv[i, 0]), float(uv[i, 1]), float(depth[i])) if valid[i] else None
        for i in range(len(depth))
    ]


def correspondence_arrays(coords, cameras):
    """Structure-of-arrays form of :func:`build_correspondences`.

    Returns ``(point_index, camera_index, uv, depth)`` ordered by camera,
    then by point.
    """
    if not cameras:
        raise InvalidInputError("at least one camera is required")
    pidx, cidx, uvs, depths = [], [], [], []
    for j, cam in enumerate(cameras):
        uv, depth, valid = project_array(coords, cam)
        idx = np.flatnonzero(valid)
        pidx.append(idx)
        cidx.append(np.full(len(idx), j, dtype=np.int64))
        uvs.append(uv[idx])
        depths.append(depth[idx])
    return (
        np.concatenate(pidx),
        np.concatenate(cidx),
        np.concatenate(uvs).reshape(-1, 2),
        np.concatenate(depths),
    )


def build_correspondences(cloud, cameras) -> list[Correspondence]:
    coords = getattr(cloud, "coords", cloud)
    pidx, cidx, uv, depth = correspondence_arrays(coords, cameras)
    return [
        Correspondence(int(p), int(c), float(u), float(v), float(d))
        for p, c, (u, v), d in zip(pidx, cidx, uv, depth)
    ]


def back_project(u: float, v: float, depth: float, camera: CameraModel) -> np.ndarray:
    """Inverse of projection for a known depth; returns the ego-frame point."""
    ray = np.linalg.solve(camera.intrinsics, np.array([u, v, 1.0]))
    return apply(inverse(camera.extrinsics), ray * depth)
