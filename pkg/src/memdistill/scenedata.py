"""Synthetic multi-sensor driving sequences, augmentation and persistence.

The generator builds a straight road lined with buildings, poles, trees,
pedestrians and cars.  Every frame carries a LiDAR sweep in the ego frame and
one rendered image per camera.  Image pixels hold a per-class channel
signature (plus camera gain, offset and noise) at the location where the
nearest LiDAR point projects, which gives the frozen image encoder a
class-separating signal to distill.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from memdistill.errors import (
    BadMagicError,
    ConfigError,
    FormatError,
    TruncatedFileError,
    VersionMismatchError,
)
from memdistill.geometry import CameraModel, RigidPose, project_array

CLASS_NAMES = ("ground", "building", "car", "pole", "vegetation", "pedestrian")
GROUND, BUILDING, CAR, POLE, VEGETATION, PEDESTRIAN = range(6)

# Mean LiDAR return intensity per class; overlap on purpose so that geometry
# matters for recognition.
_INTENSITY_MEAN = np.array([0.25, 0.45, 0.65, 0.55, 0.35, 0.45])
_INTENSITY_STD = 0.12

# Signatures are global so that a probe trained on one sequence transfers.
_SIGNATURE_SEED = 20240607


@dataclass
class PointCloud:
    coords: np.ndarray
    intensity: np.ndarray
    label: np.ndarray
    provenance: np.ndarray
    ids: np.ndarray | None = None  # original row index, carried through mixing; not persisted

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        n = len(self.coords)
        self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(n)
        self.label = np.asarray(self.label, dtype=np.int64).reshape(n)
        self.provenance = np.asarray(self.provenance, dtype=np.int64).reshape(n)
        if self.ids is not None:
            self.ids = np.asarray(self.ids, dtype=np.int64).reshape(n)

    def __len__(self) -> int:
        return len(self.coords)

    def point_ids(self) -> np.ndarray:
        return self.ids if self.ids is not None else np.arange(len(self), dtype=np.int64)

    def subset(self, idx) -> PointCloud:
        return PointCloud(
            self.coords[idx],
            self.intensity[idx],
            self.label[idx],
            self.provenance[idx],
            self.point_ids()[idx],
        )

    def with_coords(self, coords) -> PointCloud:
        return PointCloud(coords, self.intensity, self.label, self.provenance, self.ids)

    @staticmethod
    def concatenate(clouds) -> PointCloud:
        return PointCloud(
            np.concatenate([c.coords for c in clouds]),
            np.concatenate([c.intensity for c in clouds]),
            np.concatenate([c.label for c in clouds]),
            np.concatenate([c.provenance for c in clouds]),
            np.concatenate([c.point_ids() for c in clouds]),
        )

    @staticmethod
    def empty() -> PointCloud:
        return PointCloud(np.zeros((0, 3)), [], [], [])

    def equals(self, other: PointCloud) -> bool:
        return all(
            np.array_equal(getattr(self, name), getattr(other, name))
            for name in ("coords", "intensity", "label", "provenance")
        )


@dataclass
class ImageGrid:
    data: np.ndarray  # H x W x C

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"expected H x W x C data, got shape {self.data.shape}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass
class Frame:
    timestamp: int
    ego_pose: RigidPose  # world-from-ego
    cloud: PointCloud
    cameras: list[CameraModel]
    images: list[ImageGrid]


@dataclass
class Sequence:
    id: int
    frames: list[Frame]
    num_classes: int

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class SceneConfig:
    num_frames: int = 12
    num_cameras: int = 2
    num_points: int = 8000
    num_classes: int = 6
    image_width: int = 64
    image_height: int = 32
    image_channels: int = 8
    speed: float = 5.0  # m/s along world x
    tick_duration: float = 0.5  # seconds per timestamp tick
    lidar_range: float = 30.0
    ground_fraction: float = 0.35
    camera_fov_deg: float = 90.0
    camera_spacing_deg: float = 60.0
    camera_height: float = 1.6
    lidar_height: float = 1.8
    num_buildings: int = 10
    num_cars: int = 10
    num_poles: int = 20
    num_trees: int = 10
    num_pedestrians: int = 16
    moving_fraction: float = 0.5
    car_speed: float = 6.0
    pedestrian_speed: float = 1.2
    image_noise: float = 0.4
    camera_gain_spread: float = 0.15
    camera_offset_spread: float = 0.15
    flicker: float = 0.0  # std of a coarse per-frame illumination field, redrawn every frame
    flicker_cell: int = 8  # pixels per flicker cell
    static: bool = False  # freeze objects and reuse one sampling stream for every frame

    def validate(self) -> None:
        if self.num_frames < 1:
            raise ConfigError("num_frames must be >= 1")
        if self.num_cameras < 1:
            raise ConfigError("num_cameras must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.num_points < 1:
            raise ConfigError("num_points must be >= 1")
        if min(self.image_width, self.image_height, self.image_channels) < 1:
            raise ConfigError("image dimensions must be positive")
        if self.tick_duration <= 0 or self.lidar_range <= 0:
            raise ConfigError("tick_duration and lidar_range must be positive")
        if self.image_noise < 0 or self.flicker < 0 or self.flicker_cell < 1:
            raise ConfigError("noise levels must be >= 0 and flicker_cell >= 1")
        if not 0.0 <= self.ground_fraction <= 1.0 or not 0.0 <= self.moving_fraction <= 1.0:
            raise ConfigError("fractions must lie in [0, 1]")

    @classmethod
    def from_dict(cls, data: dict) -> SceneConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown scene config keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


def class_signatures(num_classes: int, channels: int) -> np.ndarray:
    """(num_classes + 1) x channels signatures; the last row is background."""
    rng = np.random.default_rng(_SIGNATURE_SEED)
    rows = num_classes + 1
    raw = rng.normal(size=(max(rows, channels), channels))
    if rows <= channels:
        q, _ = np.linalg.qr(raw[:channels].T)
        return q.T[:rows].copy()
    return raw[:rows] / np.linalg.norm(raw[:rows], axis=1, keepdims=True)


def make_cameras(config: SceneConfig) -> list[CameraModel]:
    w, h = config.image_width, config.image_height
    f = (w / 2.0) / math.tan(math.radians(config.camera_fov_deg) / 2.0)
    mount = np.array([0.0, 0.0, config.camera_height])
    cams = []
    for j in range(config.num_cameras):
        yaw = math.radians((j - (config.num_cameras - 1) / 2.0) * config.camera_spacing_deg)
        fwd = np.array([math.cos(yaw), math.sin(yaw), 0.0])
        right = np.array([math.sin(yaw), -math.cos(yaw), 0.0])
        down = np.array([0.0, 0.0, -1.0])
        rot = np.stack([right, down, fwd])
        cams.append(CameraModel.pinhole(f, f, w / 2.0, h / 2.0, w, h, RigidPose(rot, -rot @ mount)))
    return cams


# --------------------------------------------------------------------------
# world layout


@dataclass
class _Object:
    label: int
    kind: str  # box | cylinder | sphere
    center: np.ndarray  # world xy at t=0 plus base (or centre) z
    size: np.ndarray  # box: lx, ly, lz; cylinder: r, h; sphere: r
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def area(self) -> float:
        if self.kind == "box":
            lx, ly, lz = self.size
            return lx * ly + 2 * lz * (lx + ly)
        if self.kind == "cylinder":
            r, h = self.size
            return 2 * math.pi * r * h
        return 4 * math.pi * self.size[0] ** 2

    def center_at(self, tick: float, dt: float) -> np.ndarray:
        c = self.center.copy()
        c[:2] += self.velocity * tick * dt
        return c

    def sample(self, rng: np.random.Generator, n: int, center: np.ndarray) -> np.ndarray:
        if self.kind == "box":
            lx, ly, lz = self.size
            areas = np.array([lx * ly, ly * lz, ly * lz, lx * lz, lx * lz])
            face = rng.choice(5, size=n, p=areas / areas.sum())
            a, b = rng.uniform(-0.5, 0.5, size=(2, n))
            pts = np.empty((n, 3))
            # top
            m = face == 0
            pts[m] = np.stack([a[m] * lx, b[m] * ly, np.full(m.sum(), lz)], 1)
            for k, sx in ((1, 0.5), (2, -0.5)):
                m = face == k
                pts[m] = np.stack([np.full(m.sum(), sx * lx), a[m] * ly, (b[m] + 0.5) * lz], 1)
            for k, sy in ((3, 0.5), (4, -0.5)):
                m = face == k
                pts[m] = np.stack([a[m] * lx, np.full(m.sum(), sy * ly), (b[m] + 0.5) * lz], 1)
            return pts + center
        if self.kind == "cylinder":
            r, h = self.size
            th = rng.uniform(-math.pi, math.pi, size=n)
            z = rng.uniform(0.0, h, size=n)
            return np.stack([r * np.cos(th), r * np.sin(th), z], 1) + center
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return d * self.size[0] + center


def _layout(rng: np.random.Generator, config: SceneConfig) -> list[_Object]:
    travel = config.speed * config.tick_duration * max(config.num_frames - 1, 0)
    x_lo = -config.lidar_range - 10.0
    x_hi = travel + config.lidar_range + 10.0
    side = lambda: rng.choice([-1.0, 1.0])  # noqa: E731
    objs: list[_Object] = []

    for _ in range(config.num_buildings):
        lx, ly, lz = rng.uniform(8, 16), rng.uniform(6, 10), rng.uniform(5, 14)
        y = side() * (13.0 + ly / 2 + rng.uniform(0, 3))
        objs.append(_Object(BUILDING, "box", np.array([rng.uniform(x_lo, x_hi), y, 0.0]), np.array([lx, ly, lz])))
    for _ in range(config.num_poles):
        y = side() * rng.uniform(7.5, 8.5)
        objs.append(_Object(POLE, "cylinder", np.array([rng.uniform(x_lo, x_hi), y, 0.0]), np.array([0.3, rng.uniform(3.5, 6.0)])))
    for _ in range(config.num_trees):
        x, y = rng.uniform(x_lo, x_hi), side() * rng.uniform(9.5, 11.0)
        trunk_h = rng.uniform(1.8, 2.8)
        crown_r = rng.uniform(1.2, 2.0)
        objs.append(_Object(VEGETATION, "cylinder", np.array([x, y, 0.0]), np.array([0.2, trunk_h])))
        objs.append(_Object(VEGETATION, "sphere", np.array([x, y, trunk_h + crown_r * 0.8]), np.array([crown_r])))
    for _ in range(config.num_cars):
        moving = rng.uniform() < config.moving_fraction
        s = side()
        y = s * (3.5 if moving else 6.0)
        vel = np.array([s * config.car_speed, 0.0]) if moving and not config.static else np.zeros(2)
        size = np.array([rng.uniform(3.8, 4.8), rng.uniform(1.7, 2.0), rng.uniform(1.4, 1.8)])
        objs.append(_Object(CAR, "box", np.array([rng.uniform(x_lo, x_hi), y, 0.0]), size, vel))
    for _ in range(config.num_pedestrians):
        moving = rng.uniform() < config.moving_fraction
        y = side() * rng.uniform(7.0, 9.0)
        vel = np.array([rng.choice([-1.0, 1.0]) * config.pedestrian_speed, 0.0])
        if not moving or config.static:
            vel = np.zeros(2)
        size = np.array([0.8, 0.8, rng.uniform(1.6, 1.9)])
        objs.append(_Object(PEDESTRIAN, "box", np.array([rng.uniform(x_lo, x_hi), y, 0.0]), size, vel))
    return objs


def _ego_pose(config: SceneConfig, tick: int) -> RigidPose:
    return RigidPose(np.eye(3), np.array([config.speed * tick * config.tick_duration, 0.0, 0.0]))


def _f32(a: np.ndarray) -> np.ndarray:
    """Round to float32 precision while keeping float64 storage (exact file round trips)."""
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def visible_mask(coords: np.ndarray, sensor_height: float, azimuth_bins: int = 720, elevation_deg: float = 0.5) -> np.ndarray:
    """Keep the nearest return per (azimuth, elevation) cell of a range image
    seen from ``(0, 0, sensor_height)``; a cheap stand-in for ray casting."""
    rel = coords - np.array([0.0, 0.0, sensor_height])
    dist = np.linalg.norm(rel, axis=1)
    az = np.floor((np.arctan2(rel[:, 1], rel[:, 0]) + math.pi) / (2 * math.pi) * azimuth_bins).astype(np.int64)
    el = np.floor(np.degrees(np.arcsin(rel[:, 2] / np.maximum(dist, 1e-9))) / elevation_deg).astype(np.int64)
    cell = (el - el.min()) * (azimuth_bins + 1) + az
    order = np.lexsort((dist, cell))
    first = np.unique(cell[order], return_index=True)[1]
    keep = np.zeros(len(coords), dtype=bool)
    keep[order[first]] = True
    return keep


def _sample_cloud(rng, objects, ego: RigidPose, tick: int, config: SceneConfig, seq_id: int) -> PointCloud:
    """Oversample object and ground surfaces, keep what the sensor can see,
    then draw ``num_points`` of the visible returns."""
    pool = 3 * config.num_points
    rng_range = config.lidar_range
    n_ground = int(round(config.ground_fraction * pool))

    r = rng.uniform(1.5, rng_range, size=n_ground)
    th = rng.uniform(-math.pi, math.pi, size=n_ground)
    ground = np.stack([r * np.cos(th), r * np.sin(th), rng.normal(0.0, 0.02, size=n_ground)], 1)
    parts = [ground]
    labels = [np.full(n_ground, GROUND)]

    ego_xy = ego.translation[:2]
    centers = [o.center_at(tick, config.tick_duration) for o in objects]
    weights = np.zeros(len(objects))
    for k, (o, c) in enumerate(zip(objects, centers)):
        d = np.linalg.norm(c[:2] - ego_xy)
        if d < rng_range + 8.0:
            weights[k] = math.sqrt(o.area()) / max(d, 5.0)
    n_obj = pool - n_ground
    if weights.sum() > 0 and n_obj > 0:
        counts = rng.multinomial(n_obj, weights / weights.sum())
        world_to_ego = ego.rotation.T
        for o, c, cnt in zip(objects, centers, counts):
            if cnt == 0:
                continue
            local = (o.sample(rng, cnt, c) - ego.translation) @ world_to_ego.T
            parts.append(local)
            labels.append(np.full(len(local), o.label))
    coords = np.concatenate(parts)
    label = np.concatenate(labels)
    keep = (np.hypot(coords[:, 0], coords[:, 1]) <= rng_range) & (coords[:, 2] >= -0.1)
    keep &= visible_mask(coords, config.lidar_height)
    idx = np.flatnonzero(keep)
    if len(idx) > config.num_points:
        idx = np.sort(rng.choice(idx, size=config.num_points, replace=False))
    coords, label = coords[idx], label[idx]
    intensity = np.clip(rng.normal(_INTENSITY_MEAN[label], _INTENSITY_STD), 0.0, 1.0)
    label = np.minimum(label, config.num_classes - 1)
    return PointCloud(_f32(coords), _f32(intensity), label, np.full(len(coords), seq_id))


def _flicker_field(h: int, w: int, channels: int, cell: int, scale: float, rng) -> np.ndarray:
    gh, gw = -(-h // cell), -(-w // cell)
    coarse = rng.normal(0.0, scale, size=(gh, gw, channels))
    return np.repeat(np.repeat(coarse, cell, axis=0), cell, axis=1)[:h, :w].reshape(h * w, channels)


def render_image(cloud: PointCloud, camera: CameraModel, signatures, gain, offset, noise, rng, flicker: float = 0.0, flicker_cell: int = 8) -> ImageGrid:
    """Splat class signatures at projected points with a per-pixel depth test."""
    h, w = camera.height, camera.width
    channels = signatures.shape[1]
    background = signatures.shape[0] - 1
    pixel_label = np.full(h * w, background, dtype=np.int64)
    uv, depth, valid = project_array(cloud.coords, camera)
    idx = np.flatnonzero(valid)
    if len(idx):
        # pixel centres sit at integer coordinates
        col = np.clip(np.floor(uv[idx, 0] + 0.5), 0, w - 1).astype(np.int64)
        row = np.clip(np.floor(uv[idx, 1] + 0.5), 0, h - 1).astype(np.int64)
        pix = row * w + col
        order = np.lexsort((depth[idx], pix))
        first = np.unique(pix[order], return_index=True)[1]
        nearest = order[first]
        pixel_label[pix[nearest]] = cloud.label[idx[nearest]]
    img = signatures[pixel_label] * gain + offset + rng.normal(0.0, noise, size=(h * w, channels))
    if flicker > 0:
        img += _flicker_field(h, w, channels, flicker_cell, flicker, rng)
    return ImageGrid(img.reshape(h, w, channels).astype(np.float32))


def generate_sequence(seed: int, config: SceneConfig | None = None, sequence_id: int | None = None) -> Sequence:
    config = config or SceneConfig()
    config.validate()
    seq_id = seed if sequence_id is None else sequence_id
    root = np.random.SeedSequence([seed, 0x5CE4E])
    layout_ss, camera_ss, frame_ss = root.spawn(3)
    objects = _layout(np.random.default_rng(layout_ss), config)
    cam_rng = np.random.default_rng(camera_ss)
    cameras = make_cameras(config)
    sig = class_signatures(config.num_classes, config.image_channels)
    gains = [1.0 + config.camera_gain_spread * cam_rng.normal(size=config.image_channels) for _ in cameras]
    offsets = [config.camera_offset_spread * cam_rng.normal(size=config.image_channels) for _ in cameras]
    frame_seeds = frame_ss.spawn(config.num_frames)

    frames = []
    for tick in range(config.num_frames):
        rng = np.random.default_rng(frame_seeds[0] if config.static else frame_seeds[tick])
        ego = _ego_pose(config, tick)
        cloud = _sample_cloud(rng, objects, ego, tick, config, seq_id)
        images = [
            render_image(cloud, cam, sig, g, o, config.image_noise, rng, config.flicker, config.flicker_cell)
            for cam, g, o in zip(cameras, gains, offsets)
        ]
        frames.append(Frame(tick, ego, cloud, list(cameras), images))
    return Sequence(seq_id, frames, config.num_classes)


# --------------------------------------------------------------------------
# augmentation and voxelisation


@dataclass(frozen=True)
class AugmentPolicy:
    rotation_deg: tuple[float, float] = (-180.0, 180.0)
    flip_x_prob: float = 0.5
    flip_y_prob: float = 0.5
    scale: tuple[float, float] = (0.95, 1.05)

    @classmethod
    def identity(cls) -> AugmentPolicy:
        return cls((0.0, 0.0), 0.0, 0.0, (1.0, 1.0))


def augment_cloud(cloud: PointCloud, rng: np.random.Generator, policy: AugmentPolicy = AugmentPolicy()):
    """Random flip, z-rotation and isotropic scaling.

    Returns the new cloud and the 3x3 linear map ``A`` applied as
    ``x' = A @ x``.  ``A`` is a rotation-flip-scale product, so it is not a
    proper rigid pose when a single flip fires.
    """
    # draw every variate unconditionally so the stream does not depend on the policy
    angle = math.radians(rng.uniform(*policy.rotation_deg))
    fx = rng.uniform() < policy.flip_x_prob
    fy = rng.uniform() < policy.flip_y_prob
    s = rng.uniform(*policy.scale)

    flip = np.diag([-1.0 if fy else 1.0, -1.0 if fx else 1.0, 1.0])
    c, sn = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -sn, 0.0], [sn, c, 0.0], [0.0, 0.0, 1.0]])
    a = s * rot @ flip
    return cloud.with_coords(cloud.coords @ a.T), a


VOXEL_REFERENCE_RADIUS = 10.0


def cylindrical_cells(coords: np.ndarray, resolution: float) -> np.ndarray:
    """Integer (ring, sector, layer) cell index per point."""
    r = np.hypot(coords[:, 0], coords[:, 1])
    theta = np.arctan2(coords[:, 1], coords[:, 0])
    dtheta = resolution / VOXEL_REFERENCE_RADIUS
    sectors = math.ceil(2 * math.pi / dtheta)
    return np.stack(
        [
            np.floor(r / resolution),
            np.floor((theta + math.pi) / dtheta) % sectors,
            np.floor(coords[:, 2] / resolution),
        ],
        1,
    ).astype(np.int64)


def _majority(inverse: np.ndarray, values: np.ndarray, n_cells: int) -> np.ndarray:
    """Most frequent value per cell; ties go to the smallest value."""
    vmin = values.min()
    span = int(values.max() - vmin) + 1
    key = inverse * span + (values - vmin)
    uniq, counts = np.unique(key, return_counts=True)
    cell, val = uniq // span, uniq % span
    order = np.lexsort((val, -counts, cell))
    first = np.unique(cell[order], return_index=True)[1]
    out = np.empty(n_cells, dtype=np.int64)
    out[cell[order][first]] = val[order][first] + vmin
    return out


def voxel_downsample_cylindrical(cloud: PointCloud, resolution: float = 0.1) -> PointCloud:
    """One point per occupied cylindrical cell.

    Azimuth bins are sized so their arc length at a 10 m radius equals
    ``resolution``.  The representative sits at the mean (radius, azimuth,
    height) of its members, which keeps it inside the cell.
    """
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    if len(cloud) == 0:
        return PointCloud.empty()
    cells = cylindrical_cells(cloud.coords, resolution)
    _, first, inverse, counts = np.unique(cells, axis=0, return_index=True, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    m = len(counts)

    r = np.hypot(cloud.coords[:, 0], cloud.coords[:, 1])
    theta = np.arctan2(cloud.coords[:, 1], cloud.coords[:, 0])
    mean = lambda x: np.bincount(inverse, weights=x, minlength=m) / counts  # noqa: E731
    r_m, t_m, z_m = mean(r), mean(theta), mean(cloud.coords[:, 2])
    coords = np.stack([r_m * np.cos(t_m), r_m * np.sin(t_m), z_m], 1)
    single = counts == 1
    coords[single] = cloud.coords[first[single]]

    return PointCloud(
        coords,
        mean(cloud.intensity),
        _majority(inverse, cloud.label, m),
        _majority(inverse, cloud.provenance, m),
    )


# --------------------------------------------------------------------------
# image ops


def resize_image(img: ImageGrid, width: int, height: int) -> ImageGrid:
    """Bilinear resampling with pixel centres at integer coordinates."""
    if width < 1 or height < 1:
        raise ValueError("target size must be positive")
    src = np.asarray(img.data, dtype=np.float64)

    def axis(n_out, n_in):
        x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        x = np.clip(x, 0.0, n_in - 1)
        lo = np.floor(x).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, x - lo

    y0, y1, wy = axis(height, img.height)
    x0, x1, wx = axis(width, img.width)
    top = src[y0][:, x0] * (1 - wx)[None, :, None] + src[y0][:, x1] * wx[None, :, None]
    bot = src[y1][:, x0] * (1 - wx)[None, :, None] + src[y1][:, x1] * wx[None, :, None]
    out = top * (1 - wy)[:, None, None] + bot * wy[:, None, None]
    return ImageGrid(out.astype(img.data.dtype))


def flip_image(img: ImageGrid) -> ImageGrid:
    return ImageGrid(img.data[:, ::-1].copy())


# --------------------------------------------------------------------------
# persistence

SEQ_MAGIC = b"LIMASEQ1"
SEQ_VERSION = 1
_POINT_DTYPE = np.dtype([("xyz", "<f4", (3,)), ("intensity", "<f4"), ("label", "<u2"), ("provenance", "<u2")])


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"needed {n} bytes at offset {self.pos}, file has {len(self.buf)}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, count: int) -> np.ndarray:
        dtype = np.dtype(dtype)
        return np.frombuffer(self.take(dtype.itemsize * count), dtype=dtype, count=count)


def encode_sequence(seq: Sequence) -> bytes:
    frames = seq.frames
    n_cams = len(frames[0].cameras) if frames else 0
    out = [SEQ_MAGIC, struct.pack("<5I", SEQ_VERSION, seq.id, len(frames), n_cams, seq.num_classes)]
    for fr in frames:
        if len(fr.cameras) != n_cams or len(fr.images) != n_cams:
            raise ValueError("all frames must carry the same number of cameras and images")
        out.append(struct.pack("<q", fr.timestamp))
        out.append(fr.ego_pose.to_array().astype("<f8").tobytes())
        pts = np.empty(len(fr.cloud), dtype=_POINT_DTYPE)
        pts["xyz"] = fr.cloud.coords
        pts["intensity"] = fr.cloud.intensity
        pts["label"] = fr.cloud.label
        pts["provenance"] = fr.cloud.provenance
        out.append(struct.pack("<I", len(pts)))
        out.append(pts.tobytes())
        for cam, img in zip(fr.cameras, fr.images):
            out.append(cam.intrinsics.astype("<f8").tobytes())
            out.append(cam.extrinsics.to_array().astype("<f8").tobytes())
            out.append(struct.pack("<3I", img.height, img.width, img.channels))
            out.append(np.ascontiguousarray(img.data, dtype="<f4").tobytes())
    return b"".join(out)


def decode_sequence(buf: bytes) -> Sequence:
    rd = _Reader(buf)
    if len(buf) < len(SEQ_MAGIC):
        raise TruncatedFileError("file shorter than magic")
    magic = rd.take(len(SEQ_MAGIC))
    if magic != SEQ_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    (version,) = rd.unpack("<I")
    if version != SEQ_VERSION:
        raise VersionMismatchError(f"unsupported sequence version {version}")
    seq_id, n_frames, n_cams, num_classes = rd.unpack("<4I")
    frames = []
    for _ in range(n_frames):
        (ts,) = rd.unpack("<q")
        pose = RigidPose.from_array(rd.array("<f8", 12))
        (n,) = rd.unpack("<I")
        pts = rd.array(_POINT_DTYPE, n)
        cloud = PointCloud(
            pts["xyz"].astype(np.float64),
            pts["intensity"].astype(np.float64),
            pts["label"].astype(np.int64),
            pts["provenance"].astype(np.int64),
        )
        cams, imgs = [], []
        for _ in range(n_cams):
            k = rd.array("<f8", 9).reshape(3, 3)
            ext = RigidPose.from_array(rd.array("<f8", 12))
            h, w, c = rd.unpack("<3I")
            data = rd.array("<f4", h * w * c).reshape(h, w, c).astype(np.float32)
            cams.append(CameraModel(k.copy(), ext, int(w), int(h)))
            imgs.append(ImageGrid(data))
        frames.append(Frame(int(ts), pose, cloud, cams, imgs))
    if rd.pos != len(buf):
        raise FormatError(f"{len(buf) - rd.pos} trailing bytes after sequence payload")
    return Sequence(int(seq_id), frames, int(num_classes))


def save_sequence(seq: Sequence, path) -> None:
    Path(path).write_bytes(encode_sequence(seq))


def load_sequence(path) -> Sequence:
    return decode_sequence(Path(path).read_bytes())


def sequences_equal(a: Sequence, b: Sequence) -> bool:
    if (a.id, a.num_classes, len(a.frames)) != (b.id, b.num_classes, len(b.frames)):
        return False
    for fa, fb in zip(a.frames, b.frames):
        if fa.timestamp != fb.timestamp or fa.ego_pose != fb.ego_pose or not fa.cloud.equals(fb.cloud):
            return False
        if fa.cameras != fb.cameras:
            return False
        if len(fa.images) != len(fb.images):
            return False
        for ia, ib in zip(fa.images, fb.images):
            if ia.data.dtype != ib.data.dtype or not np.array_equal(ia.data, ib.data):
                return False
    return True
