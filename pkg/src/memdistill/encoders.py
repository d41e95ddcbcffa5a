"""Frozen image teacher, pixel feature lookup and the trainable point encoder."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from memdistill.errors import InvalidInputError
from memdistill.scenedata import ImageGrid, PointCloud

DEFAULT_DIM = 16
DEFAULT_HIDDEN = (64, 64)
NEIGHBORS = 8
NEIGHBOR_RADIUS = 1.0

# x, y, z, intensity -> roughly unit range for the first layer
INPUT_SCALE = np.array([1 / 20.0, 1 / 20.0, 1 / 4.0, 1.0])


@dataclass
class FeatureSet:
    """Per-row features with an optional validity mask over the owner's rows."""

    features: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise InvalidInputError(f"features must be N x C, got {self.features.shape}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool).reshape(len(self.features))

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return len(self.features)

    def valid(self) -> np.ndarray:
        return self.mask if self.mask is not None else np.ones(len(self), dtype=bool)


def as_rows(x) -> np.ndarray:
    if isinstance(x, FeatureSet):
        return x.features
    return np.asarray(x, dtype=np.float64)


# --------------------------------------------------------------------------
# image teacher


class ImageEncoder:
    """Per-pixel fixed random projection and ``tanh``, average-pooled over
    non-overlapping ``patch x patch`` cells.  There is no trainable state."""

    def __init__(self, in_channels: int, dim: int = DEFAULT_DIM, patch: int = 2, seed: int = 0):
        rng = np.random.default_rng([seed, in_channels, dim, patch])
        self.patch = patch
        self.dim = dim
        self.weight = rng.normal(0.0, 1.0 / np.sqrt(in_channels), size=(in_channels, dim)) * 1.5
        self.bias = rng.normal(0.0, 0.05, size=dim)
        self.weight.setflags(write=False)
        self.bias.setflags(write=False)

    def __call__(self, img: ImageGrid) -> ImageGrid:
        p = self.patch
        h, w = img.height // p, img.width // p
        if h == 0 or w == 0:
            raise InvalidInputError(f"image {img.height}x{img.width} smaller than one patch")
        data = np.asarray(img.data, dtype=np.float64)[: h * p, : w * p]
        act = np.tanh(data @ self.weight + self.bias)
        return ImageGrid(act.reshape(h, p, w, p, self.dim).mean(axis=(1, 3)))


@lru_cache(maxsize=16)
def _encoder(in_channels: int, dim: int, patch: int, seed: int) -> ImageEncoder:
    return ImageEncoder(in_channels, dim, patch, seed)


def image_encode(img: ImageGrid, dim: int = DEFAULT_DIM, patch: int = 2, seed: int = 0) -> ImageGrid:
    return _encoder(img.channels, dim, patch, seed)(img)


def _grid_coords(u, v, featgrid: ImageGrid, image_width: int, image_height: int):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if np.any(~np.isfinite(u)) or np.any(~np.isfinite(v)):
        raise InvalidInputError("non-finite pixel coordinate")
    if np.any((u < 0) | (u >= image_width) | (v < 0) | (v >= image_height)):
        raise InvalidInputError("pixel coordinate outside the image")
    gx = (u + 0.5) * (featgrid.width / image_width) - 0.5
    gy = (v + 0.5) * (featgrid.height / image_height) - 0.5
    return np.clip(gx, 0.0, featgrid.width - 1), np.clip(gy, 0.0, featgrid.height - 1)


def sample_features(featgrid: ImageGrid, uv, image_width: int, image_height: int) -> np.ndarray:
    """Bilinear lookup at many pixels; returns (M, C)."""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    gx, gy = _grid_coords(uv[:, 0], uv[:, 1], featgrid, image_width, image_height)
    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    x1 = np.minimum(x0 + 1, featgrid.width - 1)
    y1 = np.minimum(y0 + 1, featgrid.height - 1)
    wx = (gx - x0)[:, None]
    wy = (gy - y0)[:, None]
    g = np.asarray(featgrid.data, dtype=np.float64)
    top = g[y0, x0] * (1 - wx) + g[y0, x1] * wx
    bot = g[y1, x0] * (1 - wx) + g[y1, x1] * wx
    return top * (1 - wy) + bot * wy


def sample_at(featgrid: ImageGrid, u: float, v: float, image_width: int | None = None, image_height: int | None = None) -> np.ndarray:
    """Feature vector at pixel (u, v) of the source image.

    Without an explicit image size the grid is assumed to be pixel-aligned.
    """
    image_width = featgrid.width if image_width is None else image_width
    image_height = featgrid.height if image_height is None else image_height
    return sample_features(featgrid, [[u, v]], image_width, image_height)[0]


# --------------------------------------------------------------------------
# point encoder

PointEncoderParams = dict  # name -> ndarray; w0, b0, w1, b1, ... last layer is the head


def init_point_encoder(seed: int, hidden=DEFAULT_HIDDEN, dim: int = DEFAULT_DIM) -> PointEncoderParams:
    rng = np.random.default_rng([seed, 0xE7C0])
    sizes = [4, *hidden, dim]
    params = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"w{i}"] = rng.normal(0.0, np.sqrt(1.0 / a), size=(a, b))
        params[f"b{i}"] = np.zeros(b)
    return params


def num_layers(params: PointEncoderParams) -> int:
    return sum(1 for k in params if k.startswith("w"))


def head_names(params: PointEncoderParams) -> tuple[str, str]:
    last = num_layers(params) - 1
    return f"w{last}", f"b{last}"


def check_params(params: PointEncoderParams) -> None:
    n = num_layers(params)
    prev = 4
    for i in range(n):
        w, b = params.get(f"w{i}"), params.get(f"b{i}")
        if w is None or b is None or w.ndim != 2 or w.shape[0] != prev or b.shape != (w.shape[1],):
            raise InvalidInputError(f"inconsistent shapes at layer {i}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise InvalidInputError(f"non-finite parameters at layer {i}")
        prev = w.shape[1]


def neighbor_pooling(coords: np.ndarray, k: int = NEIGHBORS, radius: float = NEIGHBOR_RADIUS) -> sparse.csr_matrix:
    """Row-stochastic N x N matrix averaging each point with up to ``k``
    nearest neighbours inside ``radius`` (the point itself always included)."""
    n = len(coords)
    if n == 0:
        return sparse.csr_matrix((0, 0))
    tree = cKDTree(coords)
    dist, idx = tree.query(coords, k=min(k + 1, n), distance_upper_bound=radius)
    dist = dist.reshape(n, -1)
    idx = idx.reshape(n, -1)
    ok = np.isfinite(dist)
    # the query point is its own nearest neighbour unless it has exact duplicates
    ok[:, 0] = True
    idx[:, 0] = np.where(idx[:, 0] == np.arange(n), idx[:, 0], np.arange(n))
    counts = ok.sum(axis=1)
    rows = np.repeat(np.arange(n), counts)
    cols = idx[ok]
    vals = np.repeat(1.0 / counts, counts)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))


def _inputs(cloud: PointCloud) -> np.ndarray:
    return np.column_stack([cloud.coords, cloud.intensity]) * INPUT_SCALE


def point_forward(params: PointEncoderParams, cloud: PointCloud, k: int = NEIGHBORS, radius: float = NEIGHBOR_RADIUS):
    """Returns ``(features, cache)``; ``cache`` feeds :func:`point_backward`."""
    pool = neighbor_pooling(cloud.coords, k, radius)
    acts = [_inputs(cloud)]
    n = num_layers(params)
    h = acts[0]
    for i in range(n):
        h = h @ params[f"w{i}"] + params[f"b{i}"]
        if i < n - 1:
            h = np.tanh(h)
        acts.append(h)
    out = pool @ h if len(h) else h
    return out, (pool, acts)


def point_backward(params: PointEncoderParams, cache, upstream: np.ndarray) -> PointEncoderParams:
    pool, acts = cache
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != acts[-1].shape:
        raise InvalidInputError(f"upstream gradient shape {upstream.shape} != output shape {acts[-1].shape}")
    n = num_layers(params)
    grads = {}
    g = pool.T @ upstream if len(upstream) else upstream
    for i in reversed(range(n)):
        if i < n - 1:
            g = g * (1.0 - acts[i + 1] ** 2)
        grads[f"w{i}"] = acts[i].T @ g
        grads[f"b{i}"] = g.sum(axis=0)
        if i > 0:
            g = g @ params[f"w{i}"].T
    return {name: grads[name] for name in params}


def point_encode(params: PointEncoderParams, cloud: PointCloud, k: int = NEIGHBORS, radius: float = NEIGHBOR_RADIUS) -> FeatureSet:
    feats, _ = point_forward(params, cloud, k, radius)
    return FeatureSet(feats)


def point_encode_backward(params: PointEncoderParams, cloud: PointCloud, upstream_grad, k: int = NEIGHBORS, radius: float = NEIGHBOR_RADIUS) -> PointEncoderParams:
    _, cache = point_forward(params, cloud, k, radius)
    return point_backward(params, cache, upstream_grad)
