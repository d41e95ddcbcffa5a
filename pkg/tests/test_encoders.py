import numpy as np
import pytest

from memdistill.encoders import (
    ImageEncoder,
    check_params,
    image_encode,
    init_point_encoder,
    neighbor_pooling,
    point_encode,
    point_encode_backward,
    point_forward,
    sample_at,
    sample_features,
)
from memdistill.errors import InvalidInputError
from memdistill.scenedata import ImageGrid, PointCloud, SceneConfig, class_signatures
from gradcheck import assert_gradients_match


def random_cloud(rng, n):
    return PointCloud(rng.uniform(-3, 3, size=(n, 3)), rng.uniform(0, 1, n), np.zeros(n), np.zeros(n))


def test_teacher_is_frozen_and_deterministic():
    rng = np.random.default_rng(0)
    img = ImageGrid(rng.normal(size=(8, 12, 3)))
    a = image_encode(img, dim=5)
    b = image_encode(img, dim=5)
    assert np.array_equal(a.data, b.data)
    assert (a.height, a.width, a.channels) == (4, 6, 5)
    enc = ImageEncoder(3, 5)
    with pytest.raises(ValueError):
        enc.weight[0, 0] = 1.0


def test_zero_image_gives_constant_grid():
    out = image_encode(ImageGrid(np.zeros((6, 10, 3))))
    assert np.all(out.data == out.data[0, 0])


def test_single_patch_change_is_local():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(8, 8, 3))
    b = a.copy()
    b[2:4, 4:6] += 1.0  # exactly patch (1, 2)
    diff = np.any(image_encode(ImageGrid(a)).data != image_encode(ImageGrid(b)).data, axis=2)
    expected = np.zeros((4, 4), dtype=bool)
    expected[1, 2] = True
    assert np.array_equal(diff, expected)


def test_class_signatures_separate_after_encoding():
    cfg = SceneConfig()
    sig = class_signatures(cfg.num_classes, cfg.image_channels)
    for i in range(cfg.num_classes):
        for j in range(i + 1, cfg.num_classes):
            fi = image_encode(ImageGrid(np.tile(sig[i], (2, 2, 1)))).data[0, 0]
            fj = image_encode(ImageGrid(np.tile(sig[j], (2, 2, 1)))).data[0, 0]
            assert fi @ fj / (np.linalg.norm(fi) * np.linalg.norm(fj)) < 0.5, (i, j)


def test_teacher_repeated_calls_bitwise():
    img = ImageGrid(np.random.default_rng(2).normal(size=(6, 8, 3)))
    ref = image_encode(img).data.copy()
    for _ in range(1000):
        assert np.array_equal(image_encode(img).data, ref)


def test_teacher_rejects_tiny_image():
    with pytest.raises(InvalidInputError):
        image_encode(ImageGrid(np.zeros((1, 1, 3))))


def test_sample_at_pixel_centre_is_exact():
    grid = ImageGrid(np.arange(12.0).reshape(3, 4, 1))
    assert sample_at(grid, 2, 1)[0] == grid.data[1, 2, 0]


def test_sample_at_midpoint_interpolates():
    grid = ImageGrid(np.array([[[0.0], [2.0]], [[4.0], [6.0]]]))
    assert sample_at(grid, 0.5, 0.5)[0] == pytest.approx(3.0)


def test_sample_out_of_bounds():
    grid = ImageGrid(np.zeros((3, 4, 2)))
    with pytest.raises(InvalidInputError):
        sample_at(grid, 4.0, 0.0)
    with pytest.raises(InvalidInputError):
        sample_at(grid, -0.1, 0.0)


def test_sample_features_with_downsampled_grid_matches_loop():
    rng = np.random.default_rng(1)
    grid = ImageGrid(rng.normal(size=(4, 6, 3)))
    uv = rng.uniform(0, [12, 8], size=(30, 2))
    batch = sample_features(grid, uv, 12, 8)
    for row, (u, v) in zip(batch, uv):
        assert np.allclose(row, sample_at(grid, u, v, 12, 8), atol=0)


def test_init_and_shapes():
    p = init_point_encoder(0)
    check_params(p)
    cloud = random_cloud(np.random.default_rng(2), 50)
    out = point_encode(p, cloud)
    assert out.features.shape == (50, 16)
    assert np.array_equal(out.features, point_encode(init_point_encoder(0), cloud).features)


def test_pooling_is_row_stochastic_and_includes_self():
    rng = np.random.default_rng(3)
    coords = rng.uniform(-2, 2, size=(200, 3))
    pool = neighbor_pooling(coords, 8, 1.0)
    assert np.allclose(np.asarray(pool.sum(axis=1)).ravel(), 1.0)
    assert np.all(pool.diagonal() > 0)
    assert np.all(np.diff(pool.indptr) <= 9)


def test_single_point_zero_weights():
    p = {k: np.zeros_like(v) for k, v in init_point_encoder(0).items()}
    cloud = PointCloud(np.array([[1.0, 2.0, 0.5]]), np.array([0.7]), np.zeros(1), np.zeros(1))
    assert not point_encode(p, cloud).features.any()


def test_backward_zero_and_linear():
    rng = np.random.default_rng(5)
    p = init_point_encoder(1)
    cloud = random_cloud(rng, 40)
    zero = point_encode_backward(p, cloud, np.zeros((40, 16)))
    assert all(not g.any() for g in zero.values())
    g1, g2 = rng.normal(size=(40, 16)), rng.normal(size=(40, 16))
    a = point_encode_backward(p, cloud, g1)
    b = point_encode_backward(p, cloud, g2)
    both = point_encode_backward(p, cloud, g1 + g2)
    for k in p:
        assert np.max(np.abs(both[k] - a[k] - b[k])) < 1e-9


def test_backward_shape_mismatch():
    p = init_point_encoder(0)
    cloud = random_cloud(np.random.default_rng(4), 10)
    with pytest.raises(InvalidInputError):
        point_encode_backward(p, cloud, np.zeros((9, 16)))


@pytest.mark.parametrize("instance", range(20))
def test_point_encoder_gradients(instance):
    rng = np.random.default_rng([instance, 77])
    params = init_point_encoder(instance, hidden=(6, 5), dim=4)
    cloud = random_cloud(rng, 12)
    upstream = rng.normal(size=(12, 4))

    def loss(p):
        out, _ = point_forward(p, cloud)
        return float(np.sum(out * upstream))

    grads = point_encode_backward(params, cloud, upstream)
    assert_gradients_match(loss, params, grads)
