import numpy as np
import pytest

from memdistill.errors import InvalidInputError, OrderingError
from memdistill.geometry import RigidPose, apply
from memdistill.memory import MemoryBank, MemoryEntry, fuse_long_term, push, warp_entries


def entry(ts, pose=None, n=3, dim=2, seed=0):
    rng = np.random.default_rng(seed)
    return MemoryEntry.from_ego(ts, pose or RigidPose.identity(), rng.normal(size=(n, 3)), rng.normal(size=(n, dim)))


def test_capacity_fifo():
    bank = MemoryBank(6)
    for t in range(7):
        push(bank, entry(t))
    assert len(bank) == 6
    assert bank.entries[0].timestamp == 1


def test_capacity_zero():
    bank = MemoryBank(0)
    for t in range(3):
        bank.push(entry(t))
    assert len(bank) == 0


def test_capacity_law():
    rng = np.random.default_rng(0)
    for _ in range(20):
        cap, pushes = int(rng.integers(0, 8)), int(rng.integers(0, 15))
        bank = MemoryBank(cap)
        for t in range(pushes):
            bank.push(entry(t))
        assert len(bank) == min(pushes, cap)


def test_stale_timestamp():
    bank = MemoryBank(3)
    bank.push(entry(5))
    with pytest.raises(OrderingError):
        bank.push(entry(5))


def test_self_warp_identity():
    rng = np.random.default_rng(1)
    pose = RigidPose.random(rng)
    pts = rng.normal(size=(10, 3))
    e = MemoryEntry.from_ego(0, pose, pts, np.zeros((10, 2)))
    (anchors, _), = warp_entries([e], pose)
    assert np.allclose(anchors, pts, atol=1e-9)


def test_translation_shift():
    pts = np.array([[1.0, 2.0, 3.0]])
    e = MemoryEntry.from_ego(0, RigidPose.identity(), pts, np.zeros((1, 1)))
    (anchors, _), = warp_entries([e], RigidPose(np.eye(3), [10.0, 0, 0]))
    assert np.allclose(anchors, [[-9.0, 2.0, 3.0]], atol=1e-12)


def test_warp_round_trip_and_isometry():
    rng = np.random.default_rng(2)
    for _ in range(20):
        e = MemoryEntry.from_ego(0, RigidPose.random(rng), rng.normal(size=(15, 3)) * 5, np.zeros((15, 1)))
        cur = RigidPose.random(rng)
        (w, _), = warp_entries([e], cur)
        assert np.allclose(apply(cur, w), e.anchors, atol=1e-9)
        d0 = np.linalg.norm(e.anchors[:, None] - e.anchors[None], axis=-1)
        d1 = np.linalg.norm(w[:, None] - w[None], axis=-1)
        assert np.allclose(d0, d1, atol=1e-9)


def test_empty_bank_fusion_is_identity():
    feats = np.arange(6.0).reshape(3, 2)
    out = fuse_long_term(np.zeros((3, 3)), feats, warp_entries(MemoryBank(), RigidPose.identity()))
    assert np.array_equal(out.features, feats)


def test_identical_history_is_identity():
    pts = np.array([[0.0, 0.0, 0.0], [5.0, 0.0, 0.0]])
    feats = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = fuse_long_term(pts, feats, [(pts + 0.01, feats)])
    assert np.array_equal(out.features, feats)


def test_two_entry_mean():
    pts = np.zeros((1, 3))
    a, b, c = np.array([[3.0]]), np.array([[6.0]]), np.array([[0.0]])
    out = fuse_long_term(pts, c, [(pts + 0.1, a), (pts - 0.1, b)])
    assert out.features[0, 0] == pytest.approx(3.0)


def test_dimension_mismatch():
    with pytest.raises(InvalidInputError):
        fuse_long_term(np.zeros((1, 3)), np.zeros((1, 2)), [(np.zeros((1, 3)), np.zeros((1, 3)))])
    with pytest.raises(InvalidInputError):
        fuse_long_term(np.zeros((1, 3)), np.zeros((1, 2)), [], radius=0.0)


def brute_force_fusion(pts, feats, warped, radius):
    out = []
    for p, f in zip(pts, feats):
        acc = [f]
        for anchors, hist in warped:
            d = np.linalg.norm(anchors - p, axis=1)
            j = int(np.argmin(d))
            if d[j] <= radius:
                acc.append(hist[j])
        out.append(np.mean(acc, axis=0))
    return np.array(out)


def test_fusion_matches_brute_force_oracle():
    rng = np.random.default_rng(3)
    for trial in range(10):
        n = int(rng.integers(1, 200))
        pts = rng.uniform(-2, 2, size=(n, 3))
        feats = rng.normal(size=(n, 4))
        warped = [(rng.uniform(-2, 2, size=(int(rng.integers(1, 200)), 3)), None) for _ in range(3)]
        warped = [(a, rng.normal(size=(len(a), 4))) for a, _ in warped]
        out = fuse_long_term(pts, feats, warped, 0.25)
        ref = brute_force_fusion(pts, feats, warped, 0.25)
        assert np.allclose(out.features, ref, atol=1e-12)
        # fusion bounds
        stacked_min = np.minimum(feats, np.min([w[1].min(axis=0) for w in warped], axis=0))
        assert np.all(out.features >= stacked_min - 1e-12)
