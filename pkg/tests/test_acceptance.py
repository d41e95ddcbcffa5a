"""End-to-end acceptance checks, one test per criterion.

Each test prints a single PASS/FAIL line (visible with ``-s``); the same lines
are collected into an "acceptance criteria" section of the terminal summary.
"""

import copy
import math
import time

import numpy as np
import pytest

from memdistill import benchmarks, encoders
from memdistill.geometry import CameraModel, RigidPose, apply, back_project, compose, inverse, project_array
from memdistill.losses import cosine_distill, infonce, kl_distill, l2_distill, temporal_contrastive
from memdistill.metrics import (
    DetectionSet,
    GroundTruth,
    Prediction,
    RobustnessInput,
    average_precision,
    confusion_matrix,
    corruption_error,
    miou,
    nds,
    resilience_rate,
)
from memdistill.scenedata import SceneConfig, decode_sequence, encode_sequence, generate_sequence, load_sequence, save_sequence
from memdistill.trainer import (
    TrainConfig,
    Trainer,
    decode_checkpoint,
    encode_checkpoint,
    prepare_frame,
    resume,
    save_checkpoint,
    step_rng,
    student_input,
)
from gradcheck import assert_close, assert_gradients_match, numeric_gradient
from test_metrics import oracle_ap, recount_miou

SMALL = SceneConfig(num_frames=3, num_points=1200)


def report(number, ok, detail):
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def small_seqs():
    return [generate_sequence(40 + i, SMALL, sequence_id=i) for i in range(2)]


@pytest.mark.criterion(1, "geometry round trip and pose group laws")
def test_criterion_1_geometry():
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    worst_rt = 0.0
    checked = 0
    for _ in range(100):
        fx, fy = rng.uniform(50, 400, 2)
        cam = CameraModel.pinhole(fx, fy, 64, 32, 128, 64, RigidPose.random(rng, 5.0))
        # points placed inside the view in camera coordinates, then moved to the ego frame
        u, v, d = rng.uniform(0, 128, 100), rng.uniform(0, 64, 100), rng.uniform(0.5, 60, 100)
        pts = apply(inverse(cam.extrinsics), np.column_stack([(u - 64) / fx * d, (v - 32) / fy * d, d]))
        uv, depth, valid = project_array(pts, cam)
        checked += int(valid.sum())
        for x, (pu, pv), pd in zip(pts, uv, depth):
            worst_rt = max(worst_rt, float(np.linalg.norm(back_project(pu, pv, pd, cam) - x)))
    worst_law = 0.0
    for _ in range(1000):
        a, b, c = (RigidPose.random(rng) for _ in range(3))
        x = rng.normal(size=3) * 10
        worst_law = max(
            worst_law,
            float(np.abs(a.rotation.T @ a.rotation - np.eye(3)).max()),
            abs(float(np.linalg.det(a.rotation)) - 1.0),
            float(np.abs(apply(compose(a, inverse(a)), x) - x).max()),
            float(np.abs(apply(compose(a, b), x) - apply(a, apply(b, x))).max()),
            float(np.abs(apply(compose(compose(a, b), c), x) - apply(compose(a, compose(b, c)), x)).max()),
        )
    elapsed = time.perf_counter() - start
    ok = worst_rt < 1e-6 and worst_law < 1e-9 and elapsed < 1.0 and checked == 10_000
    report(1, ok, f"round trip {worst_rt:.2e} m over {checked} projections, group laws {worst_law:.2e}, {elapsed:.2f} s")


@pytest.mark.criterion(2, "finite-difference gradient suite")
def test_criterion_2_gradients():
    cases = {
        "l2": (lambda t, s: l2_distill(t, s), (9, 5)),
        "infonce": (lambda t, s: infonce(t, s, 0.2), (8, 5)),
        "cosine": (lambda t, s: cosine_distill(t, s), (9, 5)),
        "kl": (lambda t, s: kl_distill(t, s, 0.5), (9, 5)),
        "temporal": (lambda t, s: temporal_contrastive(t, s, 0.2), (6, 4)),
    }
    start = time.perf_counter()
    checks = 0
    for name, (fn, shape) in cases.items():
        for i in range(20):
            rng = np.random.default_rng([i, 1000 + len(name)])
            t, s = rng.normal(size=shape), rng.normal(size=shape)
            assert_close(fn(t, s).grad_student, numeric_gradient(lambda x: fn(t, x).value, s.copy()), name)
            checks += 1
    for i in range(20):
        rng = np.random.default_rng([i, 2000])
        params = encoders.init_point_encoder(i, hidden=(6, 5), dim=4)
        n = 12
        cloud = generate_sequence(i, SceneConfig(num_frames=1, num_points=400)).frames[0].cloud.subset(np.arange(n))
        upstream = rng.normal(size=(n, 4))
        grads = encoders.point_encode_backward(params, cloud, upstream)
        assert_gradients_match(lambda p: float(np.sum(encoders.point_forward(p, cloud)[0] * upstream)), params, grads)
        checks += 1
    elapsed = time.perf_counter() - start
    report(2, elapsed < 30.0, f"{checks} instances agree, {elapsed:.1f} s")


@pytest.mark.criterion(3, "closed forms")
def test_criterion_3_closed_forms():
    rng = np.random.default_rng(3)
    worst = 0.0
    for m in (1, 2, 5, 64, 300):
        x = np.tile(rng.normal(size=8), (m, 1))
        worst = max(worst, abs(infonce(x, x).value - math.log(m)))
    x = rng.normal(size=(20, 8))
    ok = worst < 1e-9 and l2_distill(x, x).value == 0.0 and kl_distill(x, x).value == 0.0 and nds(1.0, [0] * 5) == 1.0
    report(3, ok, f"InfoNCE log M error {worst:.1e}; l2, KL zero; NDS(1, 0) = 1")


@pytest.mark.criterion(4, "baseline recovery with k=0 and mixing off")
def test_criterion_4_baseline_recovery(small_seqs):
    cfg = TrainConfig(epochs=9, memory_frames=0, mix_probability=0.0, hidden=[16, 16])
    trainer = Trainer(cfg, small_seqs)
    before = [copy.deepcopy(trainer.state.params)]
    diffs = []

    def check(rec, t):
        item = t.plan[rec.step]
        prep = prepare_frame(t.sequences[item.seq].frames[item.frame], cfg)
        student_cloud = student_input(prep.cloud, cfg, step_rng(cfg.seed, rec.step))
        student = encoders.point_encode(before[-1], student_cloud).features
        vis = prep.unified.valid()
        diffs.append(abs(rec.loss - l2_distill(prep.unified.features[vis], student[vis]).value))
        before.append(copy.deepcopy(t.state.params))

    trainer.run(max_steps=50, callback=check)
    worst = max(diffs)
    report(4, len(diffs) == 50 and worst <= 1e-12, f"{len(diffs)} steps, max |trainer - direct| = {worst:.1e}")


@pytest.mark.criterion(5, "static scene fixed point")
def test_criterion_5_static_fixed_point():
    seqs = [generate_sequence(60 + i, benchmarks.STATIC_SCENE, sequence_id=i) for i in range(2)]
    traces = {}
    for k in (1, 6):
        hist = Trainer(TrainConfig(epochs=2, memory_frames=k), seqs).run()
        traces[k] = np.array([r.loss for r in hist])
    worst = float(np.max(np.abs(traces[1] - traces[6])))
    report(5, worst <= 1e-9, f"{len(traces[1])} steps, max trace gap {worst:.1e}")


@pytest.mark.criterion(6, "pretrained probe beats random init by 15 mIoU points")
def test_criterion_6_efficacy():
    start = time.perf_counter()
    bench = benchmarks.make_benchmark("default", dataset_seed=0)
    pairs = benchmarks.efficacy(bench, seeds=(0, 1, 2))
    elapsed = time.perf_counter() - start
    gains = [p - r for p, r in pairs]
    med = float(np.median(gains))
    detail = ", ".join(f"{p:.3f} vs {r:.3f}" for p, r in pairs)
    report(6, med >= 0.15 and elapsed < 600, f"median gain {med:.3f} ({detail}), {elapsed:.0f} s")


@pytest.mark.criterion(7, "memory frames k=6 >= k=1 on the dynamic benchmark")
def test_criterion_7_memory_trend():
    bench = benchmarks.make_benchmark("dynamic", dataset_seed=0)
    res = benchmarks.sweep(bench, "memory_frames", [1, 6], seeds=range(5))
    m1, m6 = float(np.median(res[1])), float(np.median(res[6]))
    report(7, m6 >= m1, f"median k=6 {m6:.4f} vs k=1 {m1:.4f}")


@pytest.mark.criterion(8, "mean aggregation >= max on the overlapping-camera benchmark")
def test_criterion_8_aggregation_trend():
    bench = benchmarks.make_benchmark("overlap", dataset_seed=0)
    res = benchmarks.sweep(bench, "aggregation_mode", ["mean", "max"], seeds=range(5))
    mean, mx = float(np.median(res["mean"])), float(np.median(res["max"]))
    report(8, mean >= mx, f"median mean {mean:.4f} vs max {mx:.4f}")


@pytest.mark.criterion(9, "metric oracles")
def test_criterion_9_metric_oracles():
    rng = np.random.default_rng(9)
    worst_iou = 0.0
    for _ in range(100):
        k = int(rng.integers(2, 8))
        n = int(rng.integers(1, 400))
        labels = rng.integers(0, k, n)
        preds = np.where(rng.uniform(size=n) < 0.5, labels, rng.integers(0, k, n))
        worst_iou = max(worst_iou, abs(miou(confusion_matrix(labels, preds, k)) - recount_miou(labels.tolist(), preds.tolist(), k)))
    worst_ap = 0.0
    for _ in range(200):
        n_gt, n_pred = int(rng.integers(1, 11)), int(rng.integers(0, 11))
        gts = [GroundTruth(0, tuple(rng.uniform(0, 6, 2))) for _ in range(n_gt)]
        preds = [Prediction(0, tuple(rng.uniform(0, 6, 2)), float(rng.uniform())) for _ in range(n_pred)]
        det = DetectionSet(preds, gts)
        for thr in (0.5, 1.0, 2.0, 4.0):
            worst_ap = max(worst_ap, abs(average_precision(det, 0, thr) - oracle_ap(preds, gts, thr)))
    inp = RobustnessInput(0.8, {"fog": [0.7, 0.6, 0.5]}, {"fog": [0.6, 0.5, 0.4]})
    ce_err = abs(corruption_error(inp)[0]["fog"] - 1.2 / 1.5)
    rr_err = abs(resilience_rate(inp)[0]["fog"] - 1.8 / 2.4)
    ok = worst_iou <= 1e-12 and worst_ap <= 1e-9 and ce_err <= 1e-12 and rr_err <= 1e-12
    report(9, ok, f"mIoU {worst_iou:.1e}, AP {worst_ap:.1e}, CE {ce_err:.1e}, RR {rr_err:.1e}")


@pytest.mark.criterion(10, "determinism and persistence")
def test_criterion_10_determinism(small_seqs, tmp_path):
    cfg = TrainConfig(epochs=2, hidden=[16, 16], seed=5)
    a, b = Trainer(cfg, small_seqs), Trainer(cfg, small_seqs)
    a.run()
    b.run()
    same_run = all(np.array_equal(a.state.params[k], b.state.params[k]) for k in a.state.params)

    mid = Trainer(cfg, small_seqs)
    mid.run(max_steps=4)
    ckpt = tmp_path / "mid.limackpt"
    save_checkpoint(ckpt, mid.state, mid.banks)
    ref, replay = [], []
    mid.run(max_steps=6, callback=lambda rec, t: ref.append(copy.deepcopy(t.state.params)))
    resume(ckpt, small_seqs).run(max_steps=6, callback=lambda rec, t: replay.append(copy.deepcopy(t.state.params)))
    same_resume = len(ref) == len(replay) == 6 and all(
        np.array_equal(p[k], q[k]) for p, q in zip(ref, replay) for k in p
    )

    blob = ckpt.read_bytes()
    seq_path = tmp_path / "s.limaseq"
    save_sequence(small_seqs[0], seq_path)
    seq_blob = seq_path.read_bytes()
    same_files = (
        encode_checkpoint(*decode_checkpoint(blob)) == blob
        and encode_sequence(decode_sequence(seq_blob)) == seq_blob
        and encode_sequence(load_sequence(seq_path)) == seq_blob
    )
    report(10, same_run and same_resume and same_files, f"rerun {same_run}, resume over 6 steps {same_resume}, file round trips {same_files}")
