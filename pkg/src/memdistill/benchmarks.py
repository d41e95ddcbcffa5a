"""Desk-scale synthetic benchmarks used for the trend checks and the CLI ablations."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from memdistill.encoders import init_point_encoder
from memdistill.scenedata import SceneConfig, Sequence, generate_sequence
from memdistill.trainer import TrainConfig, Trainer, linear_probe, probe_splits

BENCH_EPOCHS = 4
NUM_TRAIN = 3
NUM_HELDOUT = 1

# per-frame illumination flicker makes single-frame teacher targets unreliable
# in a spatially correlated way, which is what temporal fusion can repair
DYNAMIC_SCENE = SceneConfig(flicker=1.0)
# narrower camera spacing widens the shared field of view
OVERLAP_SCENE = SceneConfig(flicker=1.0, camera_spacing_deg=30.0)
STATIC_SCENE = SceneConfig(num_frames=6, num_points=3000, speed=0.0, static=True, moving_fraction=0.0)

SCENES = {"default": SceneConfig(), "dynamic": DYNAMIC_SCENE, "overlap": OVERLAP_SCENE, "static": STATIC_SCENE}


@dataclass
class Benchmark:
    train: list[Sequence]
    heldout: list[Sequence]
    num_classes: int

    def probe(self, params: dict, config: TrainConfig) -> float:
        fit, score = probe_splits(self.heldout)
        return linear_probe(params, fit, score, self.num_classes, config).miou


def sequence_seeds(dataset_seed: int, count: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence([dataset_seed, 0xBE7C]).generate_state(count)]


def make_benchmark(scene: SceneConfig | str = "default", dataset_seed: int = 0, num_train: int = NUM_TRAIN, num_heldout: int = NUM_HELDOUT) -> Benchmark:
    if isinstance(scene, str):
        scene = SCENES[scene]
    seeds = sequence_seeds(dataset_seed, num_train + num_heldout)
    seqs = [generate_sequence(s, scene, sequence_id=i) for i, s in enumerate(seeds)]
    return Benchmark(seqs[:num_train], seqs[num_train:], scene.num_classes)


@dataclass
class RunResult:
    probe_miou: float
    train_seconds: float
    params: dict


def train_and_probe(bench: Benchmark, config: TrainConfig) -> RunResult:
    start = time.perf_counter()
    trainer = Trainer(config, bench.train)
    trainer.run()
    elapsed = time.perf_counter() - start
    return RunResult(bench.probe(trainer.state.params, config), elapsed, trainer.state.params)


def random_init_probe(bench: Benchmark, config: TrainConfig) -> float:
    return bench.probe(init_point_encoder(config.seed, config.hidden, config.feature_dim), config)


def efficacy(bench: Benchmark, seeds=(0, 1, 2), epochs: int = BENCH_EPOCHS, **overrides) -> list[tuple[float, float]]:
    """(pretrained, random-init) probe mIoU per training seed."""
    out = []
    for seed in seeds:
        cfg = TrainConfig(epochs=epochs, seed=seed, **overrides)
        out.append((train_and_probe(bench, cfg).probe_miou, random_init_probe(bench, cfg)))
    return out


def sweep(bench: Benchmark, field: str, values, seeds=(0, 1, 2, 3, 4), epochs: int = BENCH_EPOCHS, base: TrainConfig | None = None) -> dict:
    """Probe mIoU per value of one config field, one entry per seed."""
    base = base or TrainConfig(epochs=epochs)
    out = {}
    for value in values:
        out[value] = [train_and_probe(bench, replace(base, seed=seed, **{field: value})).probe_miou for seed in seeds]
    return out
