"""Command-line entry point: generate, pretrain, probe, ablate, metrics.

Exit codes: 0 success, 2 usage or configuration error, 3 corrupt data or state.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from memdistill import benchmarks
from memdistill.encoders import check_params
from memdistill.errors import ConfigError, ConsistencyError, FormatError, InvalidInputError, TrainingError
from memdistill.metrics import (
    DetectionSet,
    GroundTruth,
    MetricReport,
    Prediction,
    RobustnessInput,
    corruption_error,
    mean_average_precision,
    nds,
    resilience_rate,
    segmentation_report,
)
from memdistill.scenedata import SceneConfig, generate_sequence, load_sequence, save_sequence
from memdistill.trainer import TrainConfig, Trainer, linear_probe, load_checkpoint, probe_splits, resume, save_checkpoint

log = logging.getLogger("memdistill")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 2, 3
CSV_HEADER_TRACE = ["step", "lr", "loss"]
CSV_HEADER_ABLATE = ["value", "probe_miou", "train_seconds"]
AXES = {"frames": "memory_frames", "aggregation": "aggregation_mode", "loss": "loss_kind"}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# --------------------------------------------------------------------------
# manifest


@dataclass
class RunManifest:
    command: list
    config_hash: str | None
    seed: int | None
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    wall_clock_seconds: float = 0.0
    git_describe: str = "unknown"


def config_hash(config: dict | None) -> str | None:
    if config is None:
        return None
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=10,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def write_manifest(path: Path, manifest: RunManifest) -> None:
    path.write_text(json.dumps(asdict(manifest), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def manifest_path(output: Path) -> Path:
    """``manifest.json`` inside an output directory, ``<file>.manifest.json`` beside a file."""
    return output / "manifest.json" if output.is_dir() else output.with_name(output.name + ".manifest.json")


# --------------------------------------------------------------------------
# helpers


def worker_count() -> int:
    raw = os.environ.get("LIMA_THREADS")
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"LIMA_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"LIMA_THREADS must be a positive integer, got {raw!r}")
    return n


def cap_native_threads(n: int) -> None:
    # affects BLAS pools created after this point, including worker processes
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def read_json(path: str) -> object:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{path}: no such file")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise UsageError(f"{path}: not valid UTF-8 JSON ({exc})") from exc


def load_scene_config(path: str | None, preset: str) -> SceneConfig:
    if path is None:
        return benchmarks.SCENES[preset]
    data = read_json(path)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: scene config must be a JSON object")
    return SceneConfig.from_dict(data)


def load_train_config(path: str | None) -> TrainConfig:
    if path is None:
        return TrainConfig()
    data = read_json(path)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: train config must be a JSON object")
    return TrainConfig.from_dict(data)


def sequence_files(paths: list[str]) -> list[Path]:
    files = []
    for raw in paths:
        p = Path(raw)
        if p.is_dir():
            files.extend(sorted(p.glob("*.limaseq")))
        elif p.is_file():
            files.append(p)
        else:
            raise UsageError(f"{raw}: no such file or directory")
    if not files:
        raise UsageError("no sequence files found")
    return files


def load_sequences(paths: list[str]):
    files = sequence_files(paths)
    return [load_sequence(f) for f in files], files


def fmt(x: float) -> str:
    return repr(float(x))


# --------------------------------------------------------------------------
# commands


def cmd_generate(args) -> RunManifest:
    scene = load_scene_config(args.config, args.scene)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for i, seed in enumerate(benchmarks.sequence_seeds(args.seed, args.num_sequences)):
        seq = generate_sequence(seed, scene, sequence_id=i)
        path = out / f"seq_{i:03d}.limaseq"
        save_sequence(seq, path)
        outputs.append(str(path))
        points = sum(len(f.cloud) for f in seq.frames)
        hist = np.bincount(np.concatenate([f.cloud.label for f in seq.frames]), minlength=seq.num_classes)
        print(f"sequence {i}: frames={len(seq.frames)} points={points} classes={hist.tolist()} -> {path}")
    return RunManifest(args.argv, config_hash(scene.to_dict()), args.seed, [args.config] if args.config else [], outputs)


def cmd_pretrain(args) -> RunManifest:
    seqs, files = load_sequences(args.data)
    out = Path(args.out)
    if args.resume:
        trainer = resume(args.resume, seqs)
        if args.config and load_train_config(args.config) != trainer.config:
            raise UsageError("--config differs from the configuration stored in the checkpoint")
    else:
        trainer = Trainer(load_train_config(args.config), seqs)
    out.mkdir(parents=True, exist_ok=True)
    start = trainer.state.step
    history = trainer.run(max_steps=args.max_steps)
    ckpt = out / "checkpoint.limackpt"
    save_checkpoint(ckpt, trainer.state, trainer.banks)
    trace = out / "loss.csv"
    with trace.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER_TRACE)
        for rec in history:
            w.writerow([rec.step, fmt(rec.lr), fmt(rec.loss)])
    print(f"trained steps {start}..{trainer.state.step} of {len(trainer.plan)}; checkpoint {ckpt}")
    inputs = [str(f) for f in files] + [p for p in (args.config, args.resume) if p]
    return RunManifest(args.argv, config_hash(trainer.config.to_dict()), trainer.config.seed, inputs, [str(ckpt), str(trace)])


def cmd_probe(args) -> RunManifest:
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"{args.checkpoint}: no such file")
    state, _ = load_checkpoint(args.checkpoint)
    seqs, files = load_sequences(args.data)
    classes = {s.num_classes for s in seqs}
    if len(classes) != 1:
        raise DataError(f"sequences disagree on the number of classes: {sorted(classes)}")
    try:
        check_params(state.params)
    except InvalidInputError as exc:
        raise DataError(f"checkpoint parameters are inconsistent: {exc}") from exc
    fit, score = probe_splits(seqs)
    report = linear_probe(state.params, fit, score, classes.pop(), state.config)
    text = report.to_json()
    Path(args.report).write_text(text + "\n", encoding="utf-8")
    print(text)
    return RunManifest(
        args.argv, config_hash(state.config.to_dict()), state.config.seed, [args.checkpoint, *map(str, files)], [args.report]
    )


def parse_axis_values(axis: str, values: list[str]) -> list:
    if axis == "frames":
        try:
            return [int(v) for v in values]
        except ValueError:
            raise UsageError(f"frames values must be integers, got {values}") from None
    return list(values)


def _ablate_one(job):
    scene, dataset_seed, cfg_dict = job
    bench = benchmarks.make_benchmark(scene, dataset_seed)
    res = benchmarks.train_and_probe(bench, TrainConfig.from_dict(cfg_dict))
    return res.probe_miou, res.train_seconds


def cmd_ablate(args) -> RunManifest:
    field_name = AXES[args.axis]
    values = parse_axis_values(args.axis, args.values)
    base = load_train_config(args.config) if args.config else TrainConfig(epochs=benchmarks.BENCH_EPOCHS)
    if args.epochs is not None:
        base.epochs = args.epochs
    if args.seed is not None:
        base.seed = args.seed
    jobs = []
    for v in values:
        cfg = TrainConfig.from_dict({**base.to_dict(), field_name: v})
        jobs.append((args.scene, args.dataset_seed, cfg.to_dict()))
    workers = min(worker_count(), len(jobs))
    cap_native_threads(1 if workers > 1 else worker_count())
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_ablate_one, jobs))
    else:
        results = [_ablate_one(j) for j in jobs]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER_ABLATE)
        for v, (m, secs) in zip(values, results):
            w.writerow([v, fmt(m), f"{secs:.3f}"])
            print(f"{args.axis}={v}: probe mIoU {m:.4f} ({secs:.1f} s)")
    return RunManifest(args.argv, config_hash(base.to_dict()), base.seed, [args.config] if args.config else [], [str(out)])


# --------------------------------------------------------------------------
# metrics


_NUM = {"type": "number"}
_TRIPLE = {"type": "array", "items": _NUM, "minItems": 3, "maxItems": 3}
_CENTER = {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}

CONFUSION_SCHEMA = {
    "type": "object",
    "required": ["matrix"],
    "additionalProperties": False,
    "properties": {
        "matrix": {
            "type": "array",
            "minItems": 1,
            "items": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 0}},
        }
    },
}

ROBUSTNESS_SCHEMA = {
    "type": "object",
    "required": ["clean_miou", "corruptions", "baseline"],
    "additionalProperties": False,
    "properties": {
        "clean_miou": {"type": "number", "minimum": 0, "maximum": 1},
        "corruptions": {"type": "object", "minProperties": 1, "additionalProperties": _TRIPLE},
        "baseline": {"type": "object", "minProperties": 1, "additionalProperties": _TRIPLE},
    },
}

DETECTION_SCHEMA = {
    "type": "object",
    "required": ["predictions", "ground_truth"],
    "additionalProperties": False,
    "properties": {
        "predictions": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["cls", "center", "confidence"],
                "additionalProperties": False,
                "properties": {"cls": {"type": "integer", "minimum": 0}, "center": _CENTER, "confidence": _NUM},
            },
        },
        "ground_truth": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["cls", "center"],
                "additionalProperties": False,
                "properties": {"cls": {"type": "integer", "minimum": 0}, "center": _CENTER},
            },
        },
        "thresholds": {"type": "array", "minItems": 1, "items": {"type": "number", "exclusiveMinimum": 0}},
        "mtp": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 5, "maxItems": 5},
    },
}


def validate(doc, schema, source: str) -> None:
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise UsageError(f"{source}: schema violation at {where}: {exc.message}") from None


def confusion_report(doc) -> MetricReport:
    cm = np.asarray(doc["matrix"], dtype=np.int64) if len({len(r) for r in doc["matrix"]}) == 1 else None
    if cm is None or cm.shape[0] != cm.shape[1]:
        raise UsageError("matrix: must be square")
    return segmentation_report(cm)


def robustness_report(doc) -> MetricReport:
    inp = RobustnessInput(doc["clean_miou"], doc["corruptions"], doc["baseline"])
    _, mce = corruption_error(inp)
    _, mrr = resilience_rate(inp)
    return MetricReport(mce=100.0 * mce, mrr=100.0 * mrr)


def detection_report(doc) -> MetricReport:
    det = DetectionSet(
        [Prediction(p["cls"], tuple(p["center"]), p["confidence"]) for p in doc["predictions"]],
        [GroundTruth(g["cls"], tuple(g["center"])) for g in doc["ground_truth"]],
    )
    thresholds = doc.get("thresholds")
    m = mean_average_precision(det) if thresholds is None else mean_average_precision(det, thresholds)
    return MetricReport(map=m, nds=nds(m, doc["mtp"]) if "mtp" in doc else None)


def cmd_metrics(args) -> RunManifest:
    kinds = [
        (args.confusion, CONFUSION_SCHEMA, confusion_report),
        (args.robustness, ROBUSTNESS_SCHEMA, robustness_report),
        (args.detections, DETECTION_SCHEMA, detection_report),
    ]
    path, schema, build = next(k for k in kinds if k[0])
    doc = read_json(path)
    validate(doc, schema, path)
    try:
        report = build(doc)
    except InvalidInputError as exc:
        raise UsageError(f"{path}: {exc}") from exc
    text = report.to_json()
    print(text)
    outputs = []
    if args.report:
        Path(args.report).write_text(text + "\n", encoding="utf-8")
        outputs.append(args.report)
    return RunManifest(args.argv, None, None, [path], outputs)


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lima", description="Image-to-LiDAR memory distillation at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write synthetic sequences")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config", help="scene config JSON (overrides --scene)")
    g.add_argument("--scene", choices=sorted(benchmarks.SCENES), default="default")
    g.add_argument("--num-sequences", type=int, default=benchmarks.NUM_TRAIN + benchmarks.NUM_HELDOUT)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    p = sub.add_parser("pretrain", help="distill into the point encoder")
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--resume")
    p.add_argument("--max-steps", type=int)
    p.set_defaults(func=cmd_pretrain)

    q = sub.add_parser("probe", help="linear probe on frozen features")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--data", nargs="+", required=True)
    q.add_argument("--report", required=True)
    q.set_defaults(func=cmd_probe)

    a = sub.add_parser("ablate", help="sweep one axis on a synthetic benchmark")
    a.add_argument("--axis", choices=sorted(AXES), required=True)
    a.add_argument("--values", nargs="+", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--scene", choices=sorted(benchmarks.SCENES), default="default")
    a.add_argument("--dataset-seed", type=int, default=0)
    a.add_argument("--config")
    a.add_argument("--epochs", type=int)
    a.add_argument("--seed", type=int)
    a.set_defaults(func=cmd_ablate)

    m = sub.add_parser("metrics", help="evaluate metrics from JSON")
    src = m.add_mutually_exclusive_group(required=True)
    src.add_argument("--confusion")
    src.add_argument("--robustness")
    src.add_argument("--detections")
    m.add_argument("--report")
    m.set_defaults(func=cmd_metrics)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "pretrain" and args.max_steps is not None and args.max_steps < 0:
        print("error: --max-steps must be >= 0", file=sys.stderr)
        return EXIT_USAGE

    started = time.perf_counter()
    try:
        manifest = args.func(args)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, ConsistencyError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InvalidInputError as exc:
        # bad values reaching the numeric core come from the data files
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA

    manifest.wall_clock_seconds = round(time.perf_counter() - started, 3)
    manifest.git_describe = git_describe()
    target = Path(args.out) if getattr(args, "out", None) else Path(manifest.outputs[0]) if manifest.outputs else None
    if target is not None:
        write_manifest(manifest_path(target), manifest)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
