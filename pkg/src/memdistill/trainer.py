"""Pretraining loop, optimiser, linear probing and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from memdistill import encoders, losses
from memdistill.aggregation import MODES, aggregate_arrays
from memdistill.encoders import FeatureSet, point_backward, point_forward
from memdistill.errors import ConfigError, FormatError, InvalidInputError, TrainingError, VersionMismatchError, BadMagicError
from memdistill.geometry import RigidPose, correspondence_arrays
from memdistill.memory import MemoryBank, MemoryEntry, fuse_long_term, warp_entries
from memdistill.metrics import MetricReport, confusion_matrix, segmentation_report
from memdistill.mixing import build_mixed_targets, lasermix, polarmix_swap
from memdistill.scenedata import AugmentPolicy, Frame, PointCloud, Sequence, _Reader, augment_cloud, voxel_downsample_cylindrical

log = logging.getLogger(__name__)

LOSS_KINDS = ("l2", "cosine", "infonce_sampled", "kl")


@dataclass
class TrainConfig:
    epochs: int = 50
    base_lr: float = 0.01
    memory_frames: int = 6
    tau: float = 0.07
    mix_probability: float = 0.5
    aggregation_mode: str = "mean"
    loss_kind: str = "l2"
    head_lr_multiplier: float = 10.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_fraction: float = 0.3
    feature_dim: int = 16
    hidden: list = field(default_factory=lambda: list(encoders.DEFAULT_HIDDEN))
    neighbors: int = encoders.NEIGHBORS
    neighbor_radius: float = encoders.NEIGHBOR_RADIUS
    fusion_radius: float = 0.25
    voxel_resolution: float = 0.1
    augment: bool = True
    num_pairs: int = 4096
    mix_bands: int = 6
    mix_extent: float = math.pi

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if min(self.base_lr, self.tau, self.head_lr_multiplier, self.eps) <= 0:
            raise ConfigError("learning rates, tau and eps must be positive")
        if self.memory_frames < 0:
            raise ConfigError("memory_frames must be >= 0")
        if not 0.0 <= self.mix_probability <= 1.0:
            raise ConfigError("mix_probability must lie in [0, 1]")
        if self.aggregation_mode not in MODES:
            raise ConfigError(f"aggregation_mode must be one of {MODES}")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ConfigError("warmup_fraction must lie in (0, 1)")
        if self.feature_dim < 1 or any(h < 1 for h in self.hidden):
            raise ConfigError("layer sizes must be positive")
        if min(self.fusion_radius, self.voxel_resolution, self.neighbor_radius) <= 0:
            raise ConfigError("radii and resolutions must be positive")
        if self.num_pairs < 1 or self.mix_bands < 2 or self.neighbors < 0:
            raise ConfigError("num_pairs >= 1, mix_bands >= 2 and neighbors >= 0 required")

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            cfg = cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        cfg.hidden = list(cfg.hidden)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


# --------------------------------------------------------------------------
# optimiser


def onecycle_lr(step: int, total_steps: int, base_lr: float, warmup_fraction: float = 0.3) -> float:
    """Linear warm-up from base/25 to base, then cosine decay to base/1e4."""
    total_steps = max(int(total_steps), 1)
    warm = max(1, int(round(warmup_fraction * total_steps)))
    start, final = base_lr / 25.0, base_lr / 1e4
    if step < warm:
        return start + (base_lr - start) * step / warm
    span = max(1, total_steps - 1 - warm)
    progress = min(1.0, (step - warm) / span)
    return final + (base_lr - final) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamHyper:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    lr_scale: dict = field(default_factory=dict)  # per-parameter multiplier


def init_moments(params: dict) -> dict:
    return {
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
        "t": 0,
    }


def adamw_step(params: dict, grads: dict, moments: dict, hyper: AdamHyper) -> tuple[dict, dict]:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {name!r} at optimiser step {moments['t']}")
    t = moments["t"] + 1
    new_params, new_m, new_v = {}, {}, {}
    bc1 = 1.0 - hyper.beta1**t
    bc2 = 1.0 - hyper.beta2**t
    for name, p in params.items():
        g = grads[name]
        lr = hyper.lr * hyper.lr_scale.get(name, 1.0)
        m = hyper.beta1 * moments["m"][name] + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * moments["v"][name] + (1.0 - hyper.beta2) * g * g
        p = p * (1.0 - lr * hyper.weight_decay)
        new_params[name] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + hyper.eps)
        new_m[name], new_v[name] = m, v
    return new_params, {"m": new_m, "v": new_v, "t": t}


# --------------------------------------------------------------------------
# teacher side


@dataclass
class PreparedFrame:
    """Voxelised cloud plus cross-view unified teacher features (masked)."""

    frame: Frame
    cloud: PointCloud
    unified: FeatureSet


def unified_features(cloud: PointCloud, frame: Frame, dim: int, mode: str) -> FeatureSet:
    pidx, cidx, uv, _ = correspondence_arrays(cloud.coords, frame.cameras)
    samples = np.zeros((len(pidx), dim))
    for j, (cam, img) in enumerate(zip(frame.cameras, frame.images)):
        sel = cidx == j
        if sel.any():
            grid = encoders.image_encode(img, dim=dim)
            samples[sel] = encoders.sample_features(grid, uv[sel], cam.width, cam.height)
    return aggregate_arrays(pidx, samples, len(cloud), mode)


def prepare_frame(frame: Frame, config: TrainConfig) -> PreparedFrame:
    cloud = voxel_downsample_cylindrical(frame.cloud, config.voxel_resolution)
    return PreparedFrame(frame, cloud, unified_features(cloud, frame, config.feature_dim, config.aggregation_mode))


def fused_targets(prep: PreparedFrame, bank: MemoryBank, radius: float) -> FeatureSet:
    """Memory-fused targets for the visible rows; other rows stay masked."""
    vis = prep.unified.valid()
    history = bank.before(prep.frame.timestamp)
    out = prep.unified.features.copy()
    if history and vis.any():
        warped = warp_entries(history, prep.frame.ego_pose)
        out[vis] = fuse_long_term(prep.cloud.coords[vis], out[vis], warped, radius).features
    return FeatureSet(out, vis)


def memory_entry(prep: PreparedFrame) -> MemoryEntry:
    vis = prep.unified.valid()
    return MemoryEntry.from_ego(prep.frame.timestamp, prep.frame.ego_pose, prep.cloud.coords[vis], prep.unified.features[vis])


# --------------------------------------------------------------------------
# steps


@dataclass
class TrainState:
    config: TrainConfig
    params: dict
    moments: dict
    step: int = 0
    total_steps: int = 1

    @classmethod
    def fresh(cls, config: TrainConfig, total_steps: int = 1) -> TrainState:
        params = encoders.init_point_encoder(config.seed, config.hidden, config.feature_dim)
        return cls(config, params, init_moments(params), 0, total_steps)


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, 0x57E9])


def _distill_loss(kind: str, teacher, student, config: TrainConfig, rng) -> losses.LossOutput:
    if kind == "l2":
        return losses.l2_distill(teacher, student)
    if kind == "cosine":
        return losses.cosine_distill(teacher, student)
    if kind == "kl":
        return losses.kl_distill(teacher, student, config.tau)
    if kind == "infonce_sampled":
        return losses.infonce_sampled(teacher, student, config.tau, config.num_pairs, rng)
    raise ConfigError(f"unknown loss kind {kind!r}")


def student_input(cloud: PointCloud, config: TrainConfig, rng) -> PointCloud:
    if config.augment:
        return augment_cloud(cloud, rng, AugmentPolicy())[0]
    return cloud


def _optimise(state: TrainState, cloud: PointCloud, targets: FeatureSet, kind: str, rng) -> float:
    cfg = state.config
    student_cloud = student_input(cloud, cfg, rng)
    out, cache = point_forward(state.params, student_cloud, cfg.neighbors, cfg.neighbor_radius)
    vis = targets.valid()
    if not vis.any():
        log.debug("step %d: no visible points, skipping update", state.step)
        state.step += 1
        return float("nan")
    res = _distill_loss(kind, targets.features[vis], out[vis], cfg, rng)
    upstream = np.zeros_like(out)
    upstream[vis] = res.grad_student
    grads = point_backward(state.params, cache, upstream)
    head = encoders.head_names(state.params)
    hyper = AdamHyper(
        lr=onecycle_lr(state.step, state.total_steps, cfg.base_lr, cfg.warmup_fraction),
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        eps=cfg.eps,
        weight_decay=cfg.weight_decay,
        lr_scale={name: cfg.head_lr_multiplier for name in head},
    )
    state.params, state.moments = adamw_step(state.params, grads, state.moments, hyper)
    state.step += 1
    return res.value


def pretrain_step(state: TrainState, frame: Frame, bank: MemoryBank, prepared: PreparedFrame | None = None):
    """One distillation update on ``frame``; returns ``(state, bank, loss)``.

    The loss is evaluated before the parameter update.
    """
    cfg = state.config
    prep = prepared if prepared is not None else prepare_frame(frame, cfg)
    targets = fused_targets(prep, bank, cfg.fusion_radius)
    loss = _optimise(state, prep.cloud, targets, cfg.loss_kind, step_rng(cfg.seed, state.step))
    bank.push(memory_entry(prep))
    return state, bank, loss


def mix_clouds(cloud_a: PointCloud, cloud_b: PointCloud, config: TrainConfig, rng) -> PointCloud:
    if rng.uniform() < 0.5:
        return lasermix(cloud_a, cloud_b, config.mix_bands, rng)
    start = rng.uniform(-math.pi, math.pi)
    return polarmix_swap(cloud_a, cloud_b, start, config.mix_extent)


def pretrain_mixed_step(state: TrainState, frame_a: Frame, frame_b: Frame, bank_a: MemoryBank, bank_b: MemoryBank, rng=None, prepared=(None, None), sequence_ids=None):
    """Distill a mixed scene against each source's own memory-fused targets.

    Banks are read but never updated here.
    """
    cfg = state.config
    rng = rng if rng is not None else step_rng(cfg.seed, state.step)
    prep_a = prepared[0] or prepare_frame(frame_a, cfg)
    prep_b = prepared[1] or prepare_frame(frame_b, cfg)
    id_a, id_b = sequence_ids if sequence_ids is not None else (0, 1)
    cloud_a = _tag(prep_a.cloud, id_a)
    cloud_b = _tag(prep_b.cloud, id_b)
    fused_a = fused_targets(prep_a, bank_a, cfg.fusion_radius)
    fused_b = fused_targets(prep_b, bank_b, cfg.fusion_radius)
    mixed = mix_clouds(cloud_a, cloud_b, cfg, rng)
    scene = build_mixed_targets(mixed, fused_a, fused_b, id_a, id_b)
    loss = _optimise(state, scene.cloud, scene.source_targets, "l2", rng)
    return state, loss


def _tag(cloud: PointCloud, seq_id: int) -> PointCloud:
    return PointCloud(cloud.coords, cloud.intensity, cloud.label, np.full(len(cloud), seq_id), cloud.point_ids())


# --------------------------------------------------------------------------
# loop


@dataclass(frozen=True)
class PlanItem:
    kind: str  # frame | mix
    seq: int  # index into the sequence list
    frame: int
    partner: int = -1
    partner_frame: int = -1


def build_plan(config: TrainConfig, sequences: list[Sequence]) -> list[PlanItem]:
    """Lock-step traversal: at tick t every sequence contributes frame t,
    optionally followed by a mixed step with a random other sequence."""
    rng = np.random.default_rng([config.seed, 0x91A7])
    longest = max((len(s) for s in sequences), default=0)
    plan = []
    for _ in range(config.epochs):
        for t in range(longest):
            for s, seq in enumerate(sequences):
                if t >= len(seq):
                    continue
                plan.append(PlanItem("frame", s, t))
                if len(sequences) > 1 and rng.uniform() < config.mix_probability:
                    partner = int(rng.integers(len(sequences) - 1))
                    partner += partner >= s
                    pf = min(t, len(sequences[partner]) - 1)
                    plan.append(PlanItem("mix", s, t, partner, pf))
    return plan


@dataclass
class StepRecord:
    step: int
    lr: float
    loss: float
    kind: str


class Trainer:
    def __init__(self, config: TrainConfig, sequences: list[Sequence], state: TrainState | None = None, banks: dict | None = None):
        config.validate()
        self.config = config
        self.sequences = list(sequences)
        if len({s.id for s in self.sequences}) != len(self.sequences):
            raise InvalidInputError("sequence ids must be unique")
        self.plan = build_plan(config, self.sequences)
        self.state = state or TrainState.fresh(config, len(self.plan))
        self.state.total_steps = max(len(self.plan), 1)
        self.banks = banks or {s.id: MemoryBank(config.memory_frames) for s in self.sequences}
        self.history: list[StepRecord] = []
        self._cache: dict = {}

    def prepared(self, s: int, t: int) -> PreparedFrame:
        key = (s, t)
        if key not in self._cache:
            self._cache[key] = prepare_frame(self.sequences[s].frames[t], self.config)
        return self._cache[key]

    @property
    def done(self) -> bool:
        return self.state.step >= len(self.plan)

    def run(self, max_steps: int | None = None, callback=None) -> list[StepRecord]:
        stop = len(self.plan) if max_steps is None else min(len(self.plan), self.state.step + max_steps)
        while self.state.step < stop:
            item = self.plan[self.state.step]
            lr = onecycle_lr(self.state.step, self.state.total_steps, self.config.base_lr, self.config.warmup_fraction)
            seq = self.sequences[item.seq]
            if item.kind == "frame":
                if item.frame == 0:
                    self.banks[seq.id] = MemoryBank(self.config.memory_frames)
                _, _, loss = pretrain_step(self.state, seq.frames[item.frame], self.banks[seq.id], self.prepared(item.seq, item.frame))
            else:
                other = self.sequences[item.partner]
                _, loss = pretrain_mixed_step(
                    self.state,
                    seq.frames[item.frame],
                    other.frames[item.partner_frame],
                    self.banks[seq.id],
                    self.banks[other.id],
                    prepared=(self.prepared(item.seq, item.frame), self.prepared(item.partner, item.partner_frame)),
                    sequence_ids=(seq.id, other.id),
                )
            rec = StepRecord(self.state.step - 1, lr, loss, item.kind)
            self.history.append(rec)
            if callback is not None:
                callback(rec, self)
        return self.history


def pretrain(config: TrainConfig, sequences: list[Sequence]) -> Trainer:
    trainer = Trainer(config, sequences)
    trainer.run()
    return trainer


# --------------------------------------------------------------------------
# linear probing


def probe_splits(sequences: list[Sequence]) -> tuple[list[Frame], list[Frame]]:
    """First half of every held-out sequence fits the probe, second half scores it."""
    train, evaluate = [], []
    for seq in sequences:
        half = max(1, len(seq.frames) // 2)
        train.extend(seq.frames[:half])
        evaluate.extend(seq.frames[half:] or seq.frames[:half])
    return train, evaluate


def frozen_features(params: dict, frames: list[Frame], config: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    feats, labels = [], []
    for fr in frames:
        cloud = voxel_downsample_cylindrical(fr.cloud, config.voxel_resolution)
        out, _ = point_forward(params, cloud, config.neighbors, config.neighbor_radius)
        feats.append(out)
        labels.append(cloud.label)
    if not feats:
        raise InvalidInputError("empty split")
    return np.concatenate(feats), np.concatenate(labels)


def fit_linear_classifier(x: np.ndarray, y: np.ndarray, num_classes: int, iterations: int = 200, lr: float = 0.1):
    """Multinomial logistic regression by full-batch gradient descent from zero."""
    n, c = x.shape
    w = np.zeros((c, num_classes))
    b = np.zeros(num_classes)
    onehot = np.eye(num_classes)[y]
    for _ in range(iterations):
        logits = x @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        w -= lr * (x.T @ g)
        b -= lr * g.sum(axis=0)
    return w, b


def linear_probe(params: dict, train_split: list[Frame], eval_split: list[Frame], num_classes: int, config: TrainConfig | None = None) -> MetricReport:
    config = config or TrainConfig()
    if not train_split or not eval_split:
        raise InvalidInputError("probe splits must be non-empty")
    x_tr, y_tr = frozen_features(params, train_split, config)
    x_ev, y_ev = frozen_features(params, eval_split, config)
    mu = x_tr.mean(axis=0)
    sd = x_tr.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    w, b = fit_linear_classifier((x_tr - mu) / sd, y_tr, num_classes)
    pred = np.argmax(((x_ev - mu) / sd) @ w + b, axis=1)
    return segmentation_report(confusion_matrix(y_ev, pred, num_classes))


# --------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"LIMACKPT"
CKPT_VERSION = 1


def _section(name: str, values) -> bytes:
    arr = np.ascontiguousarray(np.asarray(values, dtype="<f8").ravel())
    raw = name.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw + struct.pack("<Q", arr.size) + arr.tobytes()


def encode_checkpoint(state: TrainState, banks: dict) -> bytes:
    cfg = state.config.canonical_json().encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(cfg)), cfg]
    parts.append(_section("meta/step", [state.step, state.moments["t"]]))
    for name, arr in state.params.items():
        parts.append(_section(f"param/{name}", arr))
        parts.append(_section(f"adam_m/{name}", state.moments["m"][name]))
        parts.append(_section(f"adam_v/{name}", state.moments["v"][name]))
    for seq_id in sorted(banks):
        bank = banks[seq_id]
        parts.append(_section(f"bank/{seq_id}", [bank.capacity, len(bank)]))
        for i, e in enumerate(bank.entries):
            parts.append(_section(f"bank/{seq_id}/{i}/head", [e.timestamp, *e.ego_pose.to_array(), *e.features.shape]))
            parts.append(_section(f"bank/{seq_id}/{i}/anchors", e.anchors))
            parts.append(_section(f"bank/{seq_id}/{i}/features", e.features))
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> tuple[TrainState, dict]:
    rd = _Reader(buf)
    if len(buf) < len(CKPT_MAGIC):
        raise FormatError("file shorter than magic")
    magic = rd.take(len(CKPT_MAGIC))
    if magic != CKPT_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    version, cfg_len = rd.unpack("<II")
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"unsupported checkpoint version {version}")
    try:
        config = TrainConfig.from_dict(json.loads(rd.take(cfg_len).decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError, ConfigError) as exc:
        raise FormatError(f"bad embedded config: {exc}") from exc

    sections = {}
    order = []
    while rd.pos < len(buf):
        (n,) = rd.unpack("<I")
        name = rd.take(n).decode("utf-8")
        (count,) = rd.unpack("<Q")
        sections[name] = rd.array("<f8", count).copy()
        order.append(name)

    def need(name):
        if name not in sections:
            raise FormatError(f"missing section {name!r}")
        return sections[name]

    step, t = (int(v) for v in need("meta/step"))
    template = encoders.init_point_encoder(0, config.hidden, config.feature_dim)
    params, m, v = {}, {}, {}
    for name, arr in template.items():
        for store, prefix in ((params, "param"), (m, "adam_m"), (v, "adam_v")):
            data = need(f"{prefix}/{name}")
            if data.size != arr.size:
                raise FormatError(f"section {prefix}/{name} has {data.size} values, expected {arr.size}")
            store[name] = data.reshape(arr.shape)
    banks = {}
    for name in order:
        parts = name.split("/")
        if parts[0] != "bank" or len(parts) != 2:
            continue
        seq_id = int(parts[1])
        capacity, count = (int(x) for x in sections[name])
        bank = MemoryBank(capacity)
        for i in range(count):
            head = need(f"bank/{seq_id}/{i}/head")
            rows, dim = int(head[13]), int(head[14])
            anchors = need(f"bank/{seq_id}/{i}/anchors").reshape(rows, 3)
            feats = need(f"bank/{seq_id}/{i}/features").reshape(rows, dim)
            bank.push(MemoryEntry(int(head[0]), RigidPose.from_array(head[1:13]), anchors, feats))
        banks[seq_id] = bank
    state = TrainState(config, params, {"m": m, "v": v, "t": t}, step)
    return state, banks


def save_checkpoint(path, state: TrainState, banks: dict) -> None:
    Path(path).write_bytes(encode_checkpoint(state, banks))


def load_checkpoint(path) -> tuple[TrainState, dict]:
    return decode_checkpoint(Path(path).read_bytes())


def resume(path, sequences: list[Sequence]) -> Trainer:
    state, banks = load_checkpoint(path)
    ids = {s.id for s in sequences}
    banks = {k: v for k, v in banks.items() if k in ids}
    for s in sequences:
        banks.setdefault(s.id, MemoryBank(state.config.memory_frames))
    return Trainer(state.config, sequences, state, banks)
