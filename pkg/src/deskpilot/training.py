"""Frame selection, viewpoint augmentation with adjusted labels, and the SGD loop."""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .camera import CameraIntrinsics, CameraExtrinsics, CropSpec, Frame, network_input
from .geometry import LanePose, recovery_label

log = logging.getLogger(__name__)

MAX_SHIFT = 2.0
MAX_ROTATION = 0.3


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    def __init__(self, message, last_good: nn.Checkpoint):
        super().__init__(message)
        self.last_good = last_good


@dataclass(frozen=True)
class SelectionConfig:
    sample_rate: float = 10.0
    curve_boost: float = 2.0
    curve_threshold: float = 1.0 / 200.0
    activity: str = "lane_keeping"
    cameras: tuple = ("left", "center", "right")
    seed: int = 0


@dataclass(frozen=True)
class AugmentConfig:
    sigma_shift: float = 0.3
    sigma_rot: float = 0.04
    enabled: bool = True

    def __post_init__(self):
        if self.enabled and (self.sigma_shift < 0 or self.sigma_rot < 0):
            raise TrainingError("augmentation sigmas must be non-negative")

    @classmethod
    def from_human(cls, sigma_offset: float, sigma_heading: float) -> "AugmentConfig":
        """Perturbation spread set to twice the measured human spread."""
        if not (sigma_offset > 0 and sigma_heading > 0):
            raise TrainingError("measured human sigmas must be positive")
        return cls(2.0 * sigma_offset, 2.0 * sigma_heading)

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(0.0, 0.0, enabled=False)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 10
    lr: float = 1e-3
    momentum: float = 0.9
    seed: int = 0
    val_fraction: float = 0.2


@dataclass(frozen=True)
class SampleRef:
    run: int
    tick: int
    camera_id: str


def select_frames(runs: list, cfg: SelectionConfig) -> list:
    """Lane-keeping frames decimated to ``sample_rate``, curve frames duplicated."""
    rng = np.random.default_rng(cfg.seed)
    out = []
    for ri, run in enumerate(runs):
        if run.activity_label != cfg.activity:
            continue
        ratio = run.tick_rate / cfg.sample_rate
        step = int(round(ratio))
        if step < 1 or abs(ratio - step) > 1e-6:
            raise TrainingError(f"cannot decimate {run.tick_rate} Hz to {cfg.sample_rate} Hz")
        for tick in range(0, len(run), step):
            copies = 1
            if abs(run.curvatures[tick]) > cfg.curve_threshold:
                whole = math.floor(cfg.curve_boost)
                copies = whole + int(rng.random() < cfg.curve_boost - whole)
            for _ in range(copies):
                for cam in cfg.cameras:
                    out.append(SampleRef(ri, tick, cam))
    if not out:
        raise TrainingError("frame selection is empty")
    return out


def draw_perturbation(cfg: AugmentConfig, rng: np.random.Generator):
    if not cfg.enabled:
        return 0.0, 0.0
    d = float(rng.normal(0.0, cfg.sigma_shift)) if cfg.sigma_shift > 0 else 0.0
    r = float(rng.normal(0.0, cfg.sigma_rot)) if cfg.sigma_rot > 0 else 0.0
    return float(np.clip(d, -MAX_SHIFT, MAX_SHIFT)), float(np.clip(r, -MAX_ROTATION, MAX_ROTATION))


def adjusted_label(pose: LanePose, camera_offset: float, shift: float, rotation: float,
                   speed: float, road_curvature: float, human_command: float) -> float:
    """Label for an image seen from a camera displaced by ``camera_offset + shift``.

    Untouched center-camera frames keep the human command; every displaced
    view gets the recovery command at the displaced pose.
    """
    total = camera_offset + shift
    if total == 0.0 and rotation == 0.0:
        return human_command
    return recovery_label(pose.offset + total, pose.heading_err + rotation, speed,
                          road_curvature).inv_radius


def augment_sample(frame: Frame, truth_pose: LanePose, road_curvature: float, speed: float,
                   cfg: AugmentConfig, rng: np.random.Generator, human_command: float,
                   intr: CameraIntrinsics, extr: CameraExtrinsics, crop: CropSpec,
                   perturbation=None):
    """One training pair: (network input as float32 (3, H, W), label in 1/m).

    The image shift/rotation and the label adjustment come from the same draw.
    """
    shift, rot = perturbation if perturbation is not None else draw_perturbation(cfg, rng)
    image = network_input(frame, intr, extr, crop, shift, rot).astype(np.float32)
    label = adjusted_label(truth_pose, extr.lateral_offset, shift, rot, speed, road_curvature,
                           human_command)
    return image, label


def split_runs(runs: list, val_fraction: float):
    """Assign whole runs to validation by hash of run id (never by frame)."""
    if not 0 <= val_fraction < 1:
        raise TrainingError("val_fraction must be in [0, 1)")
    keyed = sorted(range(len(runs)),
                   key=lambda i: hashlib.sha256(runs[i].run_id.encode()).hexdigest())
    n_val = int(math.ceil(val_fraction * len(runs))) if len(runs) > 1 else 0
    n_val = min(n_val, len(runs) - 1)
    val = sorted(keyed[:n_val])
    train = sorted(keyed[n_val:])
    return train, val


class SampleStream:
    """Materializes (image, label) batches for a list of sample refs."""

    def __init__(self, runs: list, refs: list, augment: AugmentConfig, crop: CropSpec):
        self.runs = runs
        self.refs = refs
        self.augment = augment
        self.crop = crop

    def __len__(self):
        return len(self.refs)

    def sample(self, ref: SampleRef, rng):
        run = self.runs[ref.run]
        rig = run.frames.rig
        frame = run.frame(ref.tick, ref.camera_id)
        return augment_sample(frame, run.pose(ref.tick), float(run.curvatures[ref.tick]), run.speed,
                              self.augment, rng, float(run.commands[ref.tick]), rig.intrinsics,
                              rig.extrinsics(ref.camera_id), self.crop)

    def batch(self, indices, rng):
        xs, ys = [], []
        for i in indices:
            x, y = self.sample(self.refs[i], rng)
            xs.append(x)
            ys.append(y)
        return np.stack(xs), np.asarray(ys, dtype=np.float64)


def _evaluate(spec, weights, stream: SampleStream, seed: int, batch_size: int) -> float:
    if len(stream) == 0:
        return float("nan")
    rng = np.random.default_rng([seed, 0xA11])
    total, count = 0.0, 0
    for start in range(0, len(stream), batch_size):
        idx = range(start, min(start + batch_size, len(stream)))
        x, y = stream.batch(idx, rng)
        p = nn.predict(spec, weights, x)
        total += float(np.sum((np.asarray(p, np.float64) - y) ** 2))
        count += len(y)
    return total / count


def train(runs: list, selection: SelectionConfig, augment: AugmentConfig, cfg: TrainConfig,
          crop: CropSpec | None = None, spec: nn.NetworkSpec = nn.DEFAULT_SPEC,
          weights: list | None = None, on_epoch=None):
    """Minimize batch MSE over augmented samples.

    Returns the checkpoint with the best validation loss (train loss if no
    run is held out) and the per-epoch history ``[(epoch, train, val)]``.
    """
    if crop is None:
        rig = runs[0].frames.rig
        crop = CropSpec.for_camera(rig.intrinsics, rig.extrinsics("center"),
                                   spec.input_shape[2], spec.input_shape[1])
    train_idx, val_idx = split_runs(runs, cfg.val_fraction)
    refs = select_frames(runs, selection)
    train_refs = [r for r in refs if r.run in set(train_idx)]
    val_refs = [r for r in refs if r.run in set(val_idx)]
    if not train_refs:
        raise TrainingError("no training frames after the validation split")
    train_stream = SampleStream(runs, train_refs, augment, crop)
    val_stream = SampleStream(runs, val_refs, augment, crop)

    weights = [w.copy() for w in weights] if weights is not None else nn.init_weights(spec, cfg.seed)
    opt = nn.SGD(cfg.lr, cfg.momentum)
    meta = {"train_config": asdict(cfg), "augment": asdict(augment),
            "selection": {**asdict(selection), "cameras": list(selection.cameras)},
            "seed": cfg.seed, "epoch": 0, "loss": None,
            "train_frames": len(train_refs), "val_frames": len(val_refs)}
    best = nn.Checkpoint(spec, [w.copy() for w in weights], dict(meta))
    best_loss = math.inf
    history = []
    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(train_stream))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            x, y = train_stream.batch(order[start:start + cfg.batch_size], rng)
            pred, acts = nn.forward(spec, weights, x)
            loss = nn.mse_loss(pred, y)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}", best)
            grads = nn.backward(spec, weights, acts, nn.mse_loss_grad(pred, y.astype(np.float32)))
            try:
                weights = opt.step(weights, grads)
            except nn.NetworkError as e:
                raise TrainingDiverged(str(e), best) from e
            total += loss * len(y)
            count += len(y)
        train_loss = total / count
        val_loss = _evaluate(spec, weights, val_stream, cfg.seed, cfg.batch_size)
        history.append((epoch, train_loss, val_loss))
        log.info("epoch %d train_mse=%.6g val_mse=%.6g", epoch, train_loss, val_loss)
        score = val_loss if val_stream.refs else train_loss
        if score < best_loss:
            best_loss = score
            best = nn.Checkpoint(spec, [w.copy() for w in weights],
                                 {**meta, "epoch": epoch, "loss": score})
        if on_epoch is not None:
            on_epoch(epoch, train_loss, val_loss, weights)
    return best, history


def fit_arrays(x: np.ndarray, y: np.ndarray, steps: int, lr: float, momentum: float = 0.9,
               spec: nn.NetworkSpec = nn.DEFAULT_SPEC, seed: int = 0, target: float = 0.0):
    """Full-batch SGD on fixed tensors; stops early once the loss reaches ``target``."""
    weights = nn.init_weights(spec, seed)
    opt = nn.SGD(lr, momentum)
    losses = []
    for _ in range(steps):
        pred, acts = nn.forward(spec, weights, x)
        loss = nn.mse_loss(pred, y)
        losses.append(loss)
        if loss < target:
            break
        weights = opt.step(weights, nn.backward(spec, weights, acts,
                                                nn.mse_loss_grad(pred, y.astype(np.float32))))
    return weights, losses
