"""Closed-loop evaluation of a steering policy on recorded runs, and the autonomy score."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import nn
from .camera import CropSpec, network_input
from .geometry import DynamicsConfig, LanePose, VehicleState, step_dynamics
from .roadworld import RunRecord, render_frame

MAX_WARP_ROTATION = 0.3


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    intervention_threshold: float = 1.0
    intervention_penalty: float = 6.0
    dt: float = 0.1
    mode: str = "replay"

    def __post_init__(self):
        if not self.intervention_threshold > 0 or not self.intervention_penalty > 0:
            raise SimulationError("threshold and penalty must be positive")
        if self.mode not in ("replay", "live"):
            raise SimulationError(f"unknown mode {self.mode!r}")


@dataclass
class SimulationTrace:
    time: list = field(default_factory=list)
    off_center: list = field(default_factory=list)
    yaw: list = field(default_factory=list)
    distance: list = field(default_factory=list)
    cnn_command: list = field(default_factory=list)
    human_command: list = field(default_factory=list)
    interventions: list = field(default_factory=list)
    elapsed: float = 0.0
    penalty: float = 6.0

    def __len__(self):
        return len(self.time)

    @property
    def max_abs_offset(self) -> float:
        return float(np.max(np.abs(self.off_center))) if self.off_center else 0.0

    def summary(self) -> dict:
        return {"interventions": len(self.interventions), "elapsed_s": self.elapsed,
                "autonomy_pct": autonomy(self), "max_abs_offset_m": self.max_abs_offset}


def autonomy_score(interventions: int, elapsed: float, penalty: float = 6.0) -> float:
    """Percent of time driven without help; each intervention costs ``penalty`` seconds."""
    if not elapsed > 0:
        raise SimulationError("elapsed time must be positive")
    return max(0.0, (1.0 - interventions * penalty / elapsed) * 100.0)


def autonomy(trace: SimulationTrace) -> float:
    return autonomy_score(len(trace.interventions), trace.elapsed, trace.penalty)


@dataclass(frozen=True)
class StepContext:
    tick: int
    time: float
    pose: LanePose
    truth: LanePose
    road_curvature: float
    speed: float


Policy = Callable[[np.ndarray, StepContext], float]


def network_policy(ckpt: nn.Checkpoint) -> Policy:
    def policy(image, ctx):
        return float(nn.predict(ckpt.spec, ckpt.weights, image.astype(np.float32)))
    policy.spec = ckpt.spec
    return policy


def oracle_policy(image, ctx: StepContext) -> float:
    return ctx.road_curvature


def closed_loop_run(net, run: RunRecord, cfg: SimConfig = SimConfig(),
                    dynamics: DynamicsConfig | None = None, crop: CropSpec | None = None,
                    needs_image: bool = True) -> SimulationTrace:
    """Drive ``run`` with the policy in the loop.

    Each tick: reset to ground truth when off by more than the threshold, log
    the pose, synthesize the camera view for the simulated pose, query the
    policy and integrate the dynamics with its command.
    """
    policy = network_policy(net) if isinstance(net, nn.Checkpoint) else net
    spec = getattr(policy, "spec", None)
    if dynamics is None:
        dynamics = DynamicsConfig(cfg.dt, run.speed)
    rig = run.frames.rig
    intr, extr = rig.intrinsics, rig.extrinsics("center")
    if crop is None:
        shape = spec.input_shape if spec is not None else (3, 66, 200)
        crop = CropSpec.for_camera(intr, extr, shape[2], shape[1])
    if spec is not None and (3, crop.out_height, crop.out_width) != tuple(spec.input_shape):
        raise SimulationError(f"network expects {spec.input_shape}, crop gives "
                              f"{(3, crop.out_height, crop.out_width)}")
    geom = run.frames.geom if cfg.mode == "live" else None

    trace = SimulationTrace(penalty=cfg.intervention_penalty)
    pose = run.pose(0)
    travelled = 0.0
    for i in range(len(run)):
        truth = run.pose(i)
        pose = LanePose(truth.station, pose.offset, pose.heading_err)
        t = i * dynamics.dt
        if abs(pose.offset) > cfg.intervention_threshold:
            # the logged row already shows the reset pose
            trace.interventions.append(t)
            pose = truth
        trace.time.append(t)
        trace.off_center.append(pose.offset)
        trace.yaw.append(pose.heading_err)
        trace.distance.append(travelled)
        kappa = float(run.curvatures[i])
        image = None
        if needs_image:
            if cfg.mode == "replay":
                shift = pose.offset - truth.offset
                rot = float(np.clip(pose.heading_err - truth.heading_err,
                                    -MAX_WARP_ROTATION, MAX_WARP_ROTATION))
                image = network_input(run.frame(i, "center"), intr, extr, crop, shift, rot)
            else:
                frame = render_frame(geom, geom.world_pose(pose), intr, extr, run.frames.opts)
                image = network_input(frame, intr, extr, crop)
        ctx = StepContext(i, t, pose, truth, kappa, run.speed)
        cmd = float(policy(image, ctx))
        trace.cnn_command.append(cmd)
        trace.human_command.append(float(run.commands[i]))
        state = step_dynamics(VehicleState(pose, run.speed), cmd, kappa, dynamics)
        pose = state.pose
        travelled += run.speed * dynamics.dt
    trace.elapsed = len(run) * dynamics.dt
    return trace
