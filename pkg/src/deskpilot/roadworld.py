"""Procedural flat-world roads, a ray-cast renderer and the simulated data-collection car.

World frame: x, y in meters with y to the right of x, so heading increases
clockwise and positive curvature turns right, matching ``geometry``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_discrete_lyapunov

from .camera import CameraExtrinsics, CameraIntrinsics, CameraRig, Frame, first_ground_row, round_to_u8
from .geometry import (DynamicsConfig, LanePose, VehicleState, recovery_label, step_dynamics,
                       LOOKAHEAD_TIME)

MIN_RADIUS = 10.0
VIEW_MARGIN = 80.0  # runs stop this far before the end so the view never runs off the map
FOG_START, FOG_END = 35.0, 70.0
SHOULDER = 0.8
MARK_WIDTH = 0.15
DASH_ON, DASH_PERIOD = 3.0, 9.0

PAVED = np.array([96.0, 96.0, 100.0])
UNPAVED = np.array([150.0, 118.0, 80.0])
GRASS = np.array([70.0, 110.0, 50.0])
MARKING = np.array([235.0, 235.0, 228.0])
FOG = np.array([175.0, 190.0, 205.0])
SKY_TOP = np.array([105.0, 145.0, 210.0])


class TrackError(ValueError):
    pass


@dataclass(frozen=True)
class Straight:
    length: float

    def __post_init__(self):
        if not self.length > 0:
            raise TrackError(f"straight length must be positive, got {self.length}")

    @property
    def arc_length(self) -> float:
        return self.length

    curvature = 0.0


@dataclass(frozen=True)
class Arc:
    radius: float
    angle: float

    def __post_init__(self):
        if abs(self.radius) < MIN_RADIUS:
            raise TrackError(f"arc radius {self.radius} below the {MIN_RADIUS} m minimum")
        if not 0 < self.angle < 2 * math.pi:
            raise TrackError(f"arc angle must be in (0, 2pi), got {self.angle}")

    @property
    def arc_length(self) -> float:
        return abs(self.radius) * self.angle

    @property
    def curvature(self) -> float:
        return 1.0 / self.radius


@dataclass(frozen=True)
class TrackSpec:
    segments: tuple
    lane_width: float = 3.6
    marking_style: str = "dashed"
    surface_style: str = "paved"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        if not self.segments:
            raise TrackError("track needs at least one segment")
        if self.marking_style not in ("solid", "dashed", "none"):
            raise TrackError(f"unknown marking_style {self.marking_style!r}")
        if self.surface_style not in ("paved", "unpaved"):
            raise TrackError(f"unknown surface_style {self.surface_style!r}")
        if not self.lane_width > 0:
            raise TrackError("lane_width must be positive")

    @property
    def total_length(self) -> float:
        return float(sum(s.arc_length for s in self.segments))

    def geometry(self) -> "TrackGeometry":
        return TrackGeometry(self)


def random_track(seed: int, length: float = 1000.0, min_radius: float = 40.0,
                 max_radius: float = 200.0, **style) -> TrackSpec:
    """Alternating straights and arcs of random length, radius and direction."""
    rng = np.random.default_rng(seed)
    segs = [Straight(60.0)]
    total = 60.0
    while total < length + VIEW_MARGIN:
        if len(segs) % 2 == 0:
            seg = Straight(float(np.round(rng.uniform(30.0, 150.0), 3)))
        else:
            r = float(np.round(rng.uniform(min_radius, max_radius), 3))
            sign = 1.0 if rng.random() < 0.5 else -1.0
            ang = float(np.round(rng.uniform(0.3, min(1.6, 250.0 / r)), 4))
            seg = Arc(sign * r, ang)
        segs.append(seg)
        total += seg.arc_length
    segs.append(Straight(VIEW_MARGIN + 20.0))
    return TrackSpec(tuple(segs), seed=seed, **style)


def _right(heading):
    return -np.sin(heading), np.cos(heading)


class TrackGeometry:
    """Precomputed segment start states for fast centerline and projection queries."""

    def __init__(self, track: TrackSpec):
        self.track = track
        x, y, h, s = 0.0, 0.0, 0.0, 0.0
        self.starts = []
        for seg in track.segments:
            self.starts.append((s, x, y, h))
            x, y, h = self._advance(seg, x, y, h, seg.arc_length)
            s += seg.arc_length
        self.total_length = s

    @staticmethod
    def _advance(seg, x, y, h, ds):
        if isinstance(seg, Straight):
            return x + ds * math.cos(h), y + ds * math.sin(h), h
        k = seg.curvature
        h1 = h + k * ds
        return x + (math.sin(h1) - math.sin(h)) / k, y + (math.cos(h) - math.cos(h1)) / k, h1

    def segment_index(self, station: float) -> int:
        if not 0.0 <= station <= self.total_length:
            raise TrackError(f"station {station} outside [0, {self.total_length}]")
        for i in range(len(self.starts) - 1, -1, -1):
            if station >= self.starts[i][0]:
                return i
        return 0

    def centerline(self, station: float):
        i = self.segment_index(station)
        s0, x, y, h = self.starts[i]
        seg = self.track.segments[i]
        x, y, h = self._advance(seg, x, y, h, station - s0)
        return (x, y), h, float(seg.curvature)

    def curvature(self, station: float) -> float:
        return float(self.track.segments[self.segment_index(station)].curvature)

    def world_pose(self, pose: LanePose, lateral: float = 0.0) -> "WorldPose":
        (x, y), h, _ = self.centerline(pose.station)
        rx, ry = _right(h)
        d = pose.offset + lateral
        return WorldPose(x + d * rx, y + d * ry, h + pose.heading_err)

    def project(self, px: np.ndarray, py: np.ndarray, s_lo: float = -np.inf, s_hi: float = np.inf):
        """Lane coordinates (station, offset) of world points; NaN where no segment claims them."""
        best_n = np.full(px.shape, np.inf)
        best_s = np.full(px.shape, np.nan)
        for seg, (s0, x0, y0, h0) in zip(self.track.segments, self.starts):
            if s0 > s_hi or s0 + seg.arc_length < s_lo:
                continue
            dx, dy = px - x0, py - y0
            if isinstance(seg, Straight):
                along = dx * math.cos(h0) + dy * math.sin(h0)
                n = -dx * math.sin(h0) + dy * math.cos(h0)
                ok = (along >= 0) & (along <= seg.length)
            else:
                R = seg.radius
                sr = math.copysign(1.0, R)
                rx, ry = _right(h0)
                cx, cy = x0 + R * rx, y0 + R * ry
                ux, uy = px - cx, py - cy
                rho = np.hypot(ux, uy)
                n = sr * (abs(R) - rho)
                theta = np.arctan2(sr * ux, -sr * uy)
                delta = np.mod(theta - h0 + math.pi, 2 * math.pi) - math.pi
                along = R * delta
                along = np.where(along < 0, along + abs(R) * 2 * math.pi, along)
                ok = (along <= seg.arc_length) & (rho > 0)
            better = ok & (np.abs(n) < np.abs(best_n))
            best_n = np.where(better, n, best_n)
            best_s = np.where(better, s0 + along, best_s)
        return best_s, best_n

    def station_of(self, x: float, y: float) -> float:
        s, _ = self.project(np.array([x]), np.array([y]))
        return float(s[0])


def centerline(track: TrackSpec, station: float):
    """Position, tangent heading and curvature of the centerline at ``station``."""
    return track.geometry().centerline(station)


@dataclass(frozen=True)
class WorldPose:
    x: float
    y: float
    heading: float


def _hash01(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    h = (ix.astype(np.int64) * 73856093) ^ (iy.astype(np.int64) * 19349663) ^ (seed * 83492791 + 1)
    h = h.astype(np.uint64) & np.uint64(0xFFFFFFFF)
    h ^= h >> np.uint64(16)
    h = (h * np.uint64(0x45D9F3B)) & np.uint64(0xFFFFFFFF)
    h ^= h >> np.uint64(16)
    h = (h * np.uint64(0x45D9F3B)) & np.uint64(0xFFFFFFFF)
    h ^= h >> np.uint64(16)
    return h.astype(np.float64) / 4294967295.0


def value_noise(x: np.ndarray, y: np.ndarray, cell: float, seed: int) -> np.ndarray:
    """Smooth lattice noise in [-1, 1] with the given cell size in meters."""
    gx, gy = x / cell, y / cell
    ix, iy = np.floor(gx), np.floor(gy)
    fx, fy = gx - ix, gy - iy
    fx = fx * fx * (3 - 2 * fx)
    fy = fy * fy * (3 - 2 * fy)
    a = _hash01(ix, iy, seed)
    b = _hash01(ix + 1, iy, seed)
    c = _hash01(ix, iy + 1, seed)
    d = _hash01(ix + 1, iy + 1, seed)
    top = a + (b - a) * fx
    bot = c + (d - c) * fx
    return 2.0 * (top + (bot - top) * fy) - 1.0


def _box_coverage(x, w, a, b):
    """Fraction of the window [x - w/2, x + w/2] covered by [a, b]."""
    return np.clip(np.minimum(x + w / 2, b) - np.maximum(x - w / 2, a), 0.0, None) / w


def _smoothstep(x, e0, e1):
    t = np.clip((x - e0) / (e1 - e0), 0.0, 1.0)
    return t * t * (3 - 2 * t)


@dataclass(frozen=True)
class RenderOptions:
    noise: bool = True
    noise_amplitude: float = 1.0


def _ground_color(geom: TrackGeometry, px, py, dist, foot_lat, foot_lon, opts: RenderOptions,
                  s_lo: float, s_hi: float):
    track = geom.track
    s, n = geom.project(px, py, s_lo, s_hi)
    off_map = np.isnan(s)
    s = np.where(off_map, 0.0, s)
    n = np.where(off_map, 1e6, n)
    an = np.abs(n)
    half = track.lane_width / 2
    road_half = half + SHOULDER
    road_cov = _box_coverage(an, foot_lat, -1e9, road_half)

    base_road = PAVED if track.surface_style == "paved" else UNPAVED
    col_road = np.broadcast_to(base_road[:, None], (3, px.size)).copy()
    col_off = np.broadcast_to(GRASS[:, None], (3, px.size)).copy()
    if opts.noise and opts.noise_amplitude > 0:
        seed = track.seed
        n1 = value_noise(px, py, 1.5, seed) * np.clip(1.0 - foot_lon / 1.5, 0.0, 1.0)
        n2 = value_noise(px, py, 0.4, seed + 7) * np.clip(1.0 - foot_lon / 0.4, 0.0, 1.0)
        tex = opts.noise_amplitude * (0.65 * n1 + 0.35 * n2)
        amp_road = 14.0 if track.surface_style == "paved" else 22.0
        col_road += amp_road * tex
        col_off += 20.0 * tex * np.array([0.8, 1.0, 0.6])[:, None]
    col = col_off + (col_road - col_off) * road_cov

    if track.marking_style != "none":
        lat = _box_coverage(an, foot_lat, half - MARK_WIDTH / 2, half + MARK_WIDTH / 2)
        if track.marking_style == "dashed":
            phase = np.mod(s, DASH_PERIOD)
            w = np.minimum(foot_lon, DASH_PERIOD / 2)
            lon = (_box_coverage(phase, w, 0.0, DASH_ON)
                   + _box_coverage(phase, w, DASH_PERIOD, DASH_PERIOD + DASH_ON)
                   + _box_coverage(phase, w, -DASH_PERIOD, -DASH_PERIOD + DASH_ON))
            lat = lat * np.clip(lon, 0.0, 1.0)
        col = col + (MARKING[:, None] - col) * lat

    fog = _smoothstep(dist, FOG_START, FOG_END)
    return col + (FOG[:, None] - col) * fog


def render_frame(track: TrackSpec | TrackGeometry, pose: WorldPose, intr: CameraIntrinsics,
                 extr: CameraExtrinsics, opts: RenderOptions = RenderOptions(),
                 camera_id: str = "center", timestamp: float = 0.0) -> Frame:
    """Ray-cast every pixel onto the flat ground (or the sky) and shade it."""
    geom = track if isinstance(track, TrackGeometry) else track.geometry()
    W, H = intr.width, intr.height
    cx, cy = intr.principal_point
    f = intr.focal
    g0 = first_ground_row(intr, extr)
    out = np.empty((3, H, W))

    from .camera import _rotation
    Rt = _rotation(extr).T
    us = (np.arange(W) + 0.5 - cx) / f

    if g0 > 0:
        vs = (np.arange(g0) + 0.5 - cy) / f
        V, U = np.meshgrid(vs, us, indexing="ij")
        d = np.tensordot(Rt, np.stack([U, V, np.ones_like(U)]), axes=1)
        elev = np.arctan2(d[2], np.hypot(d[0], d[1]))
        t = _smoothstep(elev, 0.0, 0.5)[None]
        out[:, :g0] = FOG[:, None, None] + (SKY_TOP - FOG)[:, None, None] * t

    if g0 < H:
        vs = (np.arange(g0, H) + 0.5 - cy) / f
        V, U = np.meshgrid(vs, us, indexing="ij")
        d = np.tensordot(Rt, np.stack([U, V, np.ones_like(U)]), axes=1)
        hcam = extr.height_above_ground
        t = hcam / -d[2]
        X = t * d[0]
        Y = extr.lateral_offset + t * d[1]
        dist = t * np.hypot(d[0], d[1])
        col = np.empty((3,) + X.shape)
        col[:] = FOG[:, None, None]
        near = dist < FOG_END
        if near.any():
            ch, sh = math.cos(pose.heading), math.sin(pose.heading)
            Xn, Yn, dn = X[near], Y[near], dist[near]
            px = pose.x + Xn * ch - Yn * sh
            py = pose.y + Xn * sh + Yn * ch
            foot_lat = np.maximum(dn / f, 1e-3)
            foot_lon = np.maximum(dn * dn / (f * hcam), 1e-3)
            s_cam = geom.station_of(pose.x, pose.y)
            if np.isnan(s_cam):
                s_lo, s_hi = -np.inf, np.inf
            else:
                s_lo, s_hi = s_cam - 2 * FOG_END, s_cam + 3 * FOG_END
            col[:, near] = _ground_color(geom, px, py, dn, foot_lat, foot_lon, opts, s_lo, s_hi)
        out[:, g0:] = col
    return Frame(round_to_u8(out), "RGB", camera_id, timestamp)


# ---------------------------------------------------------------------------
# data collection


@dataclass(frozen=True)
class IdealDriver:
    pass


@dataclass(frozen=True)
class NoisyDriver:
    """Recovery-label driver with colored command noise and a wandering aim point.

    Both disturbances are first-order low-pass filtered white noise. Their
    amplitudes are solved from the stationary covariance of the linearised
    closed loop so the offset and heading spread hit ``sigma_offset`` and
    ``sigma_heading``.
    """
    sigma_offset: float = 0.15
    sigma_heading: float = 0.01
    seed: int = 0
    tau_command: float = 1.0
    tau_aim: float = 4.0


def _noise_gains(driver: NoisyDriver, cfg: DynamicsConfig):
    v, dt = cfg.speed, cfg.dt
    L = v * LOOKAHEAD_TIME
    gd, gp = 2.0 / L ** 2, 2.0 / L
    ac, ad = math.exp(-dt / driver.tau_command), math.exp(-dt / driver.tau_aim)

    def stationary(amp_c, amp_d):
        # state: psi, d, n_c, n_d (unit-variance noise states)
        A = np.zeros((4, 4))
        A[0] = [1 - v * dt * gp, -v * dt * gd, v * dt * amp_c, v * dt * gd * amp_d]
        A[1] = v * dt * A[0]
        A[1, 1] += 1.0
        A[2, 2], A[3, 3] = ac, ad
        B = np.zeros((4, 2))
        B[2, 0] = math.sqrt(1 - ac * ac)
        B[3, 1] = math.sqrt(1 - ad * ad)
        P = solve_discrete_lyapunov(A, B @ B.T)
        return P[1, 1], P[0, 0]

    vd_c, vp_c = stationary(1.0, 0.0)
    vd_d, vp_d = stationary(0.0, 1.0)
    M = np.array([[vd_c, vd_d], [vp_c, vp_d]])
    sq = np.linalg.solve(M, [driver.sigma_offset ** 2, driver.sigma_heading ** 2])
    if (sq < 0).any():
        raise TrackError(f"no noise mix gives sigma_offset={driver.sigma_offset}, "
                         f"sigma_heading={driver.sigma_heading} at {v} m/s")
    return math.sqrt(sq[0]), math.sqrt(sq[1]), ac, ad


@dataclass
class RunRecord:
    run_id: str
    track: TrackSpec
    speed: float
    tick_rate: float
    times: np.ndarray
    commands: np.ndarray
    stations: np.ndarray
    offsets: np.ndarray
    headings: np.ndarray
    curvatures: np.ndarray
    frames: "FrameSource"
    activity_label: str = "lane_keeping"
    sigma_offset: float = 0.0
    sigma_heading: float = 0.0

    def __post_init__(self):
        n = len(self.times)
        for name in ("commands", "stations", "offsets", "headings", "curvatures"):
            if len(getattr(self, name)) != n:
                raise TrackError(f"{name} length differs from times")
        if n > 1 and not np.all(np.diff(self.times) > 0):
            raise TrackError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.times)

    def pose(self, i: int) -> LanePose:
        return LanePose(float(self.stations[i]), float(self.offsets[i]), float(self.headings[i]))

    def frame(self, i: int, camera_id: str = "center") -> Frame:
        return self.frames.load(i, camera_id)


class FrameSource:
    rig: CameraRig

    def load(self, tick: int, camera_id: str) -> Frame:
        raise NotImplementedError


class RenderedFrames(FrameSource):
    """Frames rendered on demand from the exact ground-truth poses."""

    def __init__(self, track: TrackSpec, rig: CameraRig, stations, offsets, headings, times,
                 opts: RenderOptions = RenderOptions(), cache: bool = False):
        self.geom = track.geometry()
        self.rig = rig
        self.stations, self.offsets, self.headings, self.times = stations, offsets, headings, times
        self.opts = opts
        self._cache = {} if cache else None

    def load(self, tick: int, camera_id: str) -> Frame:
        key = (tick, camera_id)
        if self._cache is not None and key in self._cache:
            return self._cache[key]
        extr = self.rig.extrinsics(camera_id)
        pose = self.geom.world_pose(LanePose(float(self.stations[tick]), float(self.offsets[tick]),
                                             float(self.headings[tick])))
        frame = render_frame(self.geom, pose, self.rig.intrinsics, extr, self.opts, camera_id,
                             float(self.times[tick]))
        if self._cache is not None:
            self._cache[key] = frame
        return frame


def collect_run(track: TrackSpec, driver: IdealDriver | NoisyDriver, cfg: DynamicsConfig,
                rig: CameraRig = CameraRig(), run_id: str = "run", length: float | None = None,
                activity_label: str = "lane_keeping", opts: RenderOptions = RenderOptions(),
                cache_frames: bool = False) -> RunRecord:
    """Drive the track with a simulated human and log commands and exact poses.

    Frames are rendered lazily from the logged poses; persist them with
    ``io.save_dataset`` to get files on disk.
    """
    geom = track.geometry()
    stop = geom.total_length - VIEW_MARGIN if length is None else min(length, geom.total_length - VIEW_MARGIN)
    if stop <= 0:
        raise TrackError("track too short to drive")
    state = VehicleState(LanePose(0.0, 0.0, 0.0), cfg.speed)
    noisy = isinstance(driver, NoisyDriver)
    if noisy:
        amp_c, amp_d, ac, ad = _noise_gains(driver, cfg)
        bc, bd = math.sqrt(1 - ac * ac), math.sqrt(1 - ad * ad)
        rng = np.random.default_rng(driver.seed)
        nc = nd = 0.0

    times, cmds, st, off, hd, curv = [], [], [], [], [], []
    i = 0
    while state.pose.station <= stop:
        p = state.pose
        kappa = geom.curvature(p.station)
        if noisy:
            cmd = recovery_label(p.offset - amp_d * nd, p.heading_err, cfg.speed, kappa).inv_radius
            cmd += amp_c * nc
        else:
            cmd = recovery_label(p.offset, p.heading_err, cfg.speed, kappa).inv_radius
        times.append(i * cfg.dt)
        cmds.append(cmd)
        st.append(p.station)
        off.append(p.offset)
        hd.append(p.heading_err)
        curv.append(kappa)
        state = step_dynamics(state, cmd, kappa, cfg)
        if noisy:
            w = rng.standard_normal(2)
            nc = float(np.clip(ac * nc + bc * w[0], -3.0, 3.0))
            nd = float(np.clip(ad * nd + bd * w[1], -3.0, 3.0))
        i += 1

    arrays = [np.asarray(a, dtype=np.float64) for a in (times, cmds, st, off, hd, curv)]
    frames = RenderedFrames(track, rig, arrays[2], arrays[3], arrays[4], arrays[0], opts,
                            cache=cache_frames)
    rec = RunRecord(run_id, track, cfg.speed, 1.0 / cfg.dt, *arrays, frames=frames,
                    activity_label=activity_label)
    rec.sigma_offset = float(np.std(rec.offsets))
    rec.sigma_heading = float(np.std(rec.headings))
    return rec
