"""Pinhole camera, flat-ground homography, viewpoint warping and input preprocessing.

Frames are planar ``(3, H, W)`` uint8 arrays. Pixel ``(col, row)`` has its
center at ``(col + 0.5, row + 0.5)``.

Vehicle frame: X forward, Y right, ground at Z = 0. Camera coordinates are
x right, y down, z along the optical axis. Positive yaw turns the camera to
the right, positive pitch tilts it up.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

UNKNOWN_COLOR = (0, 255, 0)
CAMERA_IDS = ("left", "center", "right")


class ImagingError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    width: int = 640
    height: int = 480
    focal: float = 500.0
    principal_point: tuple = (320.0, 240.0)

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0 or self.focal <= 0:
            raise ImagingError("intrinsics must be positive")
        cx, cy = self.principal_point
        if not (0 <= cx <= self.width and 0 <= cy <= self.height):
            raise ImagingError("principal point outside the image")

    @property
    def K(self) -> np.ndarray:
        cx, cy = self.principal_point
        return np.array([[self.focal, 0.0, cx], [0.0, self.focal, cy], [0.0, 0.0, 1.0]])

    def scaled(self, factor: float) -> "CameraIntrinsics":
        cx, cy = self.principal_point
        return CameraIntrinsics(int(round(self.width * factor)), int(round(self.height * factor)),
                                self.focal * factor, (cx * factor, cy * factor))


@dataclass(frozen=True)
class CameraExtrinsics:
    height_above_ground: float = 1.4
    lateral_offset: float = 0.0
    yaw: float = 0.0
    pitch: float = -math.radians(1.5)

    def __post_init__(self):
        if not self.height_above_ground > 0:
            raise ImagingError("camera must be above the ground")

    def moved(self, shift: float, rotation: float) -> "CameraExtrinsics":
        return replace(self, lateral_offset=self.lateral_offset + shift, yaw=self.yaw + rotation)


@dataclass
class Frame:
    pixels: np.ndarray
    colorspace: str = "RGB"
    camera_id: str = "center"
    timestamp: float = 0.0

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3 or self.pixels.dtype != np.uint8:
            raise ImagingError(f"expected planar (3, H, W) uint8 pixels, got "
                               f"{self.pixels.dtype} {self.pixels.shape}")
        if self.colorspace not in ("RGB", "YUV"):
            raise ImagingError(f"unknown colorspace {self.colorspace!r}")

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class CameraRig:
    """Intrinsics shared by all cameras plus one extrinsic per camera id."""
    intrinsics: CameraIntrinsics = field(default_factory=CameraIntrinsics)
    cameras: tuple = (
        ("left", CameraExtrinsics(lateral_offset=-0.6)),
        ("center", CameraExtrinsics()),
        ("right", CameraExtrinsics(lateral_offset=0.6)),
    )

    def extrinsics(self, camera_id: str) -> CameraExtrinsics:
        for cid, extr in self.cameras:
            if cid == camera_id:
                return extr
        raise ImagingError(f"rig has no camera {camera_id!r}")

    @property
    def camera_ids(self) -> tuple:
        return tuple(cid for cid, _ in self.cameras)


def _rotation(extr: CameraExtrinsics) -> np.ndarray:
    """Rotation taking vehicle-frame directions (X fwd, Y right, Z up) to camera coords."""
    cy_, sy_ = math.cos(extr.yaw), math.sin(extr.yaw)
    cp, sp = math.cos(extr.pitch), math.sin(extr.pitch)
    # vehicle -> level camera (x right, y down, z forward), yawed
    level = np.array([[-sy_, cy_, 0.0],
                      [0.0, 0.0, -1.0],
                      [cy_, sy_, 0.0]])
    tilt = np.array([[1.0, 0.0, 0.0],
                     [0.0, cp, sp],
                     [0.0, -sp, cp]])
    return tilt @ level


def ground_homography(intr: CameraIntrinsics, extr: CameraExtrinsics) -> np.ndarray:
    """3x3 map from ground points (X fwd, Y right, 1) in meters to homogeneous pixels."""
    R = _rotation(extr)
    C = np.array([0.0, extr.lateral_offset, extr.height_above_ground])
    # p_cam = R @ (P - C) with P = (X, Y, 0)
    M = np.column_stack([R[:, 0], R[:, 1], -R @ C])
    return intr.K @ M


def horizon_row(intr: CameraIntrinsics, extr: CameraExtrinsics) -> float:
    """Image v-coordinate of the horizon (independent of yaw, no roll)."""
    return intr.principal_point[1] + intr.focal * math.tan(extr.pitch)


def first_ground_row(intr: CameraIntrinsics, extr: CameraExtrinsics) -> int:
    """Index of the first pixel row whose center lies strictly below the horizon."""
    return max(0, int(math.floor(horizon_row(intr, extr) - 0.5)) + 1)


def project_ground(H: np.ndarray, X: np.ndarray, Y: np.ndarray):
    p = H @ np.stack([X, Y, np.ones_like(X)])
    return p[0] / p[2], p[1] / p[2], p[2]


def unproject_ground(H: np.ndarray, u: np.ndarray, v: np.ndarray):
    g = np.linalg.inv(H) @ np.stack([u, v, np.ones_like(u)])
    return g[0] / g[2], g[1] / g[2]


def _check_rgb(frame: Frame):
    if frame.colorspace != "RGB":
        raise ImagingError(f"expected an RGB frame, got {frame.colorspace}")


def round_to_u8(x: np.ndarray) -> np.ndarray:
    """Round half away from zero and saturate to the byte range."""
    r = np.floor(np.abs(x) + 0.5)
    np.copysign(r, x, out=r)
    return np.clip(r, 0, 255, out=r).astype(np.uint8)


def _bilinear(planes: np.ndarray, xs: np.ndarray, ys: np.ndarray, row_lo, row_hi) -> np.ndarray:
    """Sample planar image at continuous coords, taps clamped to [row_lo, row_hi]."""
    _, H, W = planes.shape
    fx = xs - 0.5
    fy = ys - 0.5
    x0 = np.floor(fx)
    y0 = np.floor(fy)
    ax = fx - x0
    ay = fy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    x1 = np.minimum(np.maximum(x0 + 1, 0), W - 1)
    x0 = np.minimum(np.maximum(x0, 0), W - 1)
    y1 = np.minimum(np.maximum(y0 + 1, row_lo), row_hi) * W
    y0 = np.minimum(np.maximum(y0, row_lo), row_hi) * W
    flat = planes.reshape(3, -1)

    def tap(idx):
        return np.take(flat, idx, axis=1).astype(np.float64)

    top = tap(y0 + x0) * (1 - ax) + tap(y0 + x1) * ax
    bot = tap(y1 + x0) * (1 - ax) + tap(y1 + x1) * ax
    return top * (1 - ay) + bot * ay


def warp_rows(frame: Frame, intr: CameraIntrinsics, extr: CameraExtrinsics, shift: float,
              rotation: float, row_start: int, row_stop: int) -> np.ndarray:
    """Rows ``[row_start, row_stop)`` of the viewpoint-transformed image as (3, n, W) uint8.

    Ground rows go through the flat-ground homographies of the two camera
    poses; sky rows through the pure-rotation homography, so the shift has
    no effect on them.
    """
    W, H = intr.width, intr.height
    new = extr.moved(shift, rotation)
    g0 = first_ground_row(intr, extr)
    rows = np.arange(row_start, row_stop)
    cols = np.arange(W)
    vv, uu = np.meshgrid(rows + 0.5, cols + 0.5, indexing="ij")
    xs = np.empty_like(uu)
    ys = np.empty_like(vv)
    valid = np.ones(uu.shape, dtype=bool)
    ground = vv > horizon_row(intr, extr)

    if ground.any():
        u, v = uu[ground], vv[ground]
        Gx, Gy = unproject_ground(ground_homography(intr, new), u, v)
        su, sv, depth = project_ground(ground_homography(intr, extr), Gx, Gy)
        xs[ground], ys[ground] = su, sv
        valid[ground] = depth > 0
    sky = ~ground
    if sky.any():
        K = intr.K
        Hinf = K @ _rotation(extr) @ _rotation(new).T @ np.linalg.inv(K)
        p = Hinf @ np.stack([uu[sky], vv[sky], np.ones(int(sky.sum()))])
        xs[sky], ys[sky] = p[0] / p[2], p[1] / p[2]
        valid[sky] = p[2] > 0

    valid &= (xs >= 0) & (xs <= W) & (ys >= 0) & (ys <= H)
    lo = np.where(ground, g0, 0)
    hi = np.where(ground, H - 1, max(g0 - 1, 0))
    xs = np.where(valid, xs, 0.5)
    ys = np.where(valid, ys, 0.5)
    out = round_to_u8(_bilinear(frame.pixels, xs, ys, lo, hi))
    for c in range(3):
        out[c][~valid] = UNKNOWN_COLOR[c]
    return out


def viewpoint_transform(frame: Frame, intr: CameraIntrinsics, extr: CameraExtrinsics,
                        shift: float, rotation: float) -> Frame:
    """Synthesize the view from the camera moved right by ``shift`` m and yawed by ``rotation``."""
    _check_rgb(frame)
    if abs(shift) > 2.0 or abs(rotation) > 0.3:
        raise ImagingError(f"viewpoint change out of range: shift={shift}, rotation={rotation}")
    if frame.pixels.shape[1:] != (intr.height, intr.width):
        raise ImagingError("frame size does not match intrinsics")
    px = warp_rows(frame, intr, extr, shift, rotation, 0, intr.height)
    return Frame(px, "RGB", frame.camera_id, frame.timestamp)


# BT.601 full range, offsets applied to chroma
_YUV = np.array([[0.299, 0.587, 0.114],
                 [-0.168736, -0.331264, 0.5],
                 [0.5, -0.418688, -0.081312]])


def rgb_to_yuv_planes(rgb: np.ndarray) -> np.ndarray:
    flat = rgb.reshape(3, -1).astype(np.float64)
    yuv = _YUV @ flat
    yuv[1:] += 128.0
    return round_to_u8(yuv).reshape(rgb.shape)


def rgb_to_yuv(frame: Frame) -> Frame:
    _check_rgb(frame)
    return Frame(rgb_to_yuv_planes(frame.pixels), "YUV", frame.camera_id, frame.timestamp)


@dataclass(frozen=True)
class CropSpec:
    left: int
    top: int
    width: int
    height: int
    out_width: int = 200
    out_height: int = 66

    @classmethod
    def for_camera(cls, intr: CameraIntrinsics, extr: CameraExtrinsics | None = None,
                   out_width: int = 200, out_height: int = 66) -> "CropSpec":
        """Full-width band starting just below the horizon with the network's aspect ratio."""
        extr = extr or CameraExtrinsics()
        top = first_ground_row(intr, extr) + max(1, int(round(intr.height / 80)))
        height = int(round(intr.width * out_height / out_width))
        height = min(height, intr.height - top)
        return cls(0, top, intr.width, height, out_width, out_height)


def _resize_bilinear(planes: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    _, h, w = planes.shape
    if (h, w) == (out_h, out_w):
        # half-pixel centers land exactly on source pixels
        return planes.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h)
    xs = (np.arange(out_w) + 0.5) * (w / out_w)
    Y, X = np.meshgrid(ys, xs, indexing="ij")
    return round_to_u8(_bilinear(planes, X, Y, np.zeros_like(Y, dtype=np.int64),
                                 np.full_like(Y, h - 1, dtype=np.int64)))


def crop_planes(planes: np.ndarray, crop: CropSpec) -> np.ndarray:
    _, H, W = planes.shape
    if crop.left < 0 or crop.top < 0 or crop.left + crop.width > W or crop.top + crop.height > H:
        raise ImagingError(f"crop {crop} outside a {W}x{H} frame")
    band = planes[:, crop.top:crop.top + crop.height, crop.left:crop.left + crop.width]
    return _resize_bilinear(band, crop.out_height, crop.out_width)


def crop_scale_to_input(frame: Frame, crop: CropSpec | None = None) -> Frame:
    if crop is None:
        crop = CropSpec.for_camera(CameraIntrinsics(frame.width, frame.height,
                                                    500.0 * frame.width / 640,
                                                    (frame.width / 2, frame.height / 2)))
    return Frame(crop_planes(frame.pixels, crop), frame.colorspace, frame.camera_id,
                 frame.timestamp)


def network_input(frame: Frame, intr: CameraIntrinsics, extr: CameraExtrinsics, crop: CropSpec,
                  shift: float = 0.0, rotation: float = 0.0) -> np.ndarray:
    """Warp, convert to YUV and crop in one pass, touching only the cropped rows.

    Output equals ``crop_scale_to_input(rgb_to_yuv(viewpoint_transform(...)))``
    byte for byte.
    """
    _check_rgb(frame)
    if abs(shift) > 2.0 or abs(rotation) > 0.3:
        raise ImagingError(f"viewpoint change out of range: shift={shift}, rotation={rotation}")
    if shift == 0.0 and rotation == 0.0:
        rows = frame.pixels[:, crop.top:crop.top + crop.height]
    else:
        rows = warp_rows(frame, intr, extr, shift, rotation, crop.top, crop.top + crop.height)
    yuv = rgb_to_yuv_planes(rows)
    shifted = replace(crop, top=0)
    return crop_planes(yuv, shifted)
