"""Feature-map grids, the marking-contrast permutation test, and simple plots."""
from __future__ import annotations

import math

import numpy as np

from . import nn
from .camera import CameraExtrinsics, CameraIntrinsics, CropSpec, unproject_ground, ground_homography
from .roadworld import FOG_START, MARK_WIDTH, SHOULDER, TrackGeometry, WorldPose


def normalize_channels(maps: np.ndarray) -> np.ndarray:
    """Per-channel min-max to [0, 1]; constant channels map to 0."""
    lo = maps.min(axis=(1, 2), keepdims=True)
    span = maps.max(axis=(1, 2), keepdims=True) - lo
    return np.where(span > 0, (maps - lo) / np.where(span > 0, span, 1), 0.0)


def tile(maps: np.ndarray, cols: int | None = None, pad: int = 1) -> np.ndarray:
    """Tile ``(C, H, W)`` maps into one 2-D grid separated by ``pad`` pixels."""
    c, h, w = maps.shape
    cols = cols or int(math.ceil(math.sqrt(c * h / w)))
    cols = max(1, min(cols, c))
    rows = int(math.ceil(c / cols))
    grid = np.zeros((rows * (h + pad) - pad, cols * (w + pad) - pad))
    for i in range(c):
        r, q = divmod(i, cols)
        grid[r * (h + pad):r * (h + pad) + h, q * (w + pad):q * (w + pad) + w] = maps[i]
    return grid


def feature_maps(ckpt: nn.Checkpoint, image: np.ndarray, layers=(0, 1)) -> list:
    """Raw activations ``(C, H, W)`` of the requested conv layers for one input image."""
    if tuple(image.shape) != tuple(ckpt.spec.input_shape):
        raise nn.NetworkError(f"image shape {image.shape} != network input {ckpt.spec.input_shape}")
    _, acts = nn.forward(ckpt.spec, ckpt.weights, image.astype(np.float32))
    return [acts.conv_maps(layer)[0].astype(np.float64) for layer in layers]


def feature_grids(ckpt: nn.Checkpoint, image: np.ndarray, layers=(0, 1)) -> list:
    return [tile(normalize_channels(m)) for m in feature_maps(ckpt, image, layers)]


def save_grid(grid: np.ndarray, path, scale: int = 3) -> None:
    from PIL import Image
    img = np.round(np.clip(grid, 0, 1) * 255).astype(np.uint8)
    img = np.kron(img, np.ones((scale, scale), dtype=np.uint8))
    Image.fromarray(img, mode="L").save(path)


def input_lane_coords(geom: TrackGeometry, pose: WorldPose, intr: CameraIntrinsics,
                      extr: CameraExtrinsics, crop: CropSpec):
    """Lane offset and camera distance of the ground point under each network input pixel."""
    xs = crop.left + (np.arange(crop.out_width) + 0.5) * crop.width / crop.out_width
    ys = crop.top + (np.arange(crop.out_height) + 0.5) * crop.height / crop.out_height
    V, U = np.meshgrid(ys, xs, indexing="ij")
    X, Y = unproject_ground(ground_homography(intr, extr), U.ravel(), V.ravel())
    ch, sh = math.cos(pose.heading), math.sin(pose.heading)
    px = pose.x + X * ch - Y * sh
    py = pose.y + X * sh + Y * ch
    _, n = geom.project(px, py)
    dist = np.hypot(X, Y - extr.lateral_offset)
    return n.reshape(V.shape), dist.reshape(V.shape)


def road_masks(geom: TrackGeometry, pose: WorldPose, intr, extr, crop):
    """Boolean masks over the network input: lane-marking pixels and off-road pixels."""
    n, dist = input_lane_coords(geom, pose, intr, extr, crop)
    an = np.abs(np.nan_to_num(n, nan=1e6))
    half = geom.track.lane_width / 2
    near = dist < FOG_START
    marking = near & (np.abs(an - half) <= MARK_WIDTH / 2)
    offroad = near & (an > half + SHOULDER + 0.5)
    return marking, offroad


def layer_centers(spec: nn.NetworkSpec, layer: int):
    """Input-pixel coordinates of the receptive-field centers of a conv layer's units."""
    shapes = spec.conv_shapes()
    _, _, _, _, oh, ow = shapes[layer]
    ys, xs = np.arange(oh, dtype=float), np.arange(ow, dtype=float)
    for cv in reversed(spec.convs[:layer + 1]):
        ys = ys * cv.stride + (cv.kernel - 1) / 2
        xs = xs * cv.stride + (cv.kernel - 1) / 2
    return ys, xs


def mask_to_layer(mask: np.ndarray, spec: nn.NetworkSpec, layer: int) -> np.ndarray:
    ys, xs = layer_centers(spec, layer)
    yi = np.clip(np.round(ys).astype(int), 0, mask.shape[0] - 1)
    xi = np.clip(np.round(xs).astype(int), 0, mask.shape[1] - 1)
    return mask[np.ix_(yi, xi)]


def _excess(maps, a, b):
    return maps[:, a].mean(axis=1) - maps[:, b].mean(axis=1)


def marking_excess_test(maps: np.ndarray, marking: np.ndarray, offroad: np.ndarray,
                        n_perm: int = 999, seed: int = 0) -> dict:
    """Max-over-channels test of marking-minus-offroad mean activation.

    The null distribution comes from random toroidal shifts of the two masks,
    which keeps their spatial structure and the autocorrelation of the maps.
    Returns the observed per-channel z scores and a family-wise p value.
    """
    if marking.sum() == 0 or offroad.sum() == 0:
        raise ValueError("both masks need at least one pixel")
    c, h, w = maps.shape
    flat = maps.reshape(c, -1)
    obs = _excess(flat, marking.ravel(), offroad.ravel())
    rng = np.random.default_rng(seed)
    null = np.empty((n_perm, c))
    for i in range(n_perm):
        dy, dx = int(rng.integers(0, h)), int(rng.integers(0, w))
        if dy == 0 and dx == 0:
            dx = 1 % w
        m = np.roll(marking, (dy, dx), axis=(0, 1)).ravel()
        o = np.roll(offroad, (dy, dx), axis=(0, 1)).ravel()
        if m.sum() == 0 or o.sum() == 0:
            null[i] = 0.0
            continue
        null[i] = _excess(flat, m, o)
    mu, sd = null.mean(axis=0), null.std(axis=0)
    sd = np.where(sd > 0, sd, np.inf)
    z_obs = (obs - mu) / sd
    z_null = ((null - mu) / sd).max(axis=1)
    stat = z_obs.max()
    p = (1 + np.sum(z_null >= stat)) / (n_perm + 1)
    return {"z": z_obs, "max_z": float(stat), "p": float(p), "excess": obs}


def plot_history(history: list, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if history:
        e = [h[0] for h in history]
        ax.semilogy(e, [h[1] for h in history], "o-", label="train")
        ax.semilogy(e, [h[2] for h in history], "s-", label="validation")
        ax.legend()
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE (1/m)^2")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_trace(trace, path, threshold: float = 1.0) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, (a1, a2) = plt.subplots(2, 1, figsize=(7, 4.5), sharex=True)
    a1.plot(trace.time, trace.off_center, lw=0.8)
    for y in (-threshold, threshold):
        a1.axhline(y, color="r", ls="--", lw=0.6)
    for t in trace.interventions:
        a1.axvline(t, color="k", lw=0.5, alpha=0.5)
    a1.set_ylabel("off-center (m)")
    a2.plot(trace.time, trace.human_command, lw=0.8, label="human")
    a2.plot(trace.time, trace.cnn_command, lw=0.8, label="network")
    a2.set_ylabel("1/r (1/m)")
    a2.set_xlabel("time (s)")
    a2.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
