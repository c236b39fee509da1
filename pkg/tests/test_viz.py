import numpy as np
import pytest

from deskpilot import nn, viz
from deskpilot.geometry import LanePose
from deskpilot.camera import CameraExtrinsics, CameraIntrinsics, CropSpec, network_input
from deskpilot.roadworld import RenderOptions, Straight, TrackSpec, render_frame

SMALL = CameraIntrinsics().scaled(0.3125)


def test_normalize_channels():
    m = np.stack([np.full((2, 3), 4.0), np.arange(6.0).reshape(2, 3)])
    out = viz.normalize_channels(m)
    assert np.all(out[0] == 0)
    assert out[1].min() == 0 and out[1].max() == 1 and out[1, 0, 1] == pytest.approx(0.2)


def test_tile_layout():
    maps = np.arange(5 * 2 * 3, dtype=float).reshape(5, 2, 3)
    g = viz.tile(maps, cols=2, pad=1)
    assert g.shape == (3 * 3 - 1, 2 * 4 - 1)
    assert np.array_equal(g[3:5, 4:7], maps[3])
    assert np.all(g[2, :] == 0)


def test_layer_centers_default_spec():
    ys, xs = viz.layer_centers(nn.DEFAULT_SPEC, 0)
    assert xs[:3].tolist() == [2.0, 4.0, 6.0] and len(ys) == 31
    # second layer: unit j sees first-layer units 2j..2j+4, centred on 2j+2
    _, xs2 = viz.layer_centers(nn.DEFAULT_SPEC, 1)
    assert xs2[1] == 2 * (2 * 1 + 2) + 2


def test_masks_land_on_painted_markings():
    t = TrackSpec((Straight(300.0),), marking_style="solid")
    g = t.geometry()
    pose = g.world_pose(LanePose(20.0, 0.0, 0.0))
    extr = CameraExtrinsics()
    crop = CropSpec.for_camera(SMALL, extr)
    frame = render_frame(g, pose, SMALL, extr, RenderOptions(noise=False))
    luma = network_input(frame, SMALL, extr, crop)[0]
    marking, offroad = viz.road_masks(g, pose, SMALL, extr, crop)
    assert marking.sum() > 20 and offroad.sum() > 100
    assert luma[marking].mean() > luma[offroad].mean() + 40


def _slanted_masks(h=20, w=40):
    # like a lane line in perspective: a diagonal band, with off-road beyond it
    r, c = np.mgrid[:h, :w]
    marking = np.abs(c - (8 + r)) <= 1
    offroad = c > 14 + r
    return marking, offroad


def test_excess_test_detects_planted_signal():
    rng = np.random.default_rng(0)
    h, w = 20, 40
    marking, offroad = _slanted_masks(h, w)
    maps = rng.normal(0, 1, (4, h, w))
    maps[2][marking] += 1.5
    res = viz.marking_excess_test(maps, marking, offroad, n_perm=499)
    assert res["p"] < 0.01
    assert int(np.argmax(res["z"])) == 2


def test_excess_test_calibrated_under_null():
    h, w = 20, 40
    marking, offroad = _slanted_masks(h, w)
    ps = []
    for s in range(60):
        maps = np.random.default_rng(100 + s).normal(0, 1, (4, h, w))
        ps.append(viz.marking_excess_test(maps, marking, offroad, n_perm=199, seed=s)["p"])
    ps = np.array(ps)
    # roughly uniform: few small p values and a median near one half
    assert np.mean(ps < 0.05) <= 0.15
    assert 0.3 < np.median(ps) < 0.7


def test_excess_test_needs_both_masks():
    with pytest.raises(ValueError):
        viz.marking_excess_test(np.zeros((1, 3, 3)), np.zeros((3, 3), bool), np.ones((3, 3), bool))


def test_feature_maps_shapes_and_rejects_wrong_size():
    ck = nn.Checkpoint(nn.DEFAULT_SPEC, nn.init_weights(nn.DEFAULT_SPEC, 0), {})
    x = np.random.default_rng(0).uniform(0, 255, nn.DEFAULT_SPEC.input_shape).astype(np.float32)
    m1, m2 = viz.feature_maps(ck, x)
    assert m1.shape == (24, 31, 98) and m2.shape == (36, 14, 47)
    with pytest.raises(nn.NetworkError):
        viz.feature_maps(ck, x[:, :10])
