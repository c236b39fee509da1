import math

import numpy as np
import pytest

from deskpilot.camera import CameraExtrinsics, CameraIntrinsics, CameraRig
from deskpilot.geometry import DynamicsConfig, LanePose, step_dynamics, VehicleState
from deskpilot.roadworld import (Arc, IdealDriver, NoisyDriver, RenderOptions, Straight,
                                 TrackError, TrackSpec, WorldPose, centerline, collect_run,
                                 random_track, render_frame, value_noise)

SMALL = CameraIntrinsics().scaled(0.3125)


def test_straight_and_arc_curvature():
    t = TrackSpec((Straight(100.0), Arc(-50.0, math.pi / 2), Straight(10.0)))
    assert centerline(t, 50.0)[2] == 0.0
    for s in (100.5, 130.0, 100 + 25 * math.pi - 0.01):
        assert centerline(t, s)[2] == pytest.approx(-0.02)


def test_arc_geometry_closed_form():
    # quarter turn to the left from the origin heading +x: ends at (R, -R) heading -pi/2
    t = TrackSpec((Arc(-50.0, math.pi / 2),))
    (x, y), h, _ = centerline(t, 25 * math.pi)
    assert (x, y, h) == pytest.approx((50.0, -50.0, -math.pi / 2), abs=1e-9)


def test_joint_continuity():
    t = random_track(3, 1500)
    g = t.geometry()
    for i in range(1, len(t.segments)):
        s0, x0, y0, h0 = g.starts[i]
        prev = t.segments[i - 1]
        xe, ye, he = g._advance(prev, *g.starts[i - 1][1:], prev.arc_length)
        assert math.hypot(xe - x0, ye - y0) < 1e-9 and abs(he - h0) < 1e-12
        (xa, ya), _, _ = g.centerline(s0 - 1e-9)
        (xb, yb), _, _ = g.centerline(s0)
        assert math.hypot(xa - xb, ya - yb) < 1e-8


def test_invalid_segments():
    with pytest.raises(TrackError):
        Arc(9.9, 0.5)
    with pytest.raises(TrackError):
        Arc(50.0, 0.0)
    with pytest.raises(TrackError):
        Straight(-1.0)
    with pytest.raises(TrackError):
        TrackSpec(())
    with pytest.raises(TrackError):
        TrackSpec((Straight(1.0),), marking_style="zigzag")


def test_project_inverts_world_pose():
    t = random_track(11, 600)
    g = t.geometry()
    rng = np.random.default_rng(0)
    for s in rng.uniform(5, g.total_length - 5, 50):
        d = float(rng.uniform(-3, 3))
        wp = g.world_pose(LanePose(float(s), d, 0.0))
        ss, nn = g.project(np.array([wp.x]), np.array([wp.y]))
        assert ss[0] == pytest.approx(s, abs=1e-7) and nn[0] == pytest.approx(d, abs=1e-9)


def test_random_track_deterministic_and_long_enough():
    a, b = random_track(5, 800), random_track(5, 800)
    assert a == b
    assert a.total_length >= 800
    assert random_track(6, 800) != a


def test_value_noise_range_and_continuity():
    x = np.linspace(0, 20, 4001)
    v = value_noise(x, np.full_like(x, 3.3), 1.5, 4)
    assert v.min() >= -1 and v.max() <= 1
    assert np.max(np.abs(np.diff(v))) < 0.02


def test_render_mirror_symmetry_without_noise():
    straight = TrackSpec((Straight(300.0),))
    f = render_frame(straight, WorldPose(10.0, 0.0, 0.0), SMALL, CameraExtrinsics(),
                     RenderOptions(noise=False))
    px = f.pixels.astype(int)
    assert np.max(np.abs(px - px[:, :, ::-1])) <= 1


def test_render_mirrored_track():
    t = random_track(9, 300)
    m = TrackSpec(tuple(Arc(-s.radius, s.angle) if isinstance(s, Arc) else s for s in t.segments),
                  seed=t.seed)
    opts = RenderOptions(noise=False)
    ga, gb = t.geometry(), m.geometry()
    a = render_frame(ga, ga.world_pose(LanePose(120.0, 0.3, 0.02)), SMALL, CameraExtrinsics(), opts)
    b = render_frame(gb, gb.world_pose(LanePose(120.0, -0.3, -0.02)), SMALL, CameraExtrinsics(), opts)
    assert np.max(np.abs(a.pixels.astype(int) - b.pixels[:, :, ::-1].astype(int))) <= 1


def test_render_deterministic():
    t = random_track(2, 300)
    g = t.geometry()
    a = render_frame(g, g.world_pose(LanePose(50.0, 0.0, 0.0)), SMALL, CameraExtrinsics())
    b = render_frame(g, g.world_pose(LanePose(50.0, 0.0, 0.0)), SMALL, CameraExtrinsics())
    assert a.pixels.tobytes() == b.pixels.tobytes()
    assert a.pixels.shape == (3, 150, 200)


def test_render_shows_lane_markings():
    straight = TrackSpec((Straight(300.0),), marking_style="solid")
    f = render_frame(straight, WorldPose(10.0, 0.0, 0.0), CameraIntrinsics(), CameraExtrinsics(),
                     RenderOptions(noise=False))
    # ground point 8 m ahead, 1.8 m to the right is on the marking
    row = 240 + 500 * math.tan(math.atan2(1.4, 8.0) - math.radians(1.5))
    col = 320 + 500 * 1.8 / 8.0
    px = f.pixels[:, int(row), int(col)].astype(int)
    assert px.min() > 200


def test_ideal_driver_on_straight():
    run = collect_run(TrackSpec((Straight(300.0),)), IdealDriver(), DynamicsConfig())
    assert np.all(run.commands == 0) and np.all(run.offsets == 0)
    assert len(run) == int((300 - 80) / 1.0) + 1


def test_ideal_driver_arc_steady_state():
    t = TrackSpec((Straight(20.0), Arc(50.0, 3.0), Straight(120.0)))
    run = collect_run(t, IdealDriver(), DynamicsConfig())
    inside = (run.stations > 100) & (run.stations < 150)
    assert run.commands[inside] == pytest.approx(0.02, abs=1e-6)


def test_ground_truth_equals_integrated_pose():
    run = collect_run(random_track(4, 400), NoisyDriver(seed=2), DynamicsConfig())
    cfg = DynamicsConfig()
    for i in range(len(run) - 1):
        nxt = step_dynamics(VehicleState(run.pose(i), run.speed), run.commands[i],
                            run.curvatures[i], cfg).pose
        assert nxt == run.pose(i + 1)


def test_run_determinism():
    t = random_track(4, 300)
    a = collect_run(t, NoisyDriver(seed=5), DynamicsConfig())
    b = collect_run(t, NoisyDriver(seed=5), DynamicsConfig())
    c = collect_run(t, NoisyDriver(seed=6), DynamicsConfig())
    assert a.offsets.tobytes() == b.offsets.tobytes()
    assert a.commands.tobytes() == b.commands.tobytes()
    assert a.offsets.tobytes() != c.offsets.tobytes()


@pytest.fixture(scope="module")
def long_run():
    return collect_run(random_track(21, 10500), NoisyDriver(0.15, 0.01, seed=3), DynamicsConfig())


def test_noisy_driver_hits_configured_spread(long_run):
    assert len(long_run) >= 10_000
    assert np.std(long_run.offsets) == pytest.approx(0.15, rel=0.2)
    assert np.std(long_run.headings) == pytest.approx(0.01, rel=0.2)
    assert long_run.sigma_offset == np.std(long_run.offsets)


def test_noisy_driver_never_leaves_the_lane(long_run):
    assert np.max(np.abs(long_run.offsets)) < 1.0


def test_infeasible_noise_mix_rejected():
    with pytest.raises(TrackError):
        collect_run(random_track(1, 300), NoisyDriver(0.15, 0.03), DynamicsConfig())


def test_frames_render_lazily_at_logged_pose():
    rig = CameraRig(SMALL)
    run = collect_run(random_track(8, 300), NoisyDriver(seed=1), DynamicsConfig(), rig)
    g = run.track.geometry()
    f = run.frame(17, "left")
    ref = render_frame(g, g.world_pose(run.pose(17)), SMALL, rig.extrinsics("left"))
    assert np.array_equal(f.pixels, ref.pixels)
    assert f.camera_id == "left" and f.timestamp == pytest.approx(1.7)
