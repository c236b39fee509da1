"""Independent reference computations shared by the unit and acceptance tests."""
import math

import numpy as np

from deskpilot import nn
from deskpilot.geometry import DynamicsConfig, LanePose, VehicleState, step_dynamics

TINY_SPEC = nn.NetworkSpec(input_shape=(3, 8, 16), convs=(nn.Conv(4, 3, 2), nn.Conv(5, 3, 1)),
                           hidden=(6,), outputs=1)


def loss64(spec, weights, x, y):
    pred = nn.predict(spec, [w.astype(np.float64) for w in weights], x, dtype=np.float64)
    d = np.asarray(pred, np.float64) - y
    return float(np.mean(d * d))


def analytic_grads(spec, weights, x, y, dtype):
    w = [p.astype(dtype) for p in weights]
    pred, acts = nn.forward(spec, w, x, dtype=dtype)
    return nn.backward(spec, w, acts, nn.mse_loss_grad(pred, y.astype(dtype)))


def finite_difference_check(spec, weights, x, y, per_tensor=None, h=1e-5, dtype=np.float64,
                            seed=0, floor=1e-9):
    """Max relative error between analytic gradients (computed in ``dtype``) and
    central differences of the 64-bit loss. ``per_tensor=None`` checks every entry."""
    rng = np.random.default_rng(seed)
    w64 = [p.astype(np.float64) for p in weights]
    grads = analytic_grads(spec, w64 if dtype == np.float64 else weights, x, y, dtype)
    worst = 0.0
    checked = 0
    for t, (p, g) in enumerate(zip(w64, grads)):
        flat = p.reshape(-1)
        if per_tensor is None or per_tensor >= flat.size:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, per_tensor, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            lp = loss64(spec, w64, x, y)
            flat[i] = old - h
            lm = loss64(spec, w64, x, y)
            flat[i] = old
            num = (lp - lm) / (2 * h)
            ana = float(g.reshape(-1)[i])
            scale = max(abs(num), abs(ana))
            if scale < floor:
                continue
            worst = max(worst, abs(num - ana) / scale)
            checked += 1
    return worst, checked


def recovery_time(policy, offset, heading, speed=10.0, dt=0.1, horizon=10.0, tol=0.1):
    """First time |offset| < tol under ``policy(pose) -> curvature`` on a straight lane."""
    cfg = DynamicsConfig(dt, speed)
    s = VehicleState(LanePose(0.0, offset, heading), speed)
    for k in range(int(round(horizon / dt)) + 1):
        if abs(s.pose.offset) < tol:
            return k * dt
        s = step_dynamics(s, policy(s.pose), 0.0, cfg)
    return math.inf

