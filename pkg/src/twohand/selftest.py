"""Quick oracle checks behind ``twohand selftest``.

Each check compares a production path against an independent reference on a
few seeded inputs; the full suites live in the test directory.
"""

from __future__ import annotations

import numpy as np

from . import collision as col
from .diffusion import cosine_schedule
from .hand import axis_angle_to_matrix, skin
from .metrics import mpjpe, mrrpe, pa_mpjpe, xy_z_split
from .nn import tensor as T
from .nn.layers import TransformerEncoder
from .synth import SCENARIOS, load_scenario, perturb_until_penetration


def quat_matrix(aa: np.ndarray) -> np.ndarray:
    """Rotation matrix through a unit quaternion (independent of Rodrigues)."""
    th = np.linalg.norm(aa)
    if th == 0.0:
        return np.eye(3)
    w, (x, y, z) = np.cos(th / 2), np.sin(th / 2) * aa / th
    return np.array([[1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
                     [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
                     [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)]])


def penetrating_states(n: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        st = load_scenario(SCENARIOS[k % len(SCENARIOS)]).state
        out.append(perturb_until_penetration(st, rng)[0])
    return out


def _check_rotation():
    rng = np.random.default_rng(0)
    err = max(np.abs(axis_angle_to_matrix(a) - quat_matrix(a)).max() for a in rng.normal(0, 1.5, (100, 3)))
    return err < 1e-10, f"max abs diff {err:.2e}"


def _check_grid():
    bad = 0
    for st in penetrating_states(10, 1):
        a, b = skin(st.left), skin(st.right)
        bad += not col.detect_collisions(a, b).same_as(col.detect_collisions(a, b, method="brute"))
    return bad == 0, f"{bad} mismatching sets of 10"


def _check_gmof():
    rho = 5.0
    ok = (col.gmof(0.0, rho) == 0.0 and col.gmof(rho ** 2, rho) == rho ** 2 / 2
          and abs(col.gmof(1e6 * rho ** 2, rho) - rho ** 2) <= 1e-5 * rho ** 2)
    return ok, "values at 0, rho^2 and 1e6 rho^2"


def _check_collision_grad():
    st = penetrating_states(1, 2)[0]
    x = st.to_vector()
    loss, g, cs = col.collision_loss_vector(x)
    worst = 0.0
    h = 1e-5
    for k in np.flatnonzero(np.abs(g) > 1e-8)[::7]:
        e = np.zeros_like(x)
        e[k] = h
        fd = (col.fixed_set_loss(x + e, cs) - col.fixed_set_loss(x - e, cs)) / (2 * h)
        worst = max(worst, abs(fd - g[k]) / max(abs(g[k]), 1e-12))
    return worst < 1e-4, f"worst relative error {worst:.2e} over {len(cs)} pairs"


def _check_nn_grad():
    rng = np.random.default_rng(3)
    enc = TransformerEncoder(8, 2, 1, 16, rng)
    x = rng.normal(size=(2, 3, 8))
    params = enc.parameters()

    def loss_value():
        return float(np.sum(enc(x).data ** 2))

    with T.Tape() as tape:
        loss = T.sum_all(T.mul(enc(x), enc(x)))
    T.backward(tape, loss)
    worst = 0.0
    for p in params:
        for idx in list(np.ndindex(p.shape))[:3]:
            old = p.data[idx]
            h = 1e-5 * max(1.0, abs(old))
            p.data[idx] = old + h
            up = loss_value()
            p.data[idx] = old - h
            dn = loss_value()
            p.data[idx] = old
            fd = (up - dn) / (2 * h)
            worst = max(worst, abs(fd - p.grad[idx]) / max(abs(fd), abs(p.grad[idx]), 1e-8))
    return worst < 1e-4, f"worst relative error {worst:.2e}"


def _check_schedule():
    s = cosine_schedule(1000)
    ab = s.alpha_bar
    ok = bool(np.all(np.diff(ab) < 0) and ab[0] >= 0.999 and ab[-1] <= 1e-3)
    return ok, f"alpha_bar[0]={ab[0]:.6f} alpha_bar[T]={ab[-1]:.2e}"


def _check_metrics():
    gt = np.random.default_rng(4).normal(size=(21, 3))
    pred = gt.copy()
    pred[5] += [3.0, 0.0, 0.0]
    noise = np.random.default_rng(5).normal(size=(21, 3))
    e = np.zeros((21, 3))
    e[1] = [3.0, 4.0, 12.0]
    xy, z = xy_z_split(e, np.zeros((21, 3)))
    ok = (mpjpe(gt, gt) == 0.0 and abs(mpjpe(pred, gt) - 3 / 21) < 1e-12
          and mrrpe(np.zeros(3), [3.0, 4.0, 0.0], np.zeros(3), np.zeros(3)) == 5.0
          and abs(xy * 21 - 5.0) < 1e-12 and abs(z * 21 - 12.0) < 1e-12
          and pa_mpjpe(gt + noise, gt) <= mpjpe(gt + noise, gt))
    return ok, "unit values"


CHECKS = [("rotation vs quaternion", _check_rotation), ("grid vs brute collisions", _check_grid),
          ("gmof analytic values", _check_gmof), ("collision gradient vs finite differences", _check_collision_grad),
          ("encoder gradient vs finite differences", _check_nn_grad), ("cosine schedule", _check_schedule),
          ("metric unit values", _check_metrics)]


def run_selftest() -> tuple[list[str], bool]:
    lines, all_ok = [], True
    for name, fn in CHECKS:
        ok, detail = fn()
        all_ok &= bool(ok)
        lines.append(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return lines, all_ok
