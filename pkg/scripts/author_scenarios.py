"""Regenerate the scenario template files under src/twohand/scenarios.

Each template is written down as wrist orientations, finger curls and an
approach direction; the hands are then slid apart along that direction until
the closest vertex pair sits at the requested clearance.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from twohand.collision import penetration_depth
from twohand.hand import HandParams, keypoints, mirror_axis_angle, skin
from twohand.state import TwoHandState
from twohand.synth import Scenario, format_scenario

OUT = Path(__file__).resolve().parents[1] / "src" / "twohand" / "scenarios"


def rotvec(*steps):
    """Compose intrinsic steps like ("y", -90) into one axis-angle vector."""
    r = Rotation.identity()
    for axis, deg in steps:
        r = r * Rotation.from_euler(axis, deg, degrees=True)
    return r.as_rotvec()


def pose(wrist, curls, thumb=(0.0, 0.0, 0.0)):
    """curls: (mcp, pip, dip) flexion applied to index, middle, pinky, ring (a 4x3 array or one triple)."""
    p = np.zeros((16, 3))
    p[0] = wrist
    c = np.broadcast_to(np.asarray(curls, dtype=float), (4, 3))
    for f in range(4):
        p[1 + 3 * f: 4 + 3 * f, 0] = c[f]
    p[13:16, 0] = thumb
    return p.reshape(-1)


def build(left_pose, right_pose, base, direction, clearance):
    direction = np.asarray(direction, float) / np.linalg.norm(direction)
    left = HandParams("left", left_pose, np.ones(5), np.zeros(3))
    lm = skin(left)

    def state(s):
        return TwoHandState(left, HandParams("right", right_pose, np.ones(5), np.asarray(base) + s * direction))

    def gap(s):
        rm = skin(state(s).right)
        if penetration_depth(lm, rm) > 0:
            return -1.0
        return cKDTree(lm.vertices).query(rm.vertices)[0].min() - clearance

    # walk inward from far away until the first contact, then bisect
    hi = 400.0
    if gap(hi) < 0:
        raise RuntimeError("upper bracket still too close")
    lo = hi - 2.0
    while gap(lo) >= 0:
        hi, lo = lo, lo - 2.0
        if lo < -400.0:
            raise RuntimeError("hands never come into contact along the approach direction")
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if gap(mid) < 0:
            lo = mid
        else:
            hi = mid
    # keep the far side of the bracket so the template itself has the clearance
    s = np.round(hi, 3)
    while gap(s) < 0:
        s += 0.001
    return state(s)


def balance(st: TwoHandState) -> TwoHandState:
    """Rotate the whole scene about the left root so each wrist turns by half of
    the wrist-to-wrist rotation.  Both wrist angles then stay at or below pi/2,
    well clear of the axis-angle wrap at pi."""
    rl = Rotation.from_rotvec(st.left.pose[:3].copy())
    rr = Rotation.from_rotvec(st.right.pose[:3].copy())
    half = Rotation.from_rotvec(0.5 * (rl.inv() * rr).as_rotvec())
    g = half.inv() * rl.inv()
    lp, rp = st.left.pose.copy(), st.right.pose.copy()
    lp[:3] = (g * rl).as_rotvec()
    rp[:3] = (g * rr).as_rotvec()
    rel = g.apply(st.relative_translation)
    return TwoHandState(st.left.replace(pose=lp), st.right.replace(pose=rp, root_translation=rel))


def scenarios():
    out = []

    # palms pressed together, fingers up, thumbs toward the viewer
    rp = pose(rotvec(("y", -90)), (0.1, 0.05, 0.05))
    st = build(mirror_axis_angle(rp), rp, (0, 0, 0), (1, 0, 0), 4.5)
    out.append(Scenario("prayer", st, 0.05, 0.02, 1.5, 0.03))

    # cupped hands facing each other, right hand lowered so its fingers wrap the left palm edge
    rp = pose(rotvec(("y", -90)), (0.7, 0.6, 0.3), (0.2, 0.2, 0.1))
    st = build(mirror_axis_angle(rp), rp, (0, -30, 0), (1, 0, 0), 4.5)
    out.append(Scenario("clasp", st, 0.05, 0.02, 1.5, 0.03))

    # both palms down, crossed at 60 degrees, right hand resting on the back of the left
    rp = pose(rotvec(("z", 30), ("y", 180)), (0.15, 0.1, 0.05))
    lp = mirror_axis_angle(rp)
    lc = keypoints(HandParams("left", lp, np.ones(5), np.zeros(3)))[[0, 1, 4, 7, 10]].mean(0)
    rc = keypoints(HandParams("right", rp, np.ones(5), np.zeros(3)))[[0, 1, 4, 7, 10]].mean(0)
    base = lc - rc
    base[2] = 0.0
    st = build(lp, rp, base, (0, 0, 1), 4.5)
    out.append(Scenario("cross", st, 0.05, 0.02, 1.5, 0.03))

    # index finger pads pressed together, the right hand reaching down from above
    curl = [(0.0, 0.05, 0.05), (1.4, 1.2, 0.6), (1.4, 1.2, 0.6), (1.4, 1.2, 0.6)]
    rp = pose(rotvec(("x", 180)), curl, (0.3, 0.3, 0.2))
    lp = pose(np.zeros(3), curl, (0.3, 0.3, 0.2))
    ldip = keypoints(HandParams("left", lp, np.ones(5), np.zeros(3)))[3]
    rtip = keypoints(HandParams("right", rp, np.ones(5), np.zeros(3)))[16]
    base = ldip - rtip
    base[2] = 0.0
    st = build(lp, rp, base, (0, 0, 1), 4.5)
    out.append(Scenario("pinch", st, 0.05, 0.02, 1.5, 0.03))

    # relaxed hands side by side, palms down, right thumb resting across the left thumb
    rp = pose(rotvec(("y", 180)), (0.2, 0.2, 0.1), (0.1, 0.1, 0.1))
    lp = mirror_axis_angle(rp)
    lmcp = keypoints(HandParams("left", lp, np.ones(5), np.zeros(3)))[14]
    rtip = keypoints(HandParams("right", rp, np.ones(5), np.zeros(3)))[20]
    base = lmcp - rtip
    base[2] = 0.0
    st = build(lp, rp, base, (0, 0, 1), 5.0)
    out.append(Scenario("free", st, 0.08, 0.03, 3.0, 0.03))
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=OUT)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    for sc in scenarios():
        sc = Scenario(sc.name, balance(sc.state), sc.jitter_finger, sc.jitter_wrist, sc.jitter_trans,
                      sc.jitter_shape)
        (args.out / f"{sc.name}.txt").write_text(format_scenario(sc))
        print(sc.name, np.round(sc.state.relative_translation, 3))


if __name__ == "__main__":
    main()
