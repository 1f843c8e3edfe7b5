"""Pose-error metrics (millimetres) and penetration statistics."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .collision import CollisionConfig, detect_collisions, penetration_depth
from .hand import keypoints, skin
from .state import TwoHandState

# canonical camera looks down -z, so the view axis is z
VIEW_AXIS = np.array([0.0, 0.0, 1.0])


def _check(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise ValueError(f"point sets must match and be (..., K, 3); got {pred.shape} and {gt.shape}")
    return pred, gt


def root_align(points, root):
    points = np.asarray(points, dtype=np.float64)
    return points - np.asarray(root, dtype=np.float64)[..., None, :]


def joint_errors(pred, gt) -> np.ndarray:
    """Per-joint error vectors after moving both wrists (index 0) to the origin."""
    pred, gt = _check(pred, gt)
    return root_align(pred, pred[..., 0, :]) - root_align(gt, gt[..., 0, :])


def mpjpe(pred, gt) -> float:
    return float(np.linalg.norm(joint_errors(pred, gt), axis=-1).mean())


def mpvpe(pred_verts, gt_verts, pred_root, gt_root) -> float:
    """Mean vertex error with each mesh translated by its own wrist position."""
    pred_verts, gt_verts = _check(pred_verts, gt_verts)
    e = root_align(pred_verts, pred_root) - root_align(gt_verts, gt_root)
    return float(np.linalg.norm(e, axis=-1).mean())


def mrrpe(pred_left_root, pred_right_root, gt_left_root, gt_right_root) -> float:
    d = (np.asarray(pred_right_root, float) - pred_left_root) - (np.asarray(gt_right_root, float) - gt_left_root)
    return float(np.linalg.norm(d))


def procrustes_align(pred, gt) -> np.ndarray:
    """Similarity transform of ``pred`` (rotation with det +1, translation, scale) closest to ``gt``."""
    pred, gt = _check(pred, gt)
    mp, mg = pred.mean(0), gt.mean(0)
    p, g = pred - mp, gt - mg
    var = np.sum(p * p)
    if var <= 1e-20 or np.sum(g * g) <= 1e-20:
        raise ValueError("degenerate point set for Procrustes alignment")
    U, S, Vt = np.linalg.svd(p.T @ g)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt)) or 1.0
    R = U @ D @ Vt  # applied as p @ R
    scale = np.sum(S * np.diag(D)) / var
    return scale * p @ R + mg


def pa_error(pred, gt) -> float:
    pred, gt = _check(pred, gt)
    if np.array_equal(pred, gt):
        # the SVD would leave rounding noise where the answer is exactly zero
        return 0.0
    return float(np.linalg.norm(procrustes_align(pred, gt) - gt, axis=-1).mean())


pa_mpjpe = pa_error
pa_mpvpe = pa_error


def xy_z_split(pred, gt, view_axis=VIEW_AXIS) -> tuple[float, float]:
    """Mean in-plane and mean along-view components of the root-aligned joint error."""
    xy, z = xy_z_components(joint_errors(pred, gt), view_axis)
    return float(xy.mean()), float(z.mean())


def xy_z_components(err: np.ndarray, view_axis=VIEW_AXIS) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(view_axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    along = err @ a
    plane = err - along[..., None] * a
    return np.linalg.norm(plane, axis=-1), np.abs(along)


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class MetricReport:
    mpjpe: float
    mpvpe: float
    mrrpe: float
    pa_mpjpe: float
    pa_mpvpe: float
    mpjpe_xy: float
    mpjpe_z: float
    mpvpe_xy: float
    mpvpe_z: float
    penetration_depth_mean: float
    collision_pair_count_mean: float
    count: int

    def as_table(self) -> str:
        rows = [(f.name, getattr(self, f.name)) for f in fields(self)]
        w = max(len(k) for k, _ in rows)
        out = [f"{'metric':<{w}}  value", f"{'-' * w}  {'-' * 12}"]
        for k, v in rows:
            out.append(f"{k:<{w}}  {v:d}" if isinstance(v, int) else f"{k:<{w}}  {v:12.6f}")
        return "\n".join(out) + "\n"

    def as_keyvalue(self) -> str:
        return "".join(f"{k} = {v!r}\n" for k, v in asdict(self).items())

    @classmethod
    def from_keyvalue(cls, text: str) -> "MetricReport":
        kv = dict(line.split(" = ", 1) for line in text.splitlines() if " = " in line)
        return cls(**{f.name: (int(kv[f.name]) if f.name == "count" else float(kv[f.name])) for f in fields(cls)})


@dataclass(frozen=True)
class SampleMetrics:
    mpjpe: float
    mpvpe: float
    mrrpe: float
    pa_mpjpe: float
    pa_mpvpe: float
    mpjpe_xy: float
    mpjpe_z: float
    mpvpe_xy: float
    mpvpe_z: float
    penetration_depth: float
    collision_pairs: int


def sample_metrics(pred: TwoHandState, gt: TwoHandState, tess=(8, 6),
                   ccfg: CollisionConfig = CollisionConfig()) -> SampleMetrics:
    """Errors for one two-hand sample; per-hand values are averaged over the two hands."""
    u, v = tess
    acc = {k: [] for k in ("mpjpe", "mpvpe", "pa_mpjpe", "pa_mpvpe", "jxy", "jz", "vxy", "vz")}
    meshes = []
    roots = {}
    for side in ("left", "right"):
        hp, hg = getattr(pred, side), getattr(gt, side)
        kp, kg = keypoints(hp), keypoints(hg)
        mp, mg = skin(hp, u, v), skin(hg, u, v)
        meshes.append(mp)
        roots[side] = (kp[0], kg[0])
        je = joint_errors(kp, kg)
        ve = root_align(mp.vertices, kp[0]) - root_align(mg.vertices, kg[0])
        acc["mpjpe"].append(np.linalg.norm(je, axis=-1).mean())
        acc["mpvpe"].append(np.linalg.norm(ve, axis=-1).mean())
        acc["pa_mpjpe"].append(pa_error(kp, kg))
        acc["pa_mpvpe"].append(pa_error(mp.vertices, mg.vertices))
        jxy, jz = xy_z_components(je)
        vxy, vz = xy_z_components(ve)
        acc["jxy"].append(jxy.mean())
        acc["jz"].append(jz.mean())
        acc["vxy"].append(vxy.mean())
        acc["vz"].append(vz.mean())
    m = {k: float(np.mean(vals)) for k, vals in acc.items()}
    rr = mrrpe(roots["left"][0], roots["right"][0], roots["left"][1], roots["right"][1])
    pairs = len(detect_collisions(meshes[0], meshes[1], ccfg))
    return SampleMetrics(m["mpjpe"], m["mpvpe"], rr, m["pa_mpjpe"], m["pa_mpvpe"], m["jxy"], m["jz"],
                         m["vxy"], m["vz"], penetration_depth(meshes[0], meshes[1]), pairs)


def aggregate(samples: list[SampleMetrics]) -> MetricReport:
    n = len(samples)
    if n == 0:
        return MetricReport(*([0.0] * 11), 0)

    def mean(name):
        return float(np.mean([getattr(s, name) for s in samples]))

    return MetricReport(mean("mpjpe"), mean("mpvpe"), mean("mrrpe"), mean("pa_mpjpe"), mean("pa_mpvpe"),
                        mean("mpjpe_xy"), mean("mpjpe_z"), mean("mpvpe_xy"), mean("mpvpe_z"),
                        mean("penetration_depth"), mean("collision_pairs"), n)


def evaluate(preds, gts, tess=(8, 6), ccfg: CollisionConfig = CollisionConfig()) -> MetricReport:
    if len(preds) != len(gts):
        raise ValueError("prediction and ground-truth counts differ")
    return aggregate([sample_metrics(p, g, tess, ccfg) for p, g in zip(preds, gts)])
