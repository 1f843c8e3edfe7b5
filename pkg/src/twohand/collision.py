"""Hybrid distance-orientation collision detection between two hand meshes.

A vertex pair (i in A, j in B) collides when its squared distance is below
``d_threshold**2`` and the cosine between the two vertex normals is below
``cos_theta_threshold`` (the surfaces face each other).  The collision loss sums
a Geman-McClure penalty over the pairs; its gradient is taken with the pair set
held fixed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .hand import HandMesh, hand_template, pose_hand, pose_vjp, skin, vertex_normals
from .state import LEFT_POSE, LEFT_SHAPE, REL_TRANS, RIGHT_POSE, RIGHT_SHAPE, STATE_DIM, TwoHandState

GMOF_FORMS = ("standard", "as_printed")


@dataclass(frozen=True)
class CollisionConfig:
    d_threshold: float = 4.0
    cos_theta_threshold: float = -0.5
    rho: float = 5.0
    gmof_form: str = "standard"
    # guards the pole of the as-printed form
    singular_eps: float = 1e-6

    def __post_init__(self):
        if not self.d_threshold > 0:
            raise ValueError("d_threshold must be positive")
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if not -1.0 <= self.cos_theta_threshold <= 1.0:
            raise ValueError("cos_theta_threshold must lie in [-1, 1]")
        if self.gmof_form not in GMOF_FORMS:
            raise ValueError(f"gmof_form must be one of {GMOF_FORMS}")


@dataclass(frozen=True)
class CollisionSet:
    i: np.ndarray
    j: np.ndarray
    distance_sq: np.ndarray
    normal_cos: np.ndarray

    def __len__(self) -> int:
        return len(self.i)

    def pairs(self) -> list[tuple[int, int, float, float]]:
        return [(int(a), int(b), float(d), float(c))
                for a, b, d, c in zip(self.i, self.j, self.distance_sq, self.normal_cos)]

    def transpose(self) -> "CollisionSet":
        order = np.lexsort((self.i, self.j))
        return CollisionSet(self.j[order], self.i[order], self.distance_sq[order], self.normal_cos[order])

    def same_as(self, other: "CollisionSet") -> bool:
        return (np.array_equal(self.i, other.i) and np.array_equal(self.j, other.j)
                and np.array_equal(self.distance_sq, other.distance_sq)
                and np.array_equal(self.normal_cos, other.normal_cos))


EMPTY = CollisionSet(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0), np.zeros(0))


def _pair_distance_sq(va, vb, i, j):
    dx = va[i, 0] - vb[j, 0]
    dy = va[i, 1] - vb[j, 1]
    dz = va[i, 2] - vb[j, 2]
    return dx * dx + dy * dy + dz * dz


def _pair_cos(na, nb, i, j):
    return na[i, 0] * nb[j, 0] + na[i, 1] * nb[j, 1] + na[i, 2] * nb[j, 2]


def _finish(va, vb, na, nb, i, j, cfg):
    d2 = _pair_distance_sq(va, vb, i, j)
    keep = d2 < cfg.d_threshold ** 2
    i, j, d2 = i[keep], j[keep], d2[keep]
    cos = _pair_cos(na, nb, i, j)
    keep = cos < cfg.cos_theta_threshold
    i, j, d2, cos = i[keep], j[keep], d2[keep], cos[keep]
    order = np.lexsort((j, i))
    return CollisionSet(i[order], j[order], d2[order], cos[order])


def _boxes_apart(va, vb, gap) -> bool:
    if len(va) == 0 or len(vb) == 0:
        return True
    return bool(np.any(va.min(0) - vb.max(0) > gap) or np.any(vb.min(0) - va.max(0) > gap))


def detect_collisions_brute(mesh_a: HandMesh, mesh_b: HandMesh,
                            cfg: CollisionConfig = CollisionConfig()) -> CollisionSet:
    """O(N*M) reference enumeration."""
    va, vb = mesh_a.vertices, mesh_b.vertices
    if len(va) == 0 or len(vb) == 0:
        return EMPTY
    dx = va[:, None, 0] - vb[None, :, 0]
    dy = va[:, None, 1] - vb[None, :, 1]
    dz = va[:, None, 2] - vb[None, :, 2]
    d2 = dx * dx + dy * dy + dz * dz
    i, j = np.nonzero(d2 < cfg.d_threshold ** 2)
    return _finish(va, vb, mesh_a.vertex_normals, mesh_b.vertex_normals, i, j, cfg)


def _grid_candidates(va, vb, cell):
    ka = np.floor(va / cell).astype(np.int64)
    kb = np.floor(vb / cell).astype(np.int64)
    lo = np.minimum(ka.min(0), kb.min(0)) - 1
    ka -= lo
    kb -= lo
    ext = np.maximum(ka.max(0), kb.max(0)) + 2

    def key(k):
        return (k[:, 0] * ext[1] + k[:, 1]) * ext[2] + k[:, 2]

    order = np.argsort(key(kb), kind="stable")
    sorted_keys = key(kb)[order]
    ii, jj = [], []
    for off in np.stack(np.meshgrid([-1, 0, 1], [-1, 0, 1], [-1, 0, 1], indexing="ij"), -1).reshape(-1, 3):
        q = key(ka + off)
        start = np.searchsorted(sorted_keys, q, "left")
        stop = np.searchsorted(sorted_keys, q, "right")
        counts = stop - start
        if not counts.any():
            continue
        rows = np.repeat(np.arange(len(va)), counts)
        # position inside each run
        run_start = np.repeat(start - np.cumsum(counts) + counts, counts)
        cols = order[run_start + np.arange(counts.sum())]
        ii.append(rows)
        jj.append(cols)
    if not ii:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    return np.concatenate(ii), np.concatenate(jj)


def detect_collisions(mesh_a: HandMesh, mesh_b: HandMesh, cfg: CollisionConfig = CollisionConfig(),
                      method: str = "grid") -> CollisionSet:
    """Colliding vertex pairs, sorted by (i, j).

    ``method="grid"`` hashes B's vertices into cells of side ``d_threshold`` and
    checks the 27 neighbouring cells of each A vertex; ``"brute"`` enumerates all
    pairs.  Both give identical sets.
    """
    if method == "brute":
        return detect_collisions_brute(mesh_a, mesh_b, cfg)
    if method != "grid":
        raise ValueError(f"unknown method {method!r}")
    va, vb = mesh_a.vertices, mesh_b.vertices
    if _boxes_apart(va, vb, cfg.d_threshold):
        return EMPTY
    # only vertices inside the other mesh's box grown by the threshold can pair up
    d = cfg.d_threshold
    sa = np.flatnonzero(np.all((va >= vb.min(0) - d) & (va <= vb.max(0) + d), axis=1))
    sb = np.flatnonzero(np.all((vb >= va.min(0) - d) & (vb <= va.max(0) + d), axis=1))
    if len(sa) == 0 or len(sb) == 0:
        return EMPTY
    i, j = _grid_candidates(va[sa], vb[sb], d)
    i, j = sa[i], sb[j]
    return _finish(va, vb, mesh_a.vertex_normals, mesh_b.vertex_normals, i, j, cfg)


# ---------------------------------------------------------------------------
# robust penalty


def gmof(distance_sq, rho: float, form: str = "standard", eps: float = 1e-6):
    """Geman-McClure penalty of a squared residual.

    ``standard``: rho^2 x / (x + rho^2), bounded by rho^2.
    ``as_printed``: x / (x - rho), with |x - rho| clamped below by ``eps``.
    """
    x = np.asarray(distance_sq, dtype=np.float64)
    if form == "standard":
        r2 = rho * rho
        return r2 * x / (x + r2)
    if form == "as_printed":
        den = x - rho
        den = np.where(np.abs(den) < eps, np.where(den < 0, -eps, eps), den)
        return x / den
    raise ValueError(f"unknown gmof form {form!r}")


def gmof_grad(distance_sq, rho: float, form: str = "standard", eps: float = 1e-6):
    """d gmof / d distance_sq."""
    x = np.asarray(distance_sq, dtype=np.float64)
    if form == "standard":
        r2 = rho * rho
        return (r2 * r2) / ((x + r2) ** 2)
    if form == "as_printed":
        den = x - rho
        den = np.where(np.abs(den) < eps, np.where(den < 0, -eps, eps), den)
        return -rho / (den * den)
    raise ValueError(f"unknown gmof form {form!r}")


def pair_loss(va: np.ndarray, vb: np.ndarray, cs: CollisionSet, cfg: CollisionConfig):
    """Loss over a fixed pair set and its gradients with respect to both vertex arrays."""
    ga = np.zeros_like(va)
    gb = np.zeros_like(vb)
    if len(cs) == 0:
        return 0.0, ga, gb
    d = va[cs.i] - vb[cs.j]
    x = _pair_distance_sq(va, vb, cs.i, cs.j)
    loss = float(np.sum(gmof(x, cfg.rho, cfg.gmof_form, cfg.singular_eps)))
    w = 2.0 * gmof_grad(x, cfg.rho, cfg.gmof_form, cfg.singular_eps)[:, None] * d
    np.add.at(ga, cs.i, w)
    np.add.at(gb, cs.j, -w)
    return loss, ga, gb


# ---------------------------------------------------------------------------
# state-level loss and gradient


@dataclass
class PosedPair:
    left: object
    right: object
    left_mesh: HandMesh
    right_mesh: HandMesh


def pose_state_vector(x: np.ndarray, tess: tuple[int, int] = (8, 6), left_root=None) -> PosedPair:
    """Skin both hands straight from a flat 109-vector (pose not canonicalised)."""
    x = np.asarray(x, dtype=np.float64)
    left_root = np.zeros(3) if left_root is None else np.asarray(left_root, dtype=np.float64)
    tl = hand_template("left", *tess)
    tr = hand_template("right", *tess)
    pl = pose_hand(x[LEFT_POSE], x[LEFT_SHAPE], left_root, tl)
    pr = pose_hand(x[RIGHT_POSE], x[RIGHT_SHAPE], left_root + x[REL_TRANS], tr)
    ml = HandMesh(pl.vertices, tl.faces, vertex_normals(pl.vertices, tl.faces), tl.bone)
    mr = HandMesh(pr.vertices, tr.faces, vertex_normals(pr.vertices, tr.faces), tr.bone)
    return PosedPair(pl, pr, ml, mr)


def state_vjp(pp: PosedPair, g_left: np.ndarray | None, g_right: np.ndarray | None) -> np.ndarray:
    """Pull vertex cotangents of both hands back onto the flat state vector."""
    grad = np.zeros(STATE_DIM)
    if g_left is not None:
        gp, gs, _ = pose_vjp(pp.left, g_left)
        grad[LEFT_POSE] += gp
        grad[LEFT_SHAPE] += gs
    if g_right is not None:
        gp, gs, gt = pose_vjp(pp.right, g_right)
        grad[RIGHT_POSE] += gp
        grad[RIGHT_SHAPE] += gs
        grad[REL_TRANS] += gt
    return grad


def _tess(tess):
    return tuple(tess) if tess is not None else (8, 6)


def collision_loss(state: TwoHandState, cfg: CollisionConfig = CollisionConfig(), tess=None) -> float:
    """Sum of the penalty over the left-right collision set; 0 when it is empty."""
    u, v = _tess(tess)
    ml, mr = skin(state.left, u, v), skin(state.right, u, v)
    cs = detect_collisions(ml, mr, cfg)
    if len(cs) == 0:
        return 0.0
    return float(np.sum(gmof(cs.distance_sq, cfg.rho, cfg.gmof_form, cfg.singular_eps)))


def collision_loss_vector(x: np.ndarray, cfg: CollisionConfig = CollisionConfig(), tess=None):
    """Loss, gradient over the flat vector, and the (frozen) pair set used."""
    pp = pose_state_vector(x, _tess(tess))
    cs = detect_collisions(pp.left_mesh, pp.right_mesh, cfg)
    if len(cs) == 0:
        return 0.0, np.zeros(STATE_DIM), cs
    loss, gl, gr = pair_loss(pp.left_mesh.vertices, pp.right_mesh.vertices, cs, cfg)
    return loss, state_vjp(pp, gl, gr), cs


def collision_loss_grad(state: TwoHandState, cfg: CollisionConfig = CollisionConfig(), tess=None) -> np.ndarray:
    """Gradient of the collision loss over the flat 109-vector, pair set held fixed."""
    return collision_loss_vector(state.to_vector(), cfg, tess)[1]


def fixed_set_loss(x: np.ndarray, cs: CollisionSet, cfg: CollisionConfig = CollisionConfig(), tess=None) -> float:
    """Loss of a flat vector over a given pair set (the finite-difference target)."""
    pp = pose_state_vector(x, _tess(tess))
    if len(cs) == 0:
        return 0.0
    x2 = _pair_distance_sq(pp.left_mesh.vertices, pp.right_mesh.vertices, cs.i, cs.j)
    return float(np.sum(gmof(x2, cfg.rho, cfg.gmof_form, cfg.singular_eps)))


# ---------------------------------------------------------------------------
# penetration depth


def _closest_on_triangles(p, a, b, c):
    """Closest points on triangles (a, b, c) to points p; all (K, 3)."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
        out = a + ab * v[:, None] + ac * w[:, None]
        # edge regions
        t_ab = d1 / (d1 - d3)
        e_ab = a + ab * t_ab[:, None]
        t_ac = d2 / (d2 - d6)
        e_ac = a + ac * t_ac[:, None]
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        e_bc = b + (c - b) * t_bc[:, None]
    regions = [
        (vc <= 0) & (d1 >= 0) & (d3 <= 0), e_ab,
        (vb <= 0) & (d2 >= 0) & (d6 <= 0), e_ac,
        (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), e_bc,
    ]
    for k in (4, 2, 0):
        out = np.where(regions[k][:, None], regions[k + 1], out)
    corner = [((d1 <= 0) & (d2 <= 0), a), ((d3 >= 0) & (d4 <= d3), b), ((d6 >= 0) & (d5 <= d6), c)]
    for mask, pt in reversed(corner):
        out = np.where(mask[:, None], pt, out)
    return out


def _incident_faces(n_vertices: int, faces: np.ndarray) -> np.ndarray:
    flat = faces.reshape(-1)
    order = np.argsort(flat, kind="stable")
    counts = np.bincount(flat, minlength=n_vertices)
    width = max(int(counts.max()), 1) if len(flat) else 1
    out = np.full((n_vertices, width), -1, dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    pos = np.arange(len(flat)) - np.repeat(starts, counts)
    out[flat[order], pos] = order // 3
    return out


def _inside_depths(points: np.ndarray, mesh: HandMesh) -> np.ndarray:
    """Nearest-vertex distance for points classified inside ``mesh``, 0 elsewhere.

    A point is inside when it lies strictly behind the plane of the nearest face
    among the faces incident to its nearest mesh vertex.
    """
    if len(points) == 0 or len(mesh.vertices) == 0 or len(mesh.faces) == 0:
        return np.zeros(len(points))
    dist, idx = cKDTree(mesh.vertices).query(points)
    inc = _incident_faces(len(mesh.vertices), mesh.faces)[idx]  # (P, K)
    P, K = inc.shape
    valid = inc >= 0
    f = mesh.faces[np.where(valid, inc, 0)].reshape(-1, 3)
    a, b, c = mesh.vertices[f[:, 0]], mesh.vertices[f[:, 1]], mesh.vertices[f[:, 2]]
    pts = np.repeat(points, K, axis=0)
    closest = _closest_on_triangles(pts, a, b, c)
    d = np.sum((pts - closest) ** 2, axis=1).reshape(P, K)
    d = np.where(valid, d, np.inf)
    best = np.argmin(d, axis=1)
    sel = np.arange(P) * K + best
    n = np.cross(b[sel] - a[sel], c[sel] - a[sel])
    side = np.einsum("ij,ij->i", points - a[sel], n)
    return np.where(side < 0, dist, 0.0)


def penetration_depth(mesh_a: HandMesh, mesh_b: HandMesh) -> float:
    """Largest nearest-vertex distance of any vertex of one mesh found inside the other (mm)."""
    if len(mesh_a.vertices) == 0 or len(mesh_b.vertices) == 0 or _boxes_apart(mesh_a.vertices, mesh_b.vertices, 0.0):
        return 0.0
    da = _inside_depths(mesh_a.vertices, mesh_b)
    db = _inside_depths(mesh_b.vertices, mesh_a)
    out = 0.0
    if len(da):
        out = max(out, float(da.max()))
    if len(db):
        out = max(out, float(db.max()))
    return out


def state_penetration_depth(state: TwoHandState, tess=None) -> float:
    u, v = _tess(tess)
    return penetration_depth(skin(state.left, u, v), skin(state.right, u, v))
