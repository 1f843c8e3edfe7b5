"""Procedural two-hand model.

A 16-joint kinematic tree (wrist + 3 joints for each of 5 fingers) with a
capsule-tessellated template mesh and one-hot linear blend skinning.  The right
hand is authored directly; the left hand is its x-mirror (template, offsets and
face winding).

Coordinates are millimetres.  In the right hand's rest frame the fingers point
along +y, the thumb sits on the +x side and the palm faces +z, so a positive
rotation about a finger joint's local x axis flexes it toward the palm.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

N_JOINTS = 16
N_KEYPOINTS = 21
POSE_DIM = 3 * N_JOINTS
SHAPE_DIM = 5
SHAPE_NAMES = ("finger_length", "finger_radius", "palm_width", "palm_length", "palm_thickness")
SHAPE_RANGE = (0.5, 2.0)
CHIRALITIES = ("left", "right")

# Finger order follows MANO: index, middle, pinky, ring, thumb.
FINGER_NAMES = ("index", "middle", "pinky", "ring", "thumb")
# base (mm, palm-scaled), direction, segment lengths (MCP-PIP, PIP-DIP, DIP-tip), capsule radius
_FINGERS = {
    "index": ((22.0, 88.0, 0.0), (0.1, 1.0, 0.0), (38.0, 24.0, 20.0), 8.5),
    "middle": ((4.0, 92.0, 0.0), (0.0, 1.0, 0.0), (42.0, 27.0, 21.0), 8.5),
    "pinky": ((-30.0, 78.0, 0.0), (-0.2, 1.0, 0.0), (30.0, 19.0, 18.0), 7.5),
    "ring": ((-14.0, 88.0, 0.0), (-0.1, 1.0, 0.0), (39.0, 25.0, 20.0), 8.0),
    "thumb": ((24.0, 22.0, 2.0), (0.75, 0.65, 0.05), (34.0, 30.0, 24.0), 9.5),
}
# palm capsules, all skinned to the wrist: (start, end, radius) at unit shape
_PALM_RADIUS = 10.0
_PALM_CAPSULES = (
    ((14.0, 14.0, 0.0), (22.0, 88.0, 0.0)),
    ((3.0, 14.0, 0.0), (4.0, 92.0, 0.0)),
    ((-8.0, 14.0, 0.0), (-14.0, 88.0, 0.0)),
    ((-18.0, 14.0, 0.0), (-30.0, 78.0, 0.0)),
    ((2.0, 8.0, 0.0), (24.0, 22.0, 2.0)),
)

PARENTS = np.array([-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 0, 10, 11, 0, 13, 14])
DISTAL_JOINTS = np.array([3, 6, 9, 12, 15])


@dataclass(frozen=True)
class HandParams:
    chirality: str
    pose: np.ndarray
    shape: np.ndarray
    root_translation: np.ndarray

    def __post_init__(self):
        if self.chirality not in CHIRALITIES:
            raise ValueError(f"chirality must be one of {CHIRALITIES}, got {self.chirality!r}")
        for name, n in (("pose", POSE_DIM), ("shape", SHAPE_DIM), ("root_translation", 3)):
            arr = np.array(getattr(self, name), dtype=np.float64).reshape(-1)
            if arr.shape != (n,):
                raise ValueError(f"{name} must have {n} entries, got {arr.size}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @classmethod
    def neutral(cls, chirality: str = "right") -> "HandParams":
        return cls(chirality, np.zeros(POSE_DIM), np.ones(SHAPE_DIM), np.zeros(3))

    def replace(self, **changes) -> "HandParams":
        fields = dict(chirality=self.chirality, pose=self.pose, shape=self.shape,
                      root_translation=self.root_translation)
        fields.update(changes)
        return HandParams(**fields)

    def equals(self, other: "HandParams") -> bool:
        return (self.chirality == other.chirality
                and np.array_equal(self.pose, other.pose)
                and np.array_equal(self.shape, other.shape)
                and np.array_equal(self.root_translation, other.root_translation))


@dataclass(frozen=True)
class KinematicTree:
    """Rest rig of one hand.

    A joint offset is ``finger_length * offset_len + (w, l, t) * offset_palm``;
    fingertip offsets scale with finger length only.
    """

    chirality: str
    parents: np.ndarray
    offset_len: np.ndarray  # (16, 3)
    offset_palm: np.ndarray  # (16, 3)
    tip_offsets: np.ndarray  # (5, 3), in the distal joint frame
    radii: np.ndarray  # (16,) finger-bone capsule radius; wrist entry is the palm radius

    def offsets(self, shape: np.ndarray) -> np.ndarray:
        palm_scale = shape[2:5]
        return shape[0] * self.offset_len + palm_scale * self.offset_palm

    def rest_joints(self, shape: np.ndarray) -> np.ndarray:
        offs = self.offsets(shape)
        joints = np.zeros((N_JOINTS, 3))
        for j in range(1, N_JOINTS):
            joints[j] = joints[PARENTS[j]] + offs[j]
        return joints


@dataclass(frozen=True)
class HandTemplate:
    """Tessellated template.  Vertex position in its bone frame is linear in shape:
    ``finger_length * A + finger_radius * B + (w, l, t) * P``."""

    tree: KinematicTree
    faces: np.ndarray  # (M, 3)
    bone: np.ndarray  # (N,)
    A: np.ndarray
    B: np.ndarray
    P: np.ndarray
    capsule_u: int
    capsule_v: int
    vertex_faces: np.ndarray = field(repr=False)  # (N, K) incident faces, padded with -1

    @property
    def n_vertices(self) -> int:
        return len(self.bone)

    def local(self, shape: np.ndarray) -> np.ndarray:
        return shape[0] * self.A + shape[1] * self.B + shape[2:5] * self.P


@dataclass(frozen=True)
class HandMesh:
    vertices: np.ndarray
    faces: np.ndarray
    vertex_normals: np.ndarray
    bone_assignment: np.ndarray


# ---------------------------------------------------------------------------
# rotations


def _skew(w: np.ndarray) -> np.ndarray:
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def _rodrigues_coeffs(theta: np.ndarray):
    """sin(t)/t, (1-cos t)/t^2 and their derivatives divided by t, stable near 0."""
    small = theta < 1e-4
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, np.sin(t) / t)
    b = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, (1.0 - np.cos(t)) / (t * t))
    da = np.where(small, -1.0 / 3.0 + t2 / 30.0, (t * np.cos(t) - np.sin(t)) / t**3)
    db = np.where(small, -1.0 / 12.0 + t2 / 180.0, (t * np.sin(t) - 2.0 * (1.0 - np.cos(t))) / t**4)
    return a, b, da, db


def axis_angle_to_matrix(aa) -> np.ndarray:
    """Rodrigues' formula.  Accepts (..., 3) and returns (..., 3, 3)."""
    w = np.asarray(aa, dtype=np.float64)
    theta = np.sqrt(np.sum(w * w, axis=-1))
    a, b, _, _ = _rodrigues_coeffs(theta)
    K = _skew(w)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def axis_angle_jacobian(aa) -> np.ndarray:
    """dR/dw_k for (..., 3) input; returns (..., 3, 3, 3) indexed [..., k, row, col]."""
    w = np.asarray(aa, dtype=np.float64)
    theta = np.sqrt(np.sum(w * w, axis=-1))
    a, b, da, db = _rodrigues_coeffs(theta)
    K = _skew(w)
    K2 = K @ K
    E = _skew(np.eye(3))  # E[k] = skew(e_k)
    out = np.empty(w.shape[:-1] + (3, 3, 3))
    for k in range(3):
        Ek = E[k]
        wk = w[..., k][..., None, None]
        out[..., k, :, :] = (a[..., None, None] * Ek
                             + b[..., None, None] * (Ek @ K + K @ Ek)
                             + da[..., None, None] * wk * K
                             + db[..., None, None] * wk * K2)
    return out


def canonicalize_axis_angle(aa) -> np.ndarray:
    """Map every 3-vector to the equivalent rotation vector with norm <= pi.

    At exactly pi both antipodal vectors are valid; the one whose first nonzero
    component is positive is kept.
    """
    w = np.array(aa, dtype=np.float64).reshape(-1, 3)
    theta = np.linalg.norm(w, axis=1)
    for i in np.flatnonzero(theta >= np.pi):
        t = theta[i]
        axis = w[i] / t
        t = np.fmod(t, 2.0 * np.pi)
        if t > np.pi:
            t -= 2.0 * np.pi
        v = axis * t
        if abs(abs(t) - np.pi) < 1e-15:
            nz = v[np.flatnonzero(v)[0]]
            if nz < 0:
                v = -v
        w[i] = v
    return w.reshape(np.shape(aa))


def mirror_axis_angle(aa) -> np.ndarray:
    """Conjugate a rotation by the x-reflection."""
    w = np.array(aa, dtype=np.float64).reshape(-1, 3)
    w[:, 1:] *= -1.0
    return w.reshape(np.shape(aa))


def mirror_params(params: HandParams) -> HandParams:
    other = "left" if params.chirality == "right" else "right"
    root = params.root_translation.copy()
    root[0] = -root[0]
    return HandParams(other, mirror_axis_angle(params.pose), params.shape.copy(), root)


def canonical_params(params: HandParams) -> HandParams:
    return params.replace(pose=canonicalize_axis_angle(params.pose))


# ---------------------------------------------------------------------------
# rig and template


def _frame(u: np.ndarray):
    ref = np.array([0.0, 0.0, 1.0]) if abs(u[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(u, ref)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(u, e1)
    return e1, e2


def _capsule(U: int, V: int):
    """Unit capsule topology and parametric coordinates.

    Returns per-vertex (end, sin_phi, cos_phi, alpha) plus pole flags and faces,
    where end is 0 for the start cap and 1 for the end cap.
    """
    half = V // 2
    phis = [-np.pi / 2 + (k + 1) * (np.pi / 2) / half for k in range(half)]
    rings = [(0, p) for p in phis] + [(1, -p) for p in reversed(phis)]
    verts = []
    for end, phi in rings:
        for m in range(U):
            verts.append((end, np.sin(phi), np.cos(phi), 2 * np.pi * m / U))
    verts.append((0, -1.0, 0.0, 0.0))
    verts.append((1, 1.0, 0.0, 0.0))
    south, north = len(verts) - 2, len(verts) - 1
    faces = []
    for k in range(V - 1):
        for m in range(U):
            a = k * U + m
            b = k * U + (m + 1) % U
            c = (k + 1) * U + m
            d = (k + 1) * U + (m + 1) % U
            faces.append((a, b, d))
            faces.append((a, d, c))
    for m in range(U):
        faces.append((south, (m + 1) % U, m))
        top = (V - 1) * U
        faces.append((north, top + m, top + (m + 1) % U))
    return verts, faces


def _tessellate_capsule(start, end, radius, U, V):
    """Positions of a capsule split into (axial, radial) parts relative to ``start``."""
    start = np.asarray(start, float)
    axis = np.asarray(end, float) - start
    length = np.linalg.norm(axis)
    u = axis / length
    e1, e2 = _frame(u)
    verts, faces = _capsule(U, V)
    axial = np.zeros((len(verts), 3))
    radial = np.zeros((len(verts), 3))
    for i, (which, s, c, alpha) in enumerate(verts):
        axial[i] = which * length * u
        radial[i] = radius * (s * u + c * (np.cos(alpha) * e1 + np.sin(alpha) * e2))
    # winding check: outward normal of the first side face
    f = faces[0]
    pos = axial + radial
    n = np.cross(pos[f[1]] - pos[f[0]], pos[f[2]] - pos[f[0]])
    centre = start + 0.5 * axis
    if np.dot(n, pos[f[0]] + start - centre) < 0:
        faces = [(a, c_, b) for a, b, c_ in faces]
    return axial, radial, np.asarray(faces, dtype=np.int64)


@lru_cache(maxsize=None)
def kinematic_tree(chirality: str = "right") -> KinematicTree:
    offset_len = np.zeros((N_JOINTS, 3))
    offset_palm = np.zeros((N_JOINTS, 3))
    tips = np.zeros((5, 3))
    radii = np.full(N_JOINTS, _PALM_RADIUS)
    for f, name in enumerate(FINGER_NAMES):
        base, direction, lengths, radius = _FINGERS[name]
        d = np.asarray(direction) / np.linalg.norm(direction)
        j1 = 1 + 3 * f
        offset_palm[j1] = base
        offset_len[j1 + 1] = d * lengths[0]
        offset_len[j1 + 2] = d * lengths[1]
        tips[f] = d * lengths[2]
        radii[j1:j1 + 3] = radius
    if chirality == "left":
        for arr in (offset_len, offset_palm, tips):
            arr[:, 0] *= -1.0
    elif chirality != "right":
        raise ValueError(f"unknown chirality {chirality!r}")
    for arr in (offset_len, offset_palm, tips, radii):
        arr.flags.writeable = False
    return KinematicTree(chirality, PARENTS, offset_len, offset_palm, tips, radii)


@lru_cache(maxsize=None)
def hand_template(chirality: str = "right", capsule_u: int = 8, capsule_v: int = 6) -> HandTemplate:
    if capsule_u < 3 or capsule_v < 2 or capsule_v % 2:
        raise ValueError("capsule_u must be >= 3 and capsule_v an even number >= 2")
    tree = kinematic_tree("right")
    A, B, P, bones, faces = [], [], [], [], []
    n = 0

    def add(axial, radial, palm, bone, f):
        nonlocal n
        A.append(axial)
        B.append(radial)
        P.append(palm)
        bones.append(np.full(len(axial), bone))
        faces.append(f + n)
        n += len(axial)

    for start, end in _PALM_CAPSULES:
        axial, radial, f = _tessellate_capsule(start, end, _PALM_RADIUS, capsule_u, capsule_v)
        zeros = np.zeros_like(axial)
        add(zeros, zeros, np.asarray(start) + axial + radial, 0, f)
    for fi in range(5):
        j1 = 1 + 3 * fi
        seg = [tree.offset_len[j1 + 1], tree.offset_len[j1 + 2], tree.tip_offsets[fi]]
        for k in range(3):
            axial, radial, f = _tessellate_capsule(np.zeros(3), seg[k], tree.radii[j1 + k],
                                                  capsule_u, capsule_v)
            add(axial, radial, np.zeros_like(axial), j1 + k, f)
    A, B, P = (np.concatenate(x) for x in (A, B, P))
    faces = np.concatenate(faces)
    bone = np.concatenate(bones)
    if chirality == "left":
        for arr in (A, B, P):
            arr[:, 0] *= -1.0
        faces = faces[:, ::-1].copy()
        tree = kinematic_tree("left")
    elif chirality != "right":
        raise ValueError(f"unknown chirality {chirality!r}")
    vf = _vertex_faces(len(bone), faces)
    for arr in (A, B, P, faces, bone, vf):
        arr.flags.writeable = False
    return HandTemplate(tree, faces, bone, A, B, P, capsule_u, capsule_v, vf)


def _vertex_faces(n_vertices: int, faces: np.ndarray) -> np.ndarray:
    lists = [[] for _ in range(n_vertices)]
    for fi, f in enumerate(faces):
        for v in f:
            lists[v].append(fi)
    width = max(len(x) for x in lists)
    out = np.full((n_vertices, width), -1, dtype=np.int64)
    for v, x in enumerate(lists):
        out[v, :len(x)] = x
    return out


# ---------------------------------------------------------------------------
# kinematics and skinning


@dataclass
class Posed:
    """Forward pass intermediates, kept for the vector-Jacobian product."""

    template: HandTemplate
    pose: np.ndarray  # (16, 3)
    shape: np.ndarray
    local_rot: np.ndarray  # (16, 3, 3)
    world_rot: np.ndarray  # (16, 3, 3)
    world_pos: np.ndarray  # (16, 3)
    offsets: np.ndarray  # (16, 3)
    local_verts: np.ndarray  # (N, 3)
    vertices: np.ndarray  # (N, 3)

    def keypoints(self) -> np.ndarray:
        tips = self.template.tree.tip_offsets * self.shape[0]
        tip_pos = self.world_pos[DISTAL_JOINTS] + np.einsum(
            "kij,kj->ki", self.world_rot[DISTAL_JOINTS], tips)
        return np.concatenate([self.world_pos, tip_pos])


def pose_hand(pose, shape, root, template: HandTemplate) -> Posed:
    """Forward kinematics + one-hot skinning on raw arrays (pose need not be canonical)."""
    pose = np.asarray(pose, dtype=np.float64).reshape(N_JOINTS, 3)
    shape = np.asarray(shape, dtype=np.float64)
    tree = template.tree
    local_rot = axis_angle_to_matrix(pose)
    offs = tree.offsets(shape)
    world_rot = np.empty_like(local_rot)
    world_pos = np.empty((N_JOINTS, 3))
    world_rot[0] = local_rot[0]
    world_pos[0] = root
    for j in range(1, N_JOINTS):
        p = PARENTS[j]
        world_rot[j] = world_rot[p] @ local_rot[j]
        world_pos[j] = world_pos[p] + world_rot[p] @ offs[j]
    local = template.local(shape)
    verts = np.einsum("nij,nj->ni", world_rot[template.bone], local) + world_pos[template.bone]
    return Posed(template, pose, shape, local_rot, world_rot, world_pos, offs, local, verts)


def pose_vjp(posed: Posed, grad_vertices: np.ndarray, grad_keypoints: np.ndarray | None = None):
    """Pull a vertex-space cotangent back to (pose, shape, root) cotangents."""
    tpl = posed.template
    tree = tpl.tree
    g = np.asarray(grad_vertices, dtype=np.float64)
    gR = np.zeros((N_JOINTS, 3, 3))
    gt = np.zeros((N_JOINTS, 3))
    np.add.at(gR, tpl.bone, g[:, :, None] * posed.local_verts[:, None, :])
    np.add.at(gt, tpl.bone, g)
    # d local / d shape, pulled through the bone rotation
    g_local = np.einsum("nji,nj->ni", posed.world_rot[tpl.bone], g)
    g_shape = np.zeros(SHAPE_DIM)
    g_shape[0] = np.sum(g_local * tpl.A)
    g_shape[1] = np.sum(g_local * tpl.B)
    g_shape[2:5] = np.sum(g_local * tpl.P, axis=0)
    if grad_keypoints is not None:
        gk = np.asarray(grad_keypoints, dtype=np.float64)
        gt += gk[:N_JOINTS]
        tips = tree.tip_offsets * posed.shape[0]
        for k, j in enumerate(DISTAL_JOINTS):
            gt[j] += gk[N_JOINTS + k]
            gR[j] += np.outer(gk[N_JOINTS + k], tips[k])
            g_shape[0] += posed.world_rot[j].T @ gk[N_JOINTS + k] @ tree.tip_offsets[k]
    g_local_rot = np.zeros((N_JOINTS, 3, 3))
    for j in range(N_JOINTS - 1, 0, -1):
        p = PARENTS[j]
        Rp = posed.world_rot[p]
        # world_pos[j] = world_pos[p] + Rp @ offs[j]
        gt[p] += gt[j]
        gR[p] += np.outer(gt[j], posed.offsets[j])
        g_off = Rp.T @ gt[j]
        g_shape[0] += g_off @ tree.offset_len[j]
        g_shape[2:5] += g_off * tree.offset_palm[j]
        # world_rot[j] = Rp @ local_rot[j]
        gR[p] += gR[j] @ posed.local_rot[j].T
        g_local_rot[j] = Rp.T @ gR[j]
    g_local_rot[0] = gR[0]
    J = axis_angle_jacobian(posed.pose)  # (16, 3, 3, 3)
    g_pose = np.einsum("jkab,jab->jk", J, g_local_rot).reshape(-1)
    return g_pose, g_shape, gt[0].copy()


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals, unit length."""
    v0, v1, v2 = vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]
    fn = np.cross(v1 - v0, v2 - v0)
    acc = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(acc, faces[:, k], fn)
    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    norm[norm == 0] = 1.0
    return acc / norm


def forward_kinematics(params: HandParams, tree: KinematicTree | None = None):
    """World rotations (16,3,3), joint positions (16,3) and 21 keypoints (16 joints + 5 tips)."""
    if tree is None:
        tree = kinematic_tree(params.chirality)
    pose = params.pose.reshape(N_JOINTS, 3)
    local_rot = axis_angle_to_matrix(pose)
    offs = tree.offsets(params.shape)
    world_rot = np.empty_like(local_rot)
    world_pos = np.empty((N_JOINTS, 3))
    world_rot[0] = local_rot[0]
    world_pos[0] = params.root_translation
    for j in range(1, N_JOINTS):
        p = tree.parents[j]
        world_rot[j] = world_rot[p] @ local_rot[j]
        world_pos[j] = world_pos[p] + world_rot[p] @ offs[j]
    tips = tree.tip_offsets * params.shape[0]
    tip_pos = world_pos[DISTAL_JOINTS] + np.einsum("kij,kj->ki", world_rot[DISTAL_JOINTS], tips)
    return world_rot, world_pos, np.concatenate([world_pos, tip_pos])


def keypoints(params: HandParams) -> np.ndarray:
    return forward_kinematics(params)[2]


def skin(params: HandParams, capsule_u: int = 8, capsule_v: int = 6) -> HandMesh:
    tpl = hand_template(params.chirality, capsule_u, capsule_v)
    posed = pose_hand(params.pose, params.shape, params.root_translation, tpl)
    normals = vertex_normals(posed.vertices, tpl.faces)
    return HandMesh(posed.vertices, tpl.faces, normals, tpl.bone)


def template_mesh(chirality: str = "right", capsule_u: int = 8, capsule_v: int = 6) -> HandMesh:
    """Rest mesh at unit shape, built directly from the rig without posing."""
    tpl = hand_template(chirality, capsule_u, capsule_v)
    shape = np.ones(SHAPE_DIM)
    joints = tpl.tree.rest_joints(shape)
    verts = tpl.local(shape) + joints[tpl.bone]
    return HandMesh(verts, tpl.faces, vertex_normals(verts, tpl.faces), tpl.bone)


def write_obj(mesh: HandMesh, path) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> tuple[np.ndarray, np.ndarray]:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    return np.asarray(verts), np.asarray(faces, dtype=np.int64)
