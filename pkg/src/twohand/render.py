"""Orthographic rasterizer for keypoint, silhouette and depth priors."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .hand import HandMesh


@dataclass(frozen=True)
class Camera:
    """Orthographic camera.

    ``u`` and ``v`` span the view plane, ``view`` is the viewing direction.  The
    window is centred on ``center`` and spans ``extent`` mm; pixel (col, row) has
    its centre at (col + 0.5, row + 0.5).  Rows grow downward, against ``v``.
    Depth is measured along ``view`` from the plane through ``eye``.
    """

    u: tuple = (1.0, 0.0, 0.0)
    v: tuple = (0.0, 1.0, 0.0)
    view: tuple = (0.0, 0.0, -1.0)
    center: tuple = (0.0, 0.0, 0.0)
    extent: tuple = (200.0, 200.0)
    resolution: tuple = (64, 64)
    eye_depth: float = 0.0

    def __post_init__(self):
        basis = np.array([self.u, self.v, self.view], dtype=np.float64)
        if not np.allclose(basis @ basis.T, np.eye(3), atol=1e-9):
            raise ValueError("camera basis must be orthonormal")
        if min(self.resolution) < 8:
            raise ValueError("resolution must be at least 8")
        if min(self.extent) <= 0:
            raise ValueError("window extent must be positive")

    def affine(self) -> np.ndarray:
        """2x4 world-to-pixel matrix acting on homogeneous points."""
        u, v, c = (np.asarray(a, dtype=np.float64) for a in (self.u, self.v, self.center))
        nx, ny = self.resolution
        sx, sy = nx / self.extent[0], ny / self.extent[1]
        M = np.zeros((2, 4))
        M[0, :3] = sx * u
        M[0, 3] = -sx * (u @ c) + nx / 2.0
        M[1, :3] = -sy * v
        M[1, 3] = sy * (v @ c) + ny / 2.0
        return M

    def depth(self, points: np.ndarray) -> np.ndarray:
        return points @ np.asarray(self.view, dtype=np.float64) - self.eye_depth


@dataclass(frozen=True)
class PriorMaps:
    keypoints2d: tuple  # per hand (21, 2)
    silhouettes: tuple  # per hand bool (ny, nx)
    depth: np.ndarray  # (ny, nx), +inf where empty


def project_keypoints(points3d, camera: Camera) -> np.ndarray:
    """Orthographic projection to (col, row) pixel coordinates; not clamped."""
    p = np.asarray(points3d, dtype=np.float64)
    u, v, c = (np.asarray(a, dtype=np.float64) for a in (camera.u, camera.v, camera.center))
    nx, ny = camera.resolution
    d = p - c
    col = (d @ u) / camera.extent[0] * nx + nx / 2.0
    row = ny / 2.0 - (d @ v) / camera.extent[1] * ny
    return np.stack([col, row], axis=-1)


def rasterize(mesh: HandMesh, camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Silhouette (bool) and nearest depth per pixel, sampled at pixel centres.

    Coverage uses inclusive edge functions; zero-area triangles are skipped.
    Faces are processed in batches of similar screen-space size, each face
    testing every pixel centre inside its clipped bounding box.
    """
    nx, ny = camera.resolution
    sil = np.zeros(ny * nx, dtype=bool)
    depth = np.full(ny * nx, np.inf)
    if len(mesh.vertices) == 0 or len(mesh.faces) == 0:
        return sil.reshape(ny, nx), depth.reshape(ny, nx)
    pix = project_keypoints(mesh.vertices, camera)
    z = camera.depth(mesh.vertices)
    f = np.asarray(mesh.faces)
    x0, y0 = pix[f[:, 0], 0], pix[f[:, 0], 1]
    x1, y1 = pix[f[:, 1], 0], pix[f[:, 1], 1]
    x2, y2 = pix[f[:, 2], 0], pix[f[:, 2], 1]
    area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
    c0 = np.maximum(np.floor(np.minimum(np.minimum(x0, x1), x2) - 0.5), 0)
    c1 = np.minimum(np.ceil(np.maximum(np.maximum(x0, x1), x2) - 0.5), nx - 1)
    r0 = np.maximum(np.floor(np.minimum(np.minimum(y0, y1), y2) - 0.5), 0)
    r1 = np.minimum(np.ceil(np.maximum(np.maximum(y0, y1), y2) - 0.5), ny - 1)
    keep = (area != 0.0) & (c0 <= c1) & (r0 <= r1)
    w = (c1 - c0 + 1).astype(np.int64)
    h = (r1 - r0 + 1).astype(np.int64)
    size = np.where(keep, np.maximum(w, h), 0)
    # bucket by box side rounded up to a power of two
    bucket = np.ceil(np.log2(np.maximum(size, 1))).astype(np.int64)
    zf = z[f]
    for bk in np.unique(bucket[keep]):
        idx = np.flatnonzero(keep & (bucket == bk))
        K = 1 << int(bk)
        off = np.arange(K)
        cols = c0[idx, None, None] + off[None, None, :]
        rows = r0[idx, None, None] + off[None, :, None]
        valid = (cols <= c1[idx, None, None]) & (rows <= r1[idx, None, None])
        px, py = cols + 0.5, rows + 0.5
        X0, Y0, X1, Y1, X2, Y2, A = (v[idx, None, None] for v in (x0, y0, x1, y1, x2, y2, area))
        w0 = ((X1 - px) * (Y2 - py) - (X2 - px) * (Y1 - py)) / A
        w1 = ((X2 - px) * (Y0 - py) - (X0 - px) * (Y2 - py)) / A
        w2 = 1.0 - w0 - w1
        inside = valid & (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        zz = w0 * zf[idx, 0, None, None] + w1 * zf[idx, 1, None, None] + w2 * zf[idx, 2, None, None]
        # interpolation can undershoot the smallest vertex depth by rounding
        zz = np.maximum(zz, zf[idx].min(axis=1)[:, None, None])
        flat = (rows * nx + cols).astype(np.int64)
        hit = flat[inside]
        sil[hit] = True
        np.minimum.at(depth, hit, zz[inside])
    return sil.reshape(ny, nx), depth.reshape(ny, nx)


def silhouette_iou(mask_a, mask_b) -> float:
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def fit_camera(points: np.ndarray, resolution: int = 64, fit_margin: float = 0.9) -> Camera:
    """Canonical camera: looks down -z, square window fitting the points' xy box to ``fit_margin``."""
    lo, hi = points.min(0), points.max(0)
    center = 0.5 * (lo + hi)
    span = float(max(hi[0] - lo[0], hi[1] - lo[1], 1e-6)) / fit_margin
    # depth origin 100 mm in front of the nearest point
    eye = -(hi[2] + 100.0)
    return Camera(center=(float(center[0]), float(center[1]), 0.0), extent=(span, span),
                  resolution=(resolution, resolution), eye_depth=eye)


def render_priors(meshes, keypoints3d, camera: Camera) -> PriorMaps:
    sils, depth = [], None
    for m in meshes:
        s, d = rasterize(m, camera)
        sils.append(s)
        depth = d if depth is None else np.minimum(depth, d)
    kps = tuple(project_keypoints(k, camera) for k in keypoints3d)
    return PriorMaps(kps, tuple(sils), depth)


def keypoint_heatmap(keypoints2d, resolution: tuple, sigma: float = 1.5) -> np.ndarray:
    """Sum of isotropic Gaussian blobs at the keypoints, clipped to [0, 1]."""
    nx, ny = resolution
    px, py = np.meshgrid(np.arange(nx) + 0.5, np.arange(ny) + 0.5)
    out = np.zeros((ny, nx))
    for x, y in np.asarray(keypoints2d).reshape(-1, 2):
        out += np.exp(-((px - x) ** 2 + (py - y) ** 2) / (2 * sigma * sigma))
    return np.minimum(out, 1.0)


def write_pgm(path, grid: np.ndarray, depth_range: tuple | None = None) -> None:
    """Binary PGM.  Boolean grids become 8-bit 0/255.  Depth grids are quantised
    to 16 bits over ``depth_range`` (1..65535, 0 = empty); the range is recorded
    in a comment line."""
    grid = np.asarray(grid)
    h, w = grid.shape
    if grid.dtype == bool:
        header = f"P5\n{w} {h}\n255\n".encode()
        body = (grid.astype(np.uint8) * 255).tobytes()
    else:
        finite = np.isfinite(grid)
        if depth_range is None:
            depth_range = (float(grid[finite].min()), float(grid[finite].max())) if finite.any() else (0.0, 1.0)
        lo, hi = depth_range
        scale = (hi - lo) if hi > lo else 1.0
        q = np.zeros(grid.shape, dtype=np.int64)
        q[finite] = 1 + np.rint(np.clip((grid[finite] - lo) / scale, 0, 1) * 65534).astype(np.int64)
        header = f"P5\n# depth_mm {lo!r} {hi!r} empty=0\n{w} {h}\n65535\n".encode()
        body = q.astype(">u2").tobytes()
    Path(path).write_bytes(header + body)


def read_pgm(path):
    """Inverse of :func:`write_pgm`: bool grid for 8-bit files, depth (mm, inf = empty) for 16-bit."""
    data = Path(path).read_bytes()
    tokens, pos, depth_range = [], 0, None
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            end = data.index(b"\n", pos)
            parts = data[pos + 1:end].split()
            if parts and parts[0] == b"depth_mm":
                depth_range = (float(parts[1]), float(parts[2]))
            pos = end + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    pos += 1
    if tokens[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval == 255:
        return np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w) > 0
    q = np.frombuffer(data[pos:pos + 2 * w * h], dtype=">u2").reshape(h, w).astype(np.int64)
    lo, hi = depth_range if depth_range else (0.0, 1.0)
    out = np.full((h, w), np.inf)
    m = q > 0
    out[m] = lo + (q[m] - 1) / 65534 * (hi - lo)
    return out
