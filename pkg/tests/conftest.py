"""Shared fixtures and small independent geometry helpers for the tests."""

from __future__ import annotations

import numpy as np
import pytest
from scipy.spatial import ConvexHull

from twohand.hand import HandMesh, vertex_normals
from twohand.synth import SCENARIOS, load_scenario, perturb_until_penetration


def sphere_mesh(center, radius: float, n: int = 400) -> HandMesh:
    """Fibonacci-point sphere triangulated by its convex hull, faces wound outward."""
    k = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * k / n)
    theta = np.pi * (1 + 5 ** 0.5) * k
    pts = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], 1)
    faces = ConvexHull(pts).simplices.copy()
    for f in faces:
        a, b, c = pts[f]
        if np.dot(np.cross(b - a, c - a), a + b + c) < 0:
            f[1], f[2] = f[2], f[1]
    verts = np.asarray(center, dtype=np.float64) + radius * pts
    return HandMesh(verts, faces, vertex_normals(verts, faces), np.zeros(n, dtype=np.int64))


def patch_mesh(z: float, flip: bool = False, size: float = 10.0, n: int = 6) -> HandMesh:
    """Flat square grid in the plane at height z with normals +z (or -z when flipped)."""
    xs = np.linspace(0, size, n)
    X, Y = np.meshgrid(xs, xs)
    verts = np.stack([X.ravel(), Y.ravel(), np.full(n * n, z)], 1)
    faces = []
    for r in range(n - 1):
        for c in range(n - 1):
            a, b, d, e = r * n + c, r * n + c + 1, (r + 1) * n + c, (r + 1) * n + c + 1
            faces += [(a, b, e), (a, e, d)]
    faces = np.asarray(faces)
    if flip:
        faces = faces[:, ::-1].copy()
    return HandMesh(verts, faces, vertex_normals(verts, faces), np.zeros(n * n, dtype=np.int64))


def penetrating_states(n: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    return [perturb_until_penetration(load_scenario(SCENARIOS[k % len(SCENARIOS)]).state, rng)[0]
            for k in range(n)]


def colliding_states(n: int, seed: int = 0):
    """Penetrating states whose facing-pair set is non-empty (some deep overlaps have none)."""
    from twohand.collision import collision_loss_vector
    out = []
    rng = np.random.default_rng(seed)
    i = 0
    while len(out) < n:
        st = perturb_until_penetration(load_scenario(SCENARIOS[i % len(SCENARIOS)]).state, rng)[0]
        i += 1
        if len(collision_loss_vector(st.to_vector())[2]):
            out.append(st)
    return out


@pytest.fixture(scope="session")
def pen_states():
    return colliding_states(20, 11)


@pytest.fixture(scope="session")
def small_corpus():
    from twohand.synth import SynthConfig, make_records
    return make_records(range(40), SynthConfig(seed=7))
