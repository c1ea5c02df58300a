"""Procedural meshes used as fixtures, demo objects and test oracles."""
from __future__ import annotations

import numpy as np

from .geometry import TriangleMesh


def box(size=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Axis-aligned box, 8 vertices and 12 outward-facing triangles."""
    sx, sy, sz = np.asarray(size, float) / 2
    V = np.array([[x, y, z] for x in (-sx, sx) for y in (-sy, sy) for z in (-sz, sz)]) + center
    # vertex index = 4*ix + 2*iy + iz
    F = [
        [0, 1, 3], [0, 3, 2],  # -x
        [4, 6, 7], [4, 7, 5],  # +x
        [0, 4, 5], [0, 5, 1],  # -y
        [2, 3, 7], [2, 7, 6],  # +y
        [0, 2, 6], [0, 6, 4],  # -z
        [1, 5, 7], [1, 7, 3],  # +z
    ]
    return TriangleMesh(V, F)


def plane(half_width: float, z: float = 0.0) -> TriangleMesh:
    """Square in the plane ``z`` facing -z."""
    h = half_width
    V = [[-h, -h, z], [h, -h, z], [h, h, z], [-h, h, z]]
    return TriangleMesh(V, [[0, 2, 1], [0, 3, 2]])


def icosphere(radius: float = 1.0, subdivisions: int = 5, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Geodesic sphere. ``subdivisions=5`` gives 20480 triangles.

    The icosahedron is rotated so that a vertex sits at the -z pole.
    """
    t = (1 + 5 ** 0.5) / 2
    V = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], float)
    F = [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ]
    V /= np.linalg.norm(V, axis=1, keepdims=True)
    verts = [tuple(v) for v in V]
    for _ in range(subdivisions):
        cache = {}
        new_f = []

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = (np.asarray(verts[i]) + np.asarray(verts[j])) / 2
                verts.append(tuple(m / np.linalg.norm(m)))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in F:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_f += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        F = new_f
    V = np.array(verts)
    # put vertex 3 (originally (1, -t, 0)) on the -z pole
    from .geometry import align_vectors
    V = V @ align_vectors(V[3], [0, 0, -1]).T
    return TriangleMesh(V * radius + np.asarray(center, float), np.array(F))


def extrude(polygon, height: float, z0: float = 0.0) -> TriangleMesh:
    """Prism over a simple counter-clockwise polygon, bottom face at ``z0``."""
    P = np.asarray(polygon, float)
    n = len(P)
    caps = _ear_clip(P)
    V = np.vstack([np.c_[P, np.full(n, z0)], np.c_[P, np.full(n, z0 + height)]])
    F = []
    for a, b, c in caps:
        F.append([a, c, b])              # bottom faces -z
        F.append([a + n, b + n, c + n])  # top faces +z
    for i in range(n):
        j = (i + 1) % n
        F += [[i, j, j + n], [i, j + n, i + n]]
    return TriangleMesh(V, F)


def _ear_clip(P: np.ndarray):
    idx = list(range(len(P)))
    tris = []

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    guard = 0
    while len(idx) > 3 and guard < 10_000:
        guard += 1
        for k in range(len(idx)):
            i0, i1, i2 = idx[k - 1], idx[k], idx[(k + 1) % len(idx)]
            a, b, c = P[i0], P[i1], P[i2]
            if cross(a, b, c) <= 0:
                continue
            inside = any(
                cross(a, b, P[j]) >= 0 and cross(b, c, P[j]) >= 0 and cross(c, a, P[j]) >= 0
                for j in idx if j not in (i0, i1, i2)
            )
            if not inside:
                tris.append((i0, i1, i2))
                idx.pop(k)
                break
    tris.append(tuple(idx))
    return tris


def merge(*meshes: TriangleMesh) -> TriangleMesh:
    V, F, off = [], [], 0
    for m in meshes:
        V.append(m.vertices)
        F.append(m.triangles + off)
        off += len(m.vertices)
    return TriangleMesh(np.vstack(V), np.vstack(F))


def bracket() -> TriangleMesh:
    """Asymmetric L-shaped bracket (~22 x 16 x 6 mm) with a chamfered corner.

    Used as the single-contact benchmark object: the bottom face has no
    rotational symmetry, so contact masks pin down the in-plane pose.
    """
    poly = [(-11, -8), (9, -8), (11, -6), (11, -2), (-3, -2), (-3, 8), (-11, 8)]
    m = extrude(poly, 6.0, z0=-3.0)
    c = m.vertices.mean(axis=0)
    return TriangleMesh(m.vertices - [c[0], c[1], 0.0], m.triangles)


def studded_plate(stud_xy=((-6.0, 0.0), (6.0, 0.0)), plate=(24.0, 10.0, 2.0), stud_height=3.0) -> TriangleMesh:
    """Flat plate resting on identical asymmetric studs.

    Every stud is the same right-triangle-with-notch footprint, so a sensor
    that sees only one stud cannot tell which stud it touches.
    """
    foot = np.array([(-1.5, -1.5), (2.0, -1.5), (2.0, -0.5), (0.0, -0.5), (-1.5, 2.0)])
    px, py, pz = plate
    parts = [extrude([(-px / 2, -py / 2), (px / 2, -py / 2), (px / 2, py / 2), (-px / 2, py / 2)], pz, z0=0.0)]
    for x, y in stud_xy:
        parts.append(extrude(foot + [x, y], stud_height, z0=-stud_height))
    return merge(*parts)
