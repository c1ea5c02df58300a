"""Rigid transforms, triangle meshes, point clouds and surface sampling.

All lengths are millimetres. Rotations are stored as 3x3 matrices; quaternions
are accepted at the edges (``Pose.from_quaternion``) in (w, x, y, z) order.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

ORTHO_TOL = 1e-9
DEGENERATE_AREA = 1e-12


class MeshError(ValueError):
    """Raised for unreadable, malformed or empty meshes."""


def _orthonormalize(R: np.ndarray) -> np.ndarray:
    # Gram-Schmidt on the rows; keeps long composition chains on SO(3)
    x = R[0] / np.linalg.norm(R[0])
    y = R[1] - np.dot(R[1], x) * x
    y /= np.linalg.norm(y)
    z = np.cross(x, y)
    return np.stack([x, y, z])


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``x -> R @ x + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL or not np.allclose(R @ R.T, np.eye(3), atol=ORTHO_TOL):
            if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
                raise ValueError("rotation is not a proper orthonormal matrix")
            R = _orthonormalize(R)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_translation(cls, t) -> "Pose":
        return cls(np.eye(3), t)

    @classmethod
    def from_quaternion(cls, q, t=(0.0, 0.0, 0.0)) -> "Pose":
        q = np.asarray(q, dtype=np.float64)
        n = np.linalg.norm(q)
        if abs(n - 1.0) > 1e-6:
            log.debug("normalizing quaternion of norm %.9g", n)
        return cls(quat_to_matrix(q / n), t)

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def quaternion(self) -> np.ndarray:
        return matrix_to_quat(self.rotation)

    def compose(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def inverse(self) -> "Pose":
        return invert(self)

    def apply(self, pts) -> np.ndarray:
        return apply(self, pts)

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def __repr__(self):
        q = np.round(self.quaternion(), 6)
        t = np.round(self.translation, 6)
        return f"Pose(q={q.tolist()}, t={t.tolist()})"


def compose(a: Pose, b: Pose) -> Pose:
    """``a ∘ b``: apply ``b`` first, then ``a``."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(p: Pose) -> Pose:
    Rt = p.rotation.T
    return Pose(Rt, -Rt @ p.translation)


def apply(p: Pose, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    return pts @ p.rotation.T + p.translation


def rotation_about(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def rotation_angle(R: np.ndarray) -> float:
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def align_vectors(a, b) -> np.ndarray:
    """Smallest rotation taking unit direction ``a`` onto ``b``."""
    a = np.asarray(a, float) / np.linalg.norm(a)
    b = np.asarray(b, float) / np.linalg.norm(b)
    v = np.cross(a, b)
    c = float(np.dot(a, b))
    s = np.linalg.norm(v)
    if s < 1e-12:
        if c > 0:
            return np.eye(3)
        # antiparallel: half turn about any axis orthogonal to a
        ortho = np.array([1.0, 0, 0]) if abs(a[0]) < 0.9 else np.array([0, 1.0, 0])
        ortho = ortho - np.dot(ortho, a) * a
        return rotation_about(ortho, np.pi)
    return rotation_about(v, np.arctan2(s, c))


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    # Shepperd's method, w >= 0
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    return q if q[0] >= 0 else -q


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    dropped: int = 0

    def __post_init__(self):
        V = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        F = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(F) and (F.min() < 0 or F.max() >= len(V)):
            raise MeshError("triangle index out of range")
        areas = _areas(V, F)
        keep = areas > DEGENERATE_AREA
        n_drop = int((~keep).sum())
        if n_drop:
            log.warning("dropped %d degenerate triangle(s)", n_drop)
            F = np.ascontiguousarray(F[keep])
        V.setflags(write=False)
        F.setflags(write=False)
        object.__setattr__(self, "vertices", V)
        object.__setattr__(self, "triangles", F)
        object.__setattr__(self, "dropped", self.dropped + n_drop)

    @property
    def corners(self) -> np.ndarray:
        """(n_tri, 3, 3) array of triangle vertex positions."""
        return self.vertices[self.triangles]

    def areas(self) -> np.ndarray:
        return _areas(self.vertices, self.triangles)

    def transformed(self, pose: Pose) -> "TriangleMesh":
        return TriangleMesh(apply(pose, self.vertices), self.triangles)

    def scaled(self, s: float) -> "TriangleMesh":
        return TriangleMesh(self.vertices * s, self.triangles)

    def __len__(self):
        return len(self.triangles)


def _areas(V, F) -> np.ndarray:
    if len(F) == 0:
        return np.zeros(0)
    a, b, c = V[F[:, 0]], V[F[:, 1]], V[F[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


# ---------------------------------------------------------------- mesh I/O

def load_mesh(path, format: str | None = None) -> TriangleMesh:
    """Read an OBJ, STL (binary or ASCII) or OFF file. Units are mm."""
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    data = path.read_bytes()
    if fmt == "obj":
        V, F = _parse_obj(data)
    elif fmt == "stl":
        V, F = _parse_stl(data)
    elif fmt == "off":
        V, F = _parse_off(data)
    else:
        raise MeshError(f"unsupported mesh format {fmt!r}")
    if len(F) == 0:
        raise MeshError(f"{path}: mesh has no triangles")
    mesh = TriangleMesh(V, F)
    if len(mesh.triangles) == 0:
        raise MeshError(f"{path}: mesh has no non-degenerate triangles")
    return mesh


def _parse_obj(data: bytes):
    verts, faces = [], []
    for lineno, raw in enumerate(data.decode("utf-8", "replace").splitlines(), 1):
        parts = raw.split("#", 1)[0].split()
        if not parts:
            continue
        try:
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
                if len(verts[-1]) != 3:
                    raise ValueError("vertex needs 3 coordinates")
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    i = int(tok.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                if len(idx) < 3:
                    raise ValueError("face needs at least 3 vertices")
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
        except ValueError as e:
            raise MeshError(f"OBJ parse error at line {lineno}: {e}") from None
    return np.array(verts, float).reshape(-1, 3), np.array(faces, np.int64).reshape(-1, 3)


def _dedup(tri_pts: np.ndarray):
    pts = tri_pts.reshape(-1, 3)
    V, inv = np.unique(pts, axis=0, return_inverse=True)
    return V, inv.reshape(-1, 3)


def _parse_stl(data: bytes):
    if data[:5].lower() == b"solid" and b"facet" in data[:1024]:
        pts = []
        for lineno, raw in enumerate(data.decode("ascii", "replace").splitlines(), 1):
            parts = raw.split()
            if parts and parts[0] == "vertex":
                try:
                    pts.append([float(x) for x in parts[1:4]])
                except ValueError as e:
                    raise MeshError(f"STL parse error at line {lineno}: {e}") from None
        if len(pts) % 3:
            raise MeshError("STL parse error: vertex count not a multiple of 3")
        return _dedup(np.array(pts, float).reshape(-1, 3, 3))
    if len(data) < 84:
        raise MeshError(f"STL parse error at byte {len(data)}: truncated header")
    (n,) = struct.unpack_from("<I", data, 80)
    need = 84 + 50 * n
    if len(data) < need:
        raise MeshError(f"STL parse error at byte {len(data)}: expected {need} bytes")
    rec = np.frombuffer(data, dtype=np.dtype([("n", "<f4", 3), ("v", "<f4", (3, 3)), ("a", "<u2")]), count=n, offset=84)
    return _dedup(rec["v"].astype(np.float64))


def _parse_off(data: bytes):
    tokens = []
    for raw in data.decode("utf-8", "replace").splitlines():
        tokens.extend(raw.split("#", 1)[0].split())
    if not tokens or not tokens[0].startswith("OFF"):
        raise MeshError("OFF parse error at token 0: missing OFF header")
    pos = 1
    if len(tokens[0]) > 3:  # "OFF8 3 1 0" style header glued to counts is not supported
        raise MeshError("OFF parse error at token 0: malformed header")
    try:
        nv, nf = int(tokens[pos]), int(tokens[pos + 1])
        pos += 3
        V = np.array(tokens[pos:pos + 3 * nv], float).reshape(nv, 3)
        pos += 3 * nv
        faces = []
        for _ in range(nf):
            k = int(tokens[pos])
            idx = [int(x) for x in tokens[pos + 1:pos + 1 + k]]
            if len(idx) != k:
                raise ValueError("truncated face")
            pos += 1 + k
            faces.extend([idx[0], idx[j], idx[j + 1]] for j in range(1, k - 1))
    except (ValueError, IndexError) as e:
        raise MeshError(f"OFF parse error at token {pos}: {e}") from None
    return V, np.array(faces, np.int64).reshape(-1, 3)


def save_obj(mesh: TriangleMesh, path) -> None:
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


def save_stl_binary(mesh: TriangleMesh, path) -> None:
    tri = mesh.corners.astype("<f4")
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]).astype("<f4")
    rec = np.zeros(len(tri), dtype=np.dtype([("n", "<f4", 3), ("v", "<f4", (3, 3)), ("a", "<u2")]))
    rec["n"], rec["v"] = n, tri
    Path(path).write_bytes(b"\0" * 80 + struct.pack("<I", len(tri)) + rec.tobytes())


def save_xyz(points, path) -> None:
    """One ``x y z`` line per point, 9 significant digits."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    Path(path).write_text("".join(f"{x:.9g} {y:.9g} {z:.9g}\n" for x, y, z in pts))


# ---------------------------------------------------------------- sampling

def sample_surface(mesh: TriangleMesh, n: int, seed: int = 0) -> np.ndarray:
    """Area-uniform surface samples: triangle drawn ∝ area, uniform barycentrics."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(mesh.triangles) == 0:
        raise MeshError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.areas()
    idx = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    tri = mesh.corners[idx]
    return ((1 - r1)[:, None] * tri[:, 0] + (r1 * (1 - r2))[:, None] * tri[:, 1]
            + (r1 * r2)[:, None] * tri[:, 2])
