"""Dense object-specific grids of contact poses.

A grid enumerates ``(x, y, view direction, roll)``; ``z`` follows from the
contact condition. View directions are object-frame unit vectors that end up
facing the sensor (mapped to camera ``-z``), drawn from a Fibonacci lattice
over a spherical cap.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from numba import njit
from scipy.spatial import cKDTree

from ._io import atomic_write
from .geometry import Pose, TriangleMesh, align_vectors, rotation_about, sample_surface
from .render import (ContactShape, NoContactError, SensorModel, project_to_contact,
                     render_contact_shape, to_mask)

log = logging.getLogger(__name__)

MAGIC = b"TLGRID01"
FORMAT_VERSION = 1
N_SAMPLE_POINTS = 1000


class GridError(ValueError):
    pass


class GridFileError(GridError):
    """Corrupt, truncated or wrong-version grid file."""


@dataclass
class GridSpec:
    x_range: tuple[float, float] = (-5.0, 5.0)
    y_range: tuple[float, float] = (-5.0, 5.0)
    x_step: float = 2.0
    y_step: float = 2.0
    n_view_dirs: int = 1
    n_rolls: int = 1
    # None, "full" (every rotation equivalent) or a list of 3x3 object-frame rotations
    symmetry: object = None
    view_axis: tuple[float, float, float] = (0.0, 0.0, -1.0)
    view_cone_deg: float = 180.0
    roll_range: tuple[float, float] = (0.0, 2 * np.pi)
    target_nn_mm: float = 2.0
    sample_seed: int = 0

    def __post_init__(self):
        if self.x_step <= 0 or self.y_step <= 0:
            raise ValueError("grid steps must be positive")
        if self.n_view_dirs < 1 or self.n_rolls < 1:
            raise ValueError("n_view_dirs and n_rolls must be >= 1")
        self.x_range = tuple(map(float, self.x_range))
        self.y_range = tuple(map(float, self.y_range))
        self.view_axis = tuple(map(float, self.view_axis))
        self.roll_range = tuple(map(float, self.roll_range))

    def xs(self) -> np.ndarray:
        return _steps(*self.x_range, self.x_step)

    def ys(self) -> np.ndarray:
        return _steps(*self.y_range, self.y_step)

    def rolls(self) -> np.ndarray:
        lo, hi = self.roll_range
        return lo + (hi - lo) * np.arange(self.n_rolls) / self.n_rolls

    def view_dirs(self) -> np.ndarray:
        return fibonacci_cap(self.n_view_dirs, self.view_axis, np.radians(self.view_cone_deg))

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(self.symmetry, (list, tuple, np.ndarray)):
            d["symmetry"] = [np.asarray(s).tolist() for s in self.symmetry]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(**d)


def _steps(lo, hi, step):
    n = int(np.floor((hi - lo) / step + 1e-9)) + 1
    return lo + step * np.arange(n)


def fibonacci_cap(n: int, axis=(0.0, 0.0, -1.0), half_angle: float = np.pi) -> np.ndarray:
    """``n`` near-uniform unit vectors within ``half_angle`` of ``axis``.

    Area-uniform in the cap: cos(angle) steps linearly, azimuth by the golden angle.
    ``n == 1`` returns the axis itself.
    """
    if n == 1:
        a = np.asarray(axis, float)
        return (a / np.linalg.norm(a))[None]
    k = np.arange(n) + 0.5
    cz = 1.0 - (1.0 - np.cos(half_angle)) * k / n
    phi = np.pi * (3.0 - np.sqrt(5.0)) * np.arange(n)
    s = np.sqrt(np.clip(1 - cz * cz, 0, None))
    local = np.c_[s * np.cos(phi), s * np.sin(phi), cz]
    return local @ align_vectors([0, 0, 1], axis).T


def view_roll_rotation(view_dir, roll: float) -> np.ndarray:
    """Object-to-camera rotation putting ``view_dir`` on camera -z, then rolling about z."""
    return rotation_about([0, 0, 1], roll) @ align_vectors(view_dir, [0, 0, -1])


def canonical_rotation(R: np.ndarray, symmetry) -> np.ndarray:
    """Lexicographically smallest member of the symmetry orbit ``{R @ S}``."""
    if symmetry is None:
        return R
    if isinstance(symmetry, str):
        if symmetry == "full":
            return np.eye(3)
        raise ValueError(f"unknown symmetry {symmetry!r}")
    best, best_key = R, None
    for S in symmetry:
        C = R @ np.asarray(S, float)
        key = tuple(np.round(C.ravel(), 9) + 0.0)
        if best_key is None or key < best_key:
            best, best_key = C, key
    return best


def cyclic_group(n: int, axis=(0.0, 0.0, 1.0)) -> list[np.ndarray]:
    return [rotation_about(axis, 2 * np.pi * k / n) for k in range(n)]


# --------------------------------------------------------------- distances

def pose_distance(a: Pose, b: Pose, sample_points) -> float:
    """Mean distance between sample points carried by the two poses (ADD)."""
    P = np.asarray(sample_points, float)
    diff = P @ (a.rotation - b.rotation).T + (a.translation - b.translation)
    return float(np.linalg.norm(diff, axis=1).mean())


@njit(cache=True, nogil=True)
def _add_many(Rq, tq, Rs, ts, idx, P):
    out = np.empty(idx.shape[0])
    n = P.shape[0]
    for k in range(idx.shape[0]):
        i = idx[k]
        D = Rq - Rs[i]
        dt = tq - ts[i]
        acc = 0.0
        for j in range(n):
            x = D[0, 0] * P[j, 0] + D[0, 1] * P[j, 1] + D[0, 2] * P[j, 2] + dt[0]
            y = D[1, 0] * P[j, 0] + D[1, 1] * P[j, 1] + D[1, 2] * P[j, 2] + dt[1]
            z = D[2, 0] * P[j, 0] + D[2, 1] * P[j, 1] + D[2, 2] * P[j, 2] + dt[2]
            acc += np.sqrt(x * x + y * y + z * z)
        out[k] = acc / n
    return out


class PoseIndex:
    """Exact ADD nearest-neighbour search over a fixed set of poses.

    Cheap per-pose bounds prune the scan: with ``c`` the transformed sample
    centroid, ``ADD >= |Δc|``, ``ADD <= RMS`` and ``ADD >= RMS² / max|x|``,
    where RMS is a Euclidean distance between 12-d pose features.
    """

    def __init__(self, rotations, translations, sample_points):
        self.R = np.ascontiguousarray(rotations, float)
        self.t = np.ascontiguousarray(translations, float)
        self.P = np.ascontiguousarray(sample_points, float)
        mu = self.P.mean(axis=0)
        C = (self.P - mu).T @ (self.P - mu) / len(self.P)
        lam, E = np.linalg.eigh(C)
        self.mu = mu
        self.axes = E * np.sqrt(np.clip(lam, 0, None))  # columns √λ e
        self.rho = float(np.linalg.norm(self.P - mu, axis=1).max())
        self.feat = self._features(self.R, self.t)
        self._trees = None

    def _features(self, R, t):
        c = R @ self.mu + t
        ax = (R @ self.axes).transpose(0, 2, 1).reshape(len(R), 9) if R.ndim == 3 else (R @ self.axes).T.ravel()
        return np.concatenate([c, ax], axis=-1)

    def distances(self, q: Pose, idx=None) -> np.ndarray:
        idx = np.arange(len(self.R)) if idx is None else np.asarray(idx, np.int64)
        return _add_many(q.rotation, q.translation, self.R, self.t, idx, self.P)

    def nearest(self, q: Pose, exclude: int = -1) -> tuple[int, float]:
        idx, d = self.nearest_many(q.rotation[None], q.translation[None], np.array([exclude]))
        return int(idx[0]), float(d[0])

    def nearest_many(self, R, t, exclude=None) -> tuple[np.ndarray, np.ndarray]:
        """Nearest pose index and ADD for each query pose; ``exclude[k]`` (>= 0) is skipped for query k."""
        R = np.ascontiguousarray(np.asarray(R, float).reshape(-1, 3, 3))
        t = np.ascontiguousarray(np.asarray(t, float).reshape(-1, 3))
        nq = len(R)
        exclude = np.full(nq, -1) if exclude is None else np.asarray(exclude, np.int64)
        n = len(self.R)
        if n - (exclude >= 0).max(initial=False) < 1:
            raise GridError("nearest neighbour of an empty pose set")
        if self._trees is None:
            self._trees = (cKDTree(self.feat), cKDTree(self.feat[:, :3]))
        ftree, ctree = self._trees
        fq = self._features(R, t)
        m = min(9, n)
        _, firsts = ftree.query(fq, k=m)
        firsts = firsts.reshape(nq, m)
        out_i = np.empty(nq, np.int64)
        out_d = np.empty(nq)
        for k in range(nq):
            first = firsts[k][firsts[k] != exclude[k]][:8].astype(np.int64)
            d0 = _add_many(R[k], t[k], self.R, self.t, first, self.P)
            u = d0.min()
            # centroid distance lower-bounds ADD, so every candidate sits in this ball
            cand = np.sort(np.asarray(ctree.query_ball_point(fq[k, :3], u * (1 + 1e-9) + 1e-12), np.int64))
            cand = cand[cand != exclude[k]]
            diff = self.feat[cand] - fq[k]
            dc = np.linalg.norm(diff[:, :3], axis=1)
            rms = np.linalg.norm(diff, axis=1)
            # Frobenius norm of the direct difference bounds the spectral norm without cancellation
            dR = np.linalg.norm((self.R[cand] - R[k]).reshape(len(cand), 9), axis=1) * (1 + 1e-9)
            lb = np.maximum(dc, rms ** 2 / (dR * self.rho + dc + 1e-300))
            keep = lb <= u * (1 + 1e-9) + 1e-12
            cand = np.union1d(cand[keep], first[d0 == u])
            d = _add_many(R[k], t[k], self.R, self.t, cand, self.P)
            j = int(np.argmin(d))  # cand is ascending, so argmin picks the lowest index on ties
            out_i[k], out_d[k] = cand[j], d[j]
        return out_i, out_d


# -------------------------------------------------------------------- grid

@dataclass(eq=False)
class PoseGrid:
    rotations: np.ndarray     # (N, 3, 3)
    translations: np.ndarray  # (N, 3)
    codes: np.ndarray         # (N, H, W) uint16 contact shapes
    sensor: SensorModel
    spec: GridSpec
    sample_points: np.ndarray
    mean_nn_distance: float = float("nan")
    descriptors: np.ndarray | None = None
    encoder_fingerprint: str = ""
    _index: PoseIndex | None = field(default=None, repr=False)
    _fingerprint: str | None = field(default=None, init=False, repr=False)
    _scorer: tuple | None = field(default=None, init=False, repr=False)  # (descriptors, matrix used for scoring)

    def __len__(self):
        return len(self.rotations)

    def pose(self, i: int) -> Pose:
        return Pose(self.rotations[i], self.translations[i])

    def poses(self) -> list[Pose]:
        return [self.pose(i) for i in range(len(self))]

    def shape(self, i: int) -> ContactShape:
        return ContactShape.from_codes(self.codes[i], self.sensor.delta_d)

    @property
    def index(self) -> PoseIndex:
        if self._index is None:
            self._index = PoseIndex(self.rotations, self.translations, self.sample_points)
        return self._index

    def fingerprint(self) -> str:
        """Hash of poses, shapes and sensor; cached because grids are not mutated after build."""
        if self._fingerprint is None:
            self._fingerprint = self._compute_fingerprint()
        return self._fingerprint

    def _compute_fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.rotations, self.translations, self.codes):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(json.dumps(self.sensor.to_dict(), sort_keys=True).encode())
        return h.hexdigest()[:16]

    def subset(self, idx) -> "PoseGrid":
        idx = np.asarray(idx)
        g = PoseGrid(self.rotations[idx], self.translations[idx], self.codes[idx], self.sensor, self.spec,
                     self.sample_points, float("nan"),
                     None if self.descriptors is None else self.descriptors[idx], self.encoder_fingerprint)
        g.mean_nn_distance = compute_mean_nn(g) if len(g) > 1 else 0.0
        return g


def nearest_pose(grid: PoseGrid, query: Pose) -> tuple[int, float]:
    """Exact ADD nearest grid pose (cached 1000-point samples), lowest index on ties."""
    if len(grid) == 0:
        raise GridError("empty grid")
    return grid.index.nearest(query)


def compute_mean_nn(grid: PoseGrid) -> float:
    _, d = grid.index.nearest_many(grid.rotations, grid.translations, exclude=np.arange(len(grid)))
    return float(np.mean(d))


def _grid_tuples(spec: GridSpec):
    out = []
    seen = set()
    for v in spec.view_dirs():
        for roll in spec.rolls():
            R = canonical_rotation(view_roll_rotation(v, roll), spec.symmetry)
            rkey = np.round(R, 9).tobytes()
            for y in spec.ys():
                for x in spec.xs():
                    key = (rkey, round(float(x), 9), round(float(y), 9))
                    if key in seen:
                        continue
                    seen.add(key)
                    out.append((R, float(x), float(y)))
    return out


def _contact_entry(mesh, sensor, R, x, y):
    try:
        pose, _ = project_to_contact(mesh, Pose(R, [x, y, 0.0]), sensor)
    except NoContactError:
        return None
    codes = render_contact_shape(mesh, pose, sensor, check=False).codes()
    if not (codes < 65535).any():
        return None
    return pose, codes


def build_grid(mesh: TriangleMesh, sensor: SensorModel, spec: GridSpec, threads: int = 1) -> PoseGrid:
    """Enumerate, project to contact, prune no-contact poses, render and store."""
    tuples = _grid_tuples(spec)
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            entries = list(ex.map(lambda a: _contact_entry(mesh, sensor, *a), tuples))
    else:
        entries = [_contact_entry(mesh, sensor, *a) for a in tuples]
    entries = [e for e in entries if e is not None]
    if not entries:
        raise GridError("grid spec yields no contact pose")
    R = np.stack([p.rotation for p, _ in entries])
    t = np.stack([p.translation for p, _ in entries])
    codes = np.stack([c for _, c in entries])
    pts = sample_surface(mesh, N_SAMPLE_POINTS, spec.sample_seed)
    grid = PoseGrid(R, t, codes, sensor, spec, pts)
    grid.mean_nn_distance = compute_mean_nn(grid) if len(grid) > 1 else 0.0
    if grid.mean_nn_distance > spec.target_nn_mm:
        log.warning("grid mean nearest-neighbour ADD %.3f mm exceeds target %.3f mm",
                    grid.mean_nn_distance, spec.target_nn_mm)
    log.info("built grid: %d poses from %d tuples, mean NN %.3f mm", len(grid), len(tuples), grid.mean_nn_distance)
    return grid


def sample_contact_pose(mesh: TriangleMesh, sensor: SensorModel, spec: GridSpec, rng,
                        max_tries: int = 1000) -> Pose:
    """Continuous draw over the grid's parameter ranges, projected to contact."""
    axis = np.asarray(spec.view_axis, float)
    cmin = np.cos(np.radians(spec.view_cone_deg))
    for _ in range(max_tries):
        x = rng.uniform(*spec.x_range)
        y = rng.uniform(*spec.y_range)
        if spec.n_view_dirs == 1:
            v = axis / np.linalg.norm(axis)
        else:
            cz = rng.uniform(cmin, 1.0)
            phi = rng.uniform(0, 2 * np.pi)
            s = np.sqrt(max(0.0, 1 - cz * cz))
            v = align_vectors([0, 0, 1], axis) @ [s * np.cos(phi), s * np.sin(phi), cz]
        roll = rng.uniform(*spec.roll_range) if spec.n_rolls > 1 else spec.roll_range[0]
        try:
            pose, _ = project_to_contact(mesh, Pose(view_roll_rotation(v, roll), [x, y, 0.0]), sensor)
        except NoContactError:
            continue
        if to_mask(render_contact_shape(mesh, pose, sensor, check=False)).any():
            return pose
    raise GridError("could not sample a contact pose")


# -------------------------------------------------------------------- I/O

def save_grid(grid: PoseGrid, path) -> None:
    """Little-endian: magic, CRC-32, header length, JSON header, then the data blocks."""
    n = len(grid)
    h, w = grid.codes.shape[1:]
    desc = grid.descriptors
    header = {
        "version": FORMAT_VERSION, "n": n, "height": int(h), "width": int(w),
        "descriptor_dim": 0 if desc is None else int(desc.shape[1]),
        "n_sample_points": len(grid.sample_points),
        "sensor": grid.sensor.to_dict(), "spec": grid.spec.to_dict(),
        "mean_nn_distance": grid.mean_nn_distance, "encoder_fingerprint": grid.encoder_fingerprint,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    poses = np.concatenate([grid.rotations.reshape(n, 9), grid.translations], axis=1)
    body = b"".join([
        struct.pack("<Q", len(hb)), hb,
        poses.astype("<f8").tobytes(),
        grid.codes.astype("<u2").tobytes(),
        b"" if desc is None else desc.astype("<f8").tobytes(),
        grid.sample_points.astype("<f8").tobytes(),
    ])
    data = MAGIC + struct.pack("<I", zlib.crc32(body)) + body
    atomic_write(path, data)


def load_grid(path) -> PoseGrid:
    data = Path(path).read_bytes()
    if len(data) < 20 or data[:6] != MAGIC[:6]:
        raise GridFileError("not a grid file")
    if data[:8] != MAGIC:
        raise GridFileError(f"unsupported grid version {data[6:8]!r}")
    (crc,) = struct.unpack_from("<I", data, 8)
    body = data[12:]
    if zlib.crc32(body) != crc:
        raise GridFileError("checksum mismatch (corrupt or truncated grid file)")
    (hl,) = struct.unpack_from("<Q", body, 0)
    header = json.loads(body[8:8 + hl])
    if header["version"] != FORMAT_VERSION:
        raise GridFileError(f"unsupported grid version {header['version']}")
    n, h, w, dd, ns = header["n"], header["height"], header["width"], header["descriptor_dim"], header["n_sample_points"]
    off = 8 + hl

    def take(dtype, count):
        nonlocal off
        arr = np.frombuffer(body, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr

    try:
        poses = take("<f8", n * 12).reshape(n, 12)
        codes = take("<u2", n * h * w).reshape(n, h, w).astype(np.uint16)
        desc = take("<f8", n * dd).reshape(n, dd).astype(np.float64) if dd else None
        pts = take("<f8", ns * 3).reshape(ns, 3).astype(np.float64)
    except ValueError as e:
        raise GridFileError(f"truncated grid file: {e}") from None
    spec = header["spec"]
    if isinstance(spec.get("symmetry"), list):
        spec["symmetry"] = [np.asarray(s) for s in spec["symmetry"]]
    return PoseGrid(
        poses[:, :9].reshape(n, 3, 3).copy(), poses[:, 9:].copy(), codes,
        SensorModel.from_dict(header["sensor"]), GridSpec.from_dict(spec), pts,
        header["mean_nn_distance"], desc, header["encoder_fingerprint"],
    )


