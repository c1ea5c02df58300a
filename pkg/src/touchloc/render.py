"""Geometric contact rendering.

A virtual pinhole camera sits at the origin looking down +z. The sensor is the
plane ``z = d``; an object pose is a *contact pose* when the closest surface
point inside the sensor window lies exactly on that plane. Contact shapes store
per-pixel penetration ``min(depth - d, delta_d)``, so ``0`` is the deepest
point and ``delta_d`` means no contact.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import _kernels as K
from ._io import atomic_write
from .geometry import Pose, TriangleMesh, apply, compose

log = logging.getLogger(__name__)

CONTACT_TOL = 1e-6
PGM_MAX = 65535


class GeometryError(ValueError):
    pass


class NoContactError(GeometryError):
    """The mesh never overlaps the sensor window."""


class EmptyContactError(GeometryError):
    """A contact shape has no contact pixel."""


@dataclass(frozen=True)
class SensorModel:
    fx: float = 291.5
    fy: float = 289.0
    cx: float = 235.0
    cy: float = 235.0
    width: int = 470
    height: int = 470
    d: float = 25.0
    delta_d: float = 2.0
    # half-widths of the sensor rectangle on the plane z = d; None -> whole image
    sensor_extent: tuple[float, float] | None = None
    mask: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if min(self.fx, self.fy, self.d, self.delta_d) <= 0:
            raise ValueError("fx, fy, d and delta_d must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("resolution must be at least 1x1")
        if self.sensor_extent is None:
            ex = self.d * min(self.cx + 0.5, self.width - 0.5 - self.cx) / self.fx
            ey = self.d * min(self.cy + 0.5, self.height - 0.5 - self.cy) / self.fy
            object.__setattr__(self, "sensor_extent", (float(ex), float(ey)))
        else:
            object.__setattr__(self, "sensor_extent", tuple(float(e) for e in self.sensor_extent))
        if self.mask is not None:
            m = np.asarray(self.mask, bool)
            if m.shape != (self.height, self.width):
                raise ValueError("sensor mask shape must be (height, width)")
            object.__setattr__(self, "mask", m)

    @classmethod
    def default(cls) -> "SensorModel":
        return cls()

    def scaled(self, width: int, height: int | None = None) -> "SensorModel":
        """Same physical sensor at another resolution.

        Pixel ``j`` of the new image covers the same footprint as the area-mean
        of native pixels ``[j*s - 0.5, (j+1)*s - 0.5]``.
        """
        height = width if height is None else height
        sx, sy = self.width / width, self.height / height
        mask = None
        if self.mask is not None:
            mask = _area_mean(self.mask.astype(float), height, width) > 0.5
        return replace(
            self, fx=self.fx / sx, fy=self.fy / sy,
            cx=(self.cx + 0.5) / sx - 0.5, cy=(self.cy + 0.5) / sy - 0.5,
            width=width, height=height, mask=mask,
        )

    def ray_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-pixel ray slopes ``a = (u-cx)/fx`` and ``b = (v-cy)/fy``, shape (H, W)."""
        u = np.arange(self.width)
        v = np.arange(self.height)
        a = (u - self.cx) / self.fx
        b = (v - self.cy) / self.fy
        return np.broadcast_to(a, (self.height, self.width)), np.broadcast_to(b[:, None], (self.height, self.width))

    def window(self) -> np.ndarray:
        """Pixels whose ray crosses the sensor plane inside the sensor rectangle."""
        a, b = self.ray_grid()
        ex, ey = self.sensor_extent
        w = (np.abs(a * self.d) <= ex + 1e-12) & (np.abs(b * self.d) <= ey + 1e-12)
        if self.mask is not None:
            w &= self.mask
        return w

    def project(self, pts) -> np.ndarray:
        """Pixel coordinates (u, v) of camera-frame points."""
        pts = np.asarray(pts, float).reshape(-1, 3)
        return np.c_[self.fx * pts[:, 0] / pts[:, 2] + self.cx, self.fy * pts[:, 1] / pts[:, 2] + self.cy]

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height, "d": self.d,
                "delta_d": self.delta_d, "sensor_extent": list(self.sensor_extent)}

    @classmethod
    def from_dict(cls, d: dict) -> "SensorModel":
        d = dict(d)
        if d.get("sensor_extent") is not None:
            d["sensor_extent"] = tuple(d["sensor_extent"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class DepthImage:
    depth: np.ndarray  # (H, W) mm, inf where the ray misses

    @property
    def width(self):
        return self.depth.shape[1]

    @property
    def height(self):
        return self.depth.shape[0]


@dataclass(frozen=True, eq=False)
class ContactShape:
    value: np.ndarray  # (H, W) in [0, delta_d]
    delta_d: float

    @property
    def width(self):
        return self.value.shape[1]

    @property
    def height(self):
        return self.value.shape[0]

    def codes(self) -> np.ndarray:
        """16-bit quantization ``round(value / delta_d * 65535)``."""
        return np.rint(self.value / self.delta_d * PGM_MAX).astype(np.uint16)

    @classmethod
    def from_codes(cls, codes, delta_d: float) -> "ContactShape":
        return cls(np.asarray(codes, np.float64) * delta_d / PGM_MAX, float(delta_d))

    def quantized(self) -> "ContactShape":
        return ContactShape.from_codes(self.codes(), self.delta_d)

    @classmethod
    def empty(cls, sensor: SensorModel, delta_d: float | None = None) -> "ContactShape":
        dd = sensor.delta_d if delta_d is None else delta_d
        return cls(np.full((sensor.height, sensor.width), float(dd)), float(dd))

    def n_contact(self) -> int:
        return int(to_mask(self).sum())


# ------------------------------------------------------------ rendering

def _camera_vertices(mesh: TriangleMesh, pose: Pose) -> np.ndarray:
    return np.ascontiguousarray(apply(pose, mesh.vertices))


def render_depth(mesh: TriangleMesh, pose: Pose, sensor: SensorModel) -> DepthImage:
    """Nearest ray–triangle hit per pixel through a BVH; misses are ``inf``."""
    V = _camera_vertices(mesh, pose)
    F = mesh.triangles
    bvh = K.build_bvh(V, F)
    depth, _ = K.bvh_depth(V, F, *bvh, sensor.width, sensor.height, sensor.fx, sensor.fy, sensor.cx, sensor.cy)
    return DepthImage(depth)


def window_min_z(mesh: TriangleMesh, pose: Pose, sensor: SensorModel) -> float:
    """Closest surface depth among points inside the sensor prism (inf if none)."""
    ex, ey = sensor.sensor_extent
    return float(K.window_min_z(_camera_vertices(mesh, pose), mesh.triangles, ex, ey))


def project_to_contact(mesh: TriangleMesh, pose: Pose, sensor: SensorModel) -> tuple[Pose, float]:
    """Translate ``pose`` along z so the object just touches the sensor plane.

    Returns the contact pose and the applied translation ``tz = d - min_z``.
    """
    zmin = window_min_z(mesh, pose, sensor)
    if not np.isfinite(zmin):
        raise NoContactError("mesh does not overlap the sensor window")
    tz = sensor.d - zmin
    return compose(Pose.from_translation([0.0, 0.0, tz]), pose), tz


def _contact_depth(mesh: TriangleMesh, pose: Pose, sensor: SensorModel, zmax: float) -> np.ndarray:
    V = _camera_vertices(mesh, pose)
    F = mesh.triangles
    tri_z = V[F, 2].min(axis=1)
    ids = np.flatnonzero(tri_z <= zmax)
    depth, _ = K.raster_depth(V, F, ids, sensor.width, sensor.height, sensor.fx, sensor.fy, sensor.cx, sensor.cy)
    return depth


def render_contact_shape(mesh: TriangleMesh, pose: Pose, sensor: SensorModel,
                         delta_d_override: float | None = None, check: bool = True) -> ContactShape:
    """Contact shape of a contact pose.

    Only triangles reaching the slab ``d <= z <= d + delta_d`` can own a contact
    pixel, so those are rasterized alone; any nearer surface would also be in
    the slab. ``delta_d_override`` changes the contact threshold (augmentation).
    """
    dd = sensor.delta_d if delta_d_override is None else float(delta_d_override)
    if dd <= 0:
        raise ValueError("delta_d must be positive")
    if check:
        zmin = window_min_z(mesh, pose, sensor)
        if not abs(zmin - sensor.d) <= CONTACT_TOL:
            raise GeometryError(f"not a contact pose: window min depth {zmin:.9g} != d={sensor.d}")
    depth = _contact_depth(mesh, pose, sensor, sensor.d + dd)
    value = np.clip(depth - sensor.d, 0.0, dd)
    value[~np.isfinite(value)] = dd
    value[~sensor.window()] = dd
    return ContactShape(value, dd)


def to_mask(cs: ContactShape) -> np.ndarray:
    return cs.value < cs.delta_d


def to_pointcloud(cs: ContactShape, sensor: SensorModel) -> np.ndarray:
    """Back-project contact pixels: ``((u-cx)/fx, (v-cy)/fy, 1) * (d + value)``."""
    m = to_mask(cs)
    if not m.any():
        raise EmptyContactError("contact shape has no contact pixel")
    if cs.value.shape != (sensor.height, sensor.width):
        raise ValueError("contact shape and sensor resolution differ")
    v, u = np.nonzero(m)
    z = sensor.d + cs.value[v, u]
    return np.c_[(u - sensor.cx) / sensor.fx * z, (v - sensor.cy) / sensor.fy * z, z]


def area_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) matrix of exact area-mean weights for any scale factor."""
    s = n_in / n_out
    Wm = np.zeros((n_out, n_in))
    for j in range(n_out):
        lo, hi = j * s, (j + 1) * s
        for i in range(int(np.floor(lo)), min(int(np.ceil(hi)), n_in)):
            Wm[j, i] = max(0.0, min(hi, i + 1) - max(lo, i))
    return Wm / s


def _area_mean(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    H, W = img.shape
    return area_weights(H, out_h) @ img @ area_weights(W, out_w).T


def downsample(cs: ContactShape, width: int, height: int | None = None) -> ContactShape:
    """Area-mean resample, then round to the nearest 16-bit code."""
    height = width if height is None else height
    v = _area_mean(cs.value, height, width)
    return ContactShape(np.clip(v, 0.0, cs.delta_d), cs.delta_d).quantized()


# ----------------------------------------------------------------- files

def save_contact_shape(cs: ContactShape, sensor: SensorModel, path) -> None:
    """16-bit binary PGM plus a JSON sidecar (``<path>.json``)."""
    path = Path(path)
    header = f"P5\n{cs.width} {cs.height}\n{PGM_MAX}\n".encode()
    atomic_write(path, header + cs.codes().astype(">u2").tobytes())
    meta = {"d_mm": sensor.d, "delta_d_mm": cs.delta_d, "fx": sensor.fx, "fy": sensor.fy, "cx": sensor.cx, "cy": sensor.cy}
    atomic_write(str(path) + ".json", (json.dumps(meta, sort_keys=True, indent=1) + "\n").encode())


def read_pgm16(data: bytes) -> np.ndarray:
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pos += 1
    dtype = ">u2" if maxval > 255 else "u1"
    n = w * h * np.dtype(dtype).itemsize
    if len(data) - pos < n:
        raise ValueError("truncated PGM")
    return np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).reshape(h, w).astype(np.uint16)


def load_contact_shape(path) -> tuple[ContactShape, dict]:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    codes = read_pgm16(path.read_bytes())
    return ContactShape.from_codes(codes, meta["delta_d_mm"]), meta
