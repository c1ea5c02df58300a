"""Independent reference implementations the tests compare against."""
import numpy as np

from touchloc.geometry import TriangleMesh


def ray_slopes(sensor):
    u = (np.arange(sensor.width) - sensor.cx) / sensor.fx
    v = (np.arange(sensor.height) - sensor.cy) / sensor.fy
    return np.meshgrid(u, v)


def ray_sphere_depth(sensor, center, radius):
    """Closed-form depth of the nearer ray/sphere hit per pixel (inf on a miss)."""
    a, b = ray_slopes(sensor)
    D = np.stack([a, b, np.ones_like(a)], -1)
    c = np.asarray(center, float)
    dd = np.sum(D * D, -1)
    dc = D @ c
    disc = dc ** 2 - dd * (c @ c - radius ** 2)
    with np.errstate(invalid="ignore"):
        s = (dc - np.sqrt(disc)) / dd
    return np.where(disc >= 0, s, np.inf)


def contact_from_depth(depth, sensor):
    value = np.clip(depth - sensor.d, 0.0, sensor.delta_d)
    value[~np.isfinite(value)] = sensor.delta_d
    return value


def pixel_aligned_sphere(sensor, center, radius):
    """Sphere tessellated on the pixel lattice: vertex (i, j) is the exact hit of pixel ray (i, j).

    Only the visible hemisphere is meshed; every pixel-centre ray passes through a vertex.
    """
    z = ray_sphere_depth(sensor, center, radius)
    a, b = ray_slopes(sensor)
    H, W = z.shape
    ok = np.isfinite(z)
    V = np.stack([a * np.where(ok, z, 0), b * np.where(ok, z, 0), np.where(ok, z, 0)], -1).reshape(-1, 3)
    idx = np.arange(H * W).reshape(H, W)
    q = ok[:-1, :-1] & ok[1:, :-1] & ok[:-1, 1:] & ok[1:, 1:]
    i00, i01, i10, i11 = idx[:-1, :-1][q], idx[:-1, 1:][q], idx[1:, :-1][q], idx[1:, 1:][q]
    F = np.concatenate([np.stack([i00, i10, i01], 1), np.stack([i01, i10, i11], 1)])
    used = np.unique(F)
    remap = np.full(H * W, -1)
    remap[used] = np.arange(len(used))
    return TriangleMesh(V[used], remap[F])


def brute_force_depth(V, F, sensor, pixels):
    """Nearest hit per listed pixel by testing every triangle (Möller–Trumbore, numpy)."""
    A, B, C = V[F[:, 0]], V[F[:, 1]], V[F[:, 2]]
    e1, e2 = B - A, C - A
    out = []
    for v, u in pixels:
        d = np.array([(u - sensor.cx) / sensor.fx, (v - sensor.cy) / sensor.fy, 1.0])
        p = np.cross(d, e2)
        det = np.einsum("ij,ij->i", e1, p)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / det
            s = -A
            bu = np.einsum("ij,ij->i", s, p) * inv
            q = np.cross(s, e1)
            bv = (q @ d) * inv
            t = np.einsum("ij,ij->i", e2, q) * inv
        eps = 1e-12
        hit = (np.abs(det) > 1e-14) & (bu >= -eps) & (bv >= -eps) & (bu + bv <= 1 + eps) & (t > 0)
        out.append(t[hit].min() if hit.any() else np.inf)
    return np.array(out)


def all_pairs_nn(R, t, P):
    """Mean nearest-neighbour ADD by scanning every pair."""
    n = len(R)
    best = np.full(n, np.inf)
    X = np.einsum("nij,mj->nmi", R, P) + t[:, None, :]  # (n, m, 3)
    for i in range(n):
        d = np.linalg.norm(X - X[i], axis=2).mean(axis=1)
        d[i] = np.inf
        best[i] = d.min()
    return best
