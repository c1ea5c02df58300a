"""Compiled inner loops for ray casting and window clipping.

Rays always start at the camera origin with direction ``((u-cx)/fx, (v-cy)/fy, 1)``,
so the ray parameter of a hit equals its depth (z coordinate).
"""
import numpy as np
from numba import njit

LEAF_SIZE = 8


@njit(cache=True, inline="always")
def ray_triangle(dx, dy, dz, V, a, b, c):
    """Watertight ray/triangle test for a ray from the origin; edges are inclusive.

    Vertices are sheared into the ray frame once each, so the two triangles
    sharing an edge evaluate exactly opposite edge functions and a ray through
    an edge or vertex is never lost. Assumes ``dz`` is the dominant component.
    Returns inf on a miss.
    """
    sx, sy = dx / dz, dy / dz
    ax, ay = V[a, 0] - sx * V[a, 2], V[a, 1] - sy * V[a, 2]
    bx, by = V[b, 0] - sx * V[b, 2], V[b, 1] - sy * V[b, 2]
    cx, cy = V[c, 0] - sx * V[c, 2], V[c, 1] - sy * V[c, 2]
    u = cx * by - cy * bx
    v = ax * cy - ay * cx
    w = bx * ay - by * ax
    if (u < 0.0 or v < 0.0 or w < 0.0) and (u > 0.0 or v > 0.0 or w > 0.0):
        return np.inf
    det = u + v + w
    if det == 0.0:
        return np.inf
    t = (u * V[a, 2] + v * V[b, 2] + w * V[c, 2]) / det
    if t <= 0.0:
        return np.inf
    return t


@njit(cache=True)
def raster_depth(V, F, tri_ids, width, height, fx, fy, cx, cy):
    """Nearest-hit depth for every pixel, restricted to the triangles in ``tri_ids``.

    Triangles are visited in ascending index order and only a strictly nearer
    hit replaces the current one, so ties resolve to the lowest index.
    """
    depth = np.full((height, width), np.inf)
    owner = np.full((height, width), -1, dtype=np.int64)
    for k in range(tri_ids.shape[0]):
        f = tri_ids[k]
        a, b, c = F[f, 0], F[f, 1], F[f, 2]
        zmin = min(V[a, 2], V[b, 2], V[c, 2])
        if zmin > 1e-9:
            umin = np.inf
            umax = -np.inf
            vmin = np.inf
            vmax = -np.inf
            for idx in (a, b, c):
                pu = fx * V[idx, 0] / V[idx, 2] + cx
                pv = fy * V[idx, 1] / V[idx, 2] + cy
                umin = min(umin, pu)
                umax = max(umax, pu)
                vmin = min(vmin, pv)
                vmax = max(vmax, pv)
            u0 = max(int(np.floor(umin)) - 1, 0)
            u1 = min(int(np.ceil(umax)) + 1, width - 1)
            v0 = max(int(np.floor(vmin)) - 1, 0)
            v1 = min(int(np.ceil(vmax)) + 1, height - 1)
        else:
            u0, u1, v0, v1 = 0, width - 1, 0, height - 1
        for pv_ in range(v0, v1 + 1):
            dy = (pv_ - cy) / fy
            for pu_ in range(u0, u1 + 1):
                dx = (pu_ - cx) / fx
                t = ray_triangle(dx, dy, 1.0, V, a, b, c)
                if t < depth[pv_, pu_]:
                    depth[pv_, pu_] = t
                    owner[pv_, pu_] = f
    return depth, owner


# ------------------------------------------------------------------ BVH

@njit(cache=True)
def build_bvh(V, F):
    """Median-split BVH over triangle centroids, at most LEAF_SIZE triangles per leaf.

    Returns (bmin, bmax, left, right, start, count, order); a node is a leaf
    when ``count > 0`` and then covers ``order[start:start+count]``.
    """
    n = F.shape[0]
    order = np.arange(n)
    cent = np.empty((n, 3))
    tmin = np.empty((n, 3))
    tmax = np.empty((n, 3))
    for i in range(n):
        for k in range(3):
            x0, x1, x2 = V[F[i, 0], k], V[F[i, 1], k], V[F[i, 2], k]
            tmin[i, k] = min(x0, x1, x2)
            tmax[i, k] = max(x0, x1, x2)
            cent[i, k] = (x0 + x1 + x2) / 3.0
    cap = max(1, 2 * n)
    bmin = np.empty((cap, 3))
    bmax = np.empty((cap, 3))
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    start = np.zeros(cap, dtype=np.int64)
    count = np.zeros(cap, dtype=np.int64)
    stack = np.empty((cap, 3), dtype=np.int64)  # node, lo, hi
    n_nodes = 1
    sp = 0
    stack[sp] = (0, 0, n)
    sp += 1
    while sp > 0:
        sp -= 1
        node, lo, hi = stack[sp, 0], stack[sp, 1], stack[sp, 2]
        for k in range(3):
            mn = np.inf
            mx = -np.inf
            for j in range(lo, hi):
                mn = min(mn, tmin[order[j], k])
                mx = max(mx, tmax[order[j], k])
            bmin[node, k] = mn
            bmax[node, k] = mx
        if hi - lo <= LEAF_SIZE:
            start[node] = lo
            count[node] = hi - lo
            continue
        cmin = np.full(3, np.inf)
        cmax = np.full(3, -np.inf)
        for j in range(lo, hi):
            for k in range(3):
                cmin[k] = min(cmin[k], cent[order[j], k])
                cmax[k] = max(cmax[k], cent[order[j], k])
        axis = int(np.argmax(cmax - cmin))
        seg = order[lo:hi]
        # stable sort keeps the build deterministic under equal centroids
        seg = seg[np.argsort(cent[seg, axis], kind="mergesort")]
        order[lo:hi] = seg
        mid = (lo + hi) // 2
        l_node, r_node = n_nodes, n_nodes + 1
        n_nodes += 2
        left[node], right[node] = l_node, r_node
        stack[sp] = (l_node, lo, mid)
        stack[sp + 1] = (r_node, mid, hi)
        sp += 2
    return bmin[:n_nodes], bmax[:n_nodes], left[:n_nodes], right[:n_nodes], start[:n_nodes], count[:n_nodes], order


@njit(cache=True, inline="always")
def _slab(dx, dy, dz, bmin, bmax, node, tbest):
    t0 = 0.0
    t1 = tbest
    d = (dx, dy, dz)
    for k in range(3):
        if d[k] == 0.0:
            if bmin[node, k] > 0.0 or bmax[node, k] < 0.0:
                return False
        else:
            inv = 1.0 / d[k]
            ta = bmin[node, k] * inv
            tb = bmax[node, k] * inv
            if ta > tb:
                ta, tb = tb, ta
            t0 = max(t0, ta)
            t1 = min(t1, tb)
            if t0 > t1:
                return False
    return True


@njit(cache=True)
def bvh_depth(V, F, bmin, bmax, left, right, start, count, order, width, height, fx, fy, cx, cy):
    depth = np.full((height, width), np.inf)
    owner = np.full((height, width), -1, dtype=np.int64)
    stack = np.empty(128, dtype=np.int64)
    for pv in range(height):
        dy = (pv - cy) / fy
        for pu in range(width):
            dx = (pu - cx) / fx
            best = np.inf
            best_f = -1
            sp = 0
            stack[sp] = 0
            sp += 1
            while sp > 0:
                sp -= 1
                node = stack[sp]
                # boxes touching tbest must still be visited for index tie-breaks
                if not _slab(dx, dy, 1.0, bmin, bmax, node, best * (1 + 1e-12) + 1e-300):
                    continue
                if count[node] > 0:
                    for j in range(start[node], start[node] + count[node]):
                        f = order[j]
                        t = ray_triangle(dx, dy, 1.0, V, F[f, 0], F[f, 1], F[f, 2])
                        if t < best or (t == best and f < best_f):
                            best = t
                            best_f = f
                else:
                    stack[sp] = left[node]
                    stack[sp + 1] = right[node]
                    sp += 2
            depth[pv, pu] = best
            owner[pv, pu] = best_f
    return depth, owner


# ------------------------------------------------------------- clipping

@njit(cache=True)
def window_min_z(V, F, ex, ey):
    """Minimum z of the surface inside the prism |x| <= ex, |y| <= ey.

    Each triangle is clipped against the four side planes (Sutherland–Hodgman);
    z is linear over the clipped polygon so its minimum is at a polygon vertex.
    Returns inf when no surface lies inside the prism.
    """
    best = np.inf
    poly = np.empty((16, 3))
    tmp = np.empty((16, 3))
    for i in range(F.shape[0]):
        xmn = np.inf
        xmx = -np.inf
        ymn = np.inf
        ymx = -np.inf
        zmn = np.inf
        for j in range(3):
            x, y, z = V[F[i, j], 0], V[F[i, j], 1], V[F[i, j], 2]
            xmn = min(xmn, x)
            xmx = max(xmx, x)
            ymn = min(ymn, y)
            ymx = max(ymx, y)
            zmn = min(zmn, z)
        if xmn > ex or xmx < -ex or ymn > ey or ymx < -ey or zmn >= best:
            continue
        if xmn >= -ex and xmx <= ex and ymn >= -ey and ymx <= ey:
            best = zmn
            continue
        n = 3
        for j in range(3):
            for k in range(3):
                poly[j, k] = V[F[i, j], k]
        for plane in range(4):
            axis = plane // 2
            sign = 1.0 if plane % 2 == 0 else -1.0
            lim = ex if axis == 0 else ey
            m = 0
            for j in range(n):
                cur = poly[j]
                nxt = poly[(j + 1) % n]
                fc = sign * cur[axis] - lim
                fn = sign * nxt[axis] - lim
                if fc <= 0.0:
                    tmp[m] = cur
                    m += 1
                if (fc < 0.0 and fn > 0.0) or (fc > 0.0 and fn < 0.0):
                    s = fc / (fc - fn)
                    for k in range(3):
                        tmp[m, k] = cur[k] + s * (nxt[k] - cur[k])
                    m += 1
            n = m
            for j in range(n):
                for k in range(3):
                    poly[j, k] = tmp[j, k]
            if n == 0:
                break
        for j in range(n):
            if poly[j, 2] < best:
                best = poly[j, 2]
    return best


# ------------------------------------------------------------ registration

@njit(cache=True)
def _lse_shifted(X, TY, m, n, inv2s2, by_row):
    """log sum_k exp(-|.|² inv2s2) over a row (fixed m) or column (fixed n), min-shifted."""
    cnt = X.shape[0] if by_row else TY.shape[0]
    mn = np.inf
    for k in range(cnt):
        a = m if by_row else k
        b = k if by_row else n
        d2 = (X[b, 0] - TY[a, 0]) ** 2 + (X[b, 1] - TY[a, 1]) ** 2 + (X[b, 2] - TY[a, 2]) ** 2
        mn = min(mn, d2)
    s = 0.0
    for k in range(cnt):
        a = m if by_row else k
        b = k if by_row else n
        d2 = (X[b, 0] - TY[a, 0]) ** 2 + (X[b, 1] - TY[a, 1]) ** 2 + (X[b, 2] - TY[a, 2]) ** 2
        s += np.exp(-(d2 - mn) * inv2s2)
    return -mn * inv2s2 + np.log(s)


@njit(cache=True)
def gmm_weights(X, TY, sigma, w):
    """Symmetric EM weights and objective for two Gaussian mixtures.

    ``W[m, n] = P(m | x_n) + P(n | Ty_m)``, where each posterior mixes the
    other cloud's isotropic Gaussians (mass ``1-w``, equal weights) with a
    uniform term of density ``(w/N) (2 pi sigma^2)^-1.5`` (resp. ``w/M``).
    The objective is the sum of both negative log-likelihoods. Rows or columns
    whose kernel sums underflow are redone with a min-shift.
    """
    M, N = TY.shape[0], X.shape[0]
    inv2s2 = 1.0 / (2.0 * sigma * sigma)
    lpref = -1.5 * np.log(2.0 * np.pi * sigma * sigma) + np.log1p(-w)
    W = np.empty((M, N))
    rs = np.zeros(M)
    cs = np.zeros(N)
    for m in range(M):
        y0, y1, y2 = TY[m, 0], TY[m, 1], TY[m, 2]
        acc = 0.0
        for n in range(N):
            d2 = (X[n, 0] - y0) ** 2 + (X[n, 1] - y1) ** 2 + (X[n, 2] - y2) ** 2
            k = np.exp(-d2 * inv2s2)
            W[m, n] = k
            acc += k
            cs[n] += k
        rs[m] = acc
    # uniform density in units of the Gaussian normalization, so responsibilities depend on d/sigma only
    lg = -1.5 * np.log(2.0 * np.pi * sigma * sigma)
    lu_x = lg + np.log(w / N) if w > 0 else -np.inf
    lu_y = lg + np.log(w / M) if w > 0 else -np.inf
    lM, lN = np.log(M), np.log(N)
    lden_x = np.empty(N)
    lden_y = np.empty(M)
    for n in range(N):
        lk = np.log(cs[n]) if cs[n] > 0 else _lse_shifted(X, TY, 0, n, inv2s2, False)
        lden_x[n] = np.logaddexp(lpref - lM + lk, lu_x)
    for m in range(M):
        lk = np.log(rs[m]) if rs[m] > 0 else _lse_shifted(X, TY, m, 0, inv2s2, True)
        lden_y[m] = np.logaddexp(lpref - lN + lk, lu_y)
    cx = np.exp(lpref - lM - lden_x)
    cy = np.exp(lpref - lN - lden_y)
    for m in range(M):
        for n in range(N):
            k = W[m, n]
            if k == 0.0 and (cs[n] == 0.0 or rs[m] == 0.0):
                # both kernel and density underflowed: evaluate in log space
                d2 = (X[n, 0] - TY[m, 0]) ** 2 + (X[n, 1] - TY[m, 1]) ** 2 + (X[n, 2] - TY[m, 2]) ** 2
                W[m, n] = (np.exp(lpref - lM - d2 * inv2s2 - lden_x[n])
                           + np.exp(lpref - lN - d2 * inv2s2 - lden_y[m]))
            else:
                W[m, n] = k * (cx[n] + cy[m])
    return W, -(lden_x.sum() + lden_y.sum())
