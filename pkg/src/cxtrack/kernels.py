"""Hot numeric kernels: k-NN search, farthest-point sampling, polygon clipping.

Each kernel has a numba ``@njit`` implementation and a pure-numpy fallback
that performs the same arithmetic in the same order, so the two backends
return identical results. Selection:

* default: numba when importable
* ``CXTRACK_DISABLE_NUMBA=1`` (or ``true``/``yes``): force the numpy path
* :func:`set_backend` switches at runtime (used by tests and the benchmark)

``benchmarks/bench_kernels.py`` times one against the other.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = [
    "HAS_NUMBA",
    "active_backend",
    "set_backend",
    "knn_indices",
    "fps_indices",
    "rect_intersection_area",
]

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap if not (args and callable(args[0])) else args[0]


def _env_disabled() -> bool:
    return os.environ.get("CXTRACK_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")


_BACKEND = "numba" if (HAS_NUMBA and not _env_disabled()) else "numpy"


def active_backend() -> str:
    return _BACKEND


def set_backend(name: str) -> None:
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    _BACKEND = name


# ---------------------------------------------------------------------------
# k nearest neighbors (excluding self, ties broken by lower index)
# ---------------------------------------------------------------------------

def _knn_numpy(coords: np.ndarray, k: int) -> np.ndarray:
    n = coords.shape[0]
    d2 = ((coords[:, None, :] - coords[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    # stable sort keeps the lower index first on distance ties
    order = np.argsort(d2, axis=1, kind="stable")
    return np.ascontiguousarray(order[:, :k], dtype=np.int64)


@njit(cache=True)
def _knn_numba(coords, k):  # pragma: no cover - exercised via dispatch
    n = coords.shape[0]
    out = np.empty((n, k), dtype=np.int64)
    best_d = np.empty(k, dtype=np.float64)
    best_i = np.empty(k, dtype=np.int64)
    for i in range(n):
        for t in range(k):
            best_d[t] = np.inf
            best_i[t] = n  # sentinel larger than any real index
        for j in range(n):
            if j == i:
                continue
            dx = coords[i, 0] - coords[j, 0]
            dy = coords[i, 1] - coords[j, 1]
            dz = coords[i, 2] - coords[j, 2]
            d2 = (dx * dx + dy * dy) + dz * dz
            # insertion keyed on (distance, index); candidates arrive in
            # ascending j, so equal distances keep the lower index first
            t = k
            while t > 0 and (d2 < best_d[t - 1] or (d2 == best_d[t - 1] and j < best_i[t - 1])):
                t -= 1
            if t < k:
                for s in range(k - 1, t, -1):
                    best_d[s] = best_d[s - 1]
                    best_i[s] = best_i[s - 1]
                best_d[t] = d2
                best_i[t] = j
        for t in range(k):
            out[i, t] = best_i[t]
    return out


def knn_indices(coords: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest Euclidean neighbors of each point (no self)."""
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if k < 1:
        raise ValueError("k must be at least 1")
    if k >= n:
        raise ValueError(f"k={k} must be smaller than the point count {n}")
    if _BACKEND == "numba":
        return _knn_numba(coords, k)
    return _knn_numpy(coords, k)


# ---------------------------------------------------------------------------
# farthest point sampling (deterministic: starts at index 0)
# ---------------------------------------------------------------------------

def _fps_numpy(coords: np.ndarray, m: int) -> np.ndarray:
    n = coords.shape[0]
    idx = np.empty(m, dtype=np.int64)
    idx[0] = 0
    diff = coords - coords[0]
    d2 = (diff[:, 0] ** 2 + diff[:, 1] ** 2) + diff[:, 2] ** 2
    for t in range(1, m):
        i = int(np.argmax(d2))  # first occurrence wins ties
        idx[t] = i
        diff = coords - coords[i]
        nd = (diff[:, 0] ** 2 + diff[:, 1] ** 2) + diff[:, 2] ** 2
        np.minimum(d2, nd, out=d2)
    return idx


@njit(cache=True)
def _fps_numba(coords, m):  # pragma: no cover - exercised via dispatch
    n = coords.shape[0]
    idx = np.empty(m, dtype=np.int64)
    d2 = np.empty(n, dtype=np.float64)
    idx[0] = 0
    for j in range(n):
        dx = coords[j, 0] - coords[0, 0]
        dy = coords[j, 1] - coords[0, 1]
        dz = coords[j, 2] - coords[0, 2]
        d2[j] = (dx * dx + dy * dy) + dz * dz
    for t in range(1, m):
        best = 0
        for j in range(1, n):
            if d2[j] > d2[best]:
                best = j
        idx[t] = best
        for j in range(n):
            dx = coords[j, 0] - coords[best, 0]
            dy = coords[j, 1] - coords[best, 1]
            dz = coords[j, 2] - coords[best, 2]
            nd = (dx * dx + dy * dy) + dz * dz
            if nd < d2[j]:
                d2[j] = nd
    return idx


def fps_indices(coords: np.ndarray, m: int) -> np.ndarray:
    """Farthest-point subsampling to m indices, seeded at index 0.

    If m >= N the identity selection is returned.
    """
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if m < 1:
        raise ValueError("sample budget must be at least 1")
    if m >= n:
        return np.arange(n, dtype=np.int64)
    if _BACKEND == "numba":
        return _fps_numba(coords, m)
    return _fps_numpy(coords, m)


# ---------------------------------------------------------------------------
# convex polygon clipping (Sutherland-Hodgman) for rotated box footprints
# ---------------------------------------------------------------------------
#
# Both quads are counterclockwise. The inside test is cross >= 0 so that
# vertices exactly on a clip edge survive; identical boxes therefore clip to
# themselves and score IoU 1 instead of collapsing to an empty polygon.

def _clip_area_python(sub: np.ndarray, clip: np.ndarray) -> float:
    poly_x = [sub[i, 0] for i in range(4)]
    poly_y = [sub[i, 1] for i in range(4)]
    for e in range(4):
        cx1 = clip[e, 0]
        cy1 = clip[e, 1]
        cx2 = clip[(e + 1) % 4, 0]
        cy2 = clip[(e + 1) % 4, 1]
        ex = cx2 - cx1
        ey = cy2 - cy1
        n = len(poly_x)
        if n == 0:
            return 0.0
        out_x = []
        out_y = []
        sx = poly_x[n - 1]
        sy = poly_y[n - 1]
        s_in = ex * (sy - cy1) - ey * (sx - cx1) >= 0.0
        for i in range(n):
            px = poly_x[i]
            py = poly_y[i]
            p_in = ex * (py - cy1) - ey * (px - cx1) >= 0.0
            if p_in != s_in:
                dx = px - sx
                dy = py - sy
                denom = ex * dy - ey * dx
                t = (ex * (cy1 - sy) - ey * (cx1 - sx)) / denom
                out_x.append(sx + t * dx)
                out_y.append(sy + t * dy)
            if p_in:
                out_x.append(px)
                out_y.append(py)
            sx = px
            sy = py
            s_in = p_in
        poly_x = out_x
        poly_y = out_y
    n = len(poly_x)
    if n < 3:
        return 0.0
    area2 = 0.0
    for i in range(n):
        j = (i + 1) % n
        area2 += poly_x[i] * poly_y[j] - poly_x[j] * poly_y[i]
    return 0.5 * abs(area2)


@njit(cache=True)
def _clip_area_numba(sub, clip):  # pragma: no cover - exercised via dispatch
    poly_x = np.empty(16, dtype=np.float64)
    poly_y = np.empty(16, dtype=np.float64)
    buf_x = np.empty(16, dtype=np.float64)
    buf_y = np.empty(16, dtype=np.float64)
    n = 4
    for i in range(4):
        poly_x[i] = sub[i, 0]
        poly_y[i] = sub[i, 1]
    for e in range(4):
        cx1 = clip[e, 0]
        cy1 = clip[e, 1]
        cx2 = clip[(e + 1) % 4, 0]
        cy2 = clip[(e + 1) % 4, 1]
        ex = cx2 - cx1
        ey = cy2 - cy1
        if n == 0:
            return 0.0
        m = 0
        sx = poly_x[n - 1]
        sy = poly_y[n - 1]
        s_in = ex * (sy - cy1) - ey * (sx - cx1) >= 0.0
        for i in range(n):
            px = poly_x[i]
            py = poly_y[i]
            p_in = ex * (py - cy1) - ey * (px - cx1) >= 0.0
            if p_in != s_in:
                dx = px - sx
                dy = py - sy
                denom = ex * dy - ey * dx
                t = (ex * (cy1 - sy) - ey * (cx1 - sx)) / denom
                buf_x[m] = sx + t * dx
                buf_y[m] = sy + t * dy
                m += 1
            if p_in:
                buf_x[m] = px
                buf_y[m] = py
                m += 1
            sx = px
            sy = py
            s_in = p_in
        n = m
        for i in range(n):
            poly_x[i] = buf_x[i]
            poly_y[i] = buf_y[i]
    if n < 3:
        return 0.0
    area2 = 0.0
    for i in range(n):
        j = (i + 1) % n
        area2 += poly_x[i] * poly_y[j] - poly_x[j] * poly_y[i]
    return 0.5 * abs(area2)


def rect_intersection_area(corners_a: np.ndarray, corners_b: np.ndarray) -> float:
    """Intersection area of two convex quads given as CCW 4x2 corner arrays."""
    a = np.ascontiguousarray(corners_a, dtype=np.float64)
    b = np.ascontiguousarray(corners_b, dtype=np.float64)
    if a.shape != (4, 2) or b.shape != (4, 2):
        raise ValueError("corner arrays must have shape (4, 2)")
    if _BACKEND == "numba":
        return float(_clip_area_numba(a, b))
    return _clip_area_python(a, b)
