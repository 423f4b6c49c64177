"""Hot numeric kernels: nearest-neighbor search and triangle rasterization.

Each kernel has a pure-numpy implementation and, when numba is importable,
an @njit-compiled twin. Set the environment variable QUADFIT_DISABLE_NUMBA=1
to force the numpy path (useful for debugging and for the kernel benchmark).
Both paths are deterministic for identical inputs.
"""
from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("QUADFIT_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

if not _DISABLED:
    try:
        import numba
    except ImportError:
        numba = None
else:
    numba = None

USING_NUMBA = numba is not None


def backend_name() -> str:
    return "numba" if USING_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# nearest neighbors


def _nn_indices_py(query, ref):
    n = query.shape[0]
    m = ref.shape[0]
    d = query.shape[1]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        best = np.inf
        best_j = 0
        for j in range(m):
            acc = 0.0
            for k in range(d):
                t = query[i, k] - ref[j, k]
                acc += t * t
            if acc < best:
                best = acc
                best_j = j
        out[i] = best_j
    return out


def _nn_indices_np(query, ref):
    # blocked |q|^2 + |r|^2 - 2 q.r trick; ties resolve to the lowest index
    # in both paths because argmin keeps the first minimum.
    q2 = np.einsum("nd,nd->n", query, query)
    r2 = np.einsum("md,md->m", ref, ref)
    n = query.shape[0]
    out = np.empty(n, dtype=np.int64)
    block = max(1, int(4_000_000 // max(ref.shape[0], 1)))
    for s in range(0, n, block):
        e = min(s + block, n)
        d2 = q2[s:e, None] + r2[None, :] - 2.0 * (query[s:e] @ ref.T)
        out[s:e] = np.argmin(d2, axis=1)
    return out


# ---------------------------------------------------------------------------
# rasterization

_FAR = 1e300


def _rasterize_py(pix, zinv, faces, width, height):
    zbuf = np.full((height, width), _FAR, dtype=np.float64)
    fid = np.full((height, width), -1, dtype=np.int64)
    for f in range(faces.shape[0]):
        i0 = faces[f, 0]
        i1 = faces[f, 1]
        i2 = faces[f, 2]
        if zinv[i0] <= 0.0 or zinv[i1] <= 0.0 or zinv[i2] <= 0.0:
            continue
        x0 = pix[i0, 0]
        y0 = pix[i0, 1]
        x1 = pix[i1, 0]
        y1 = pix[i1, 1]
        x2 = pix[i2, 0]
        y2 = pix[i2, 1]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area < 0.0:
            # flip to CCW so the edge tests below share one sign convention
            x1, x2 = x2, x1
            y1, y2 = y2, y1
            t = i1
            i1 = i2
            i2 = t
            area = -area
        if area < 1e-12:
            continue
        lo_x = min(x0, min(x1, x2))
        hi_x = max(x0, max(x1, x2))
        lo_y = min(y0, min(y1, y2))
        hi_y = max(y0, max(y1, y2))
        ix0 = int(np.floor(lo_x - 0.5))
        ix1 = int(np.ceil(hi_x - 0.5))
        iy0 = int(np.floor(lo_y - 0.5))
        iy1 = int(np.ceil(hi_y - 0.5))
        if ix0 < 0:
            ix0 = 0
        if iy0 < 0:
            iy0 = 0
        if ix1 > width - 1:
            ix1 = width - 1
        if iy1 > height - 1:
            iy1 = height - 1
        z0 = zinv[i0]
        z1 = zinv[i1]
        z2 = zinv[i2]
        for iy in range(iy0, iy1 + 1):
            py = iy + 0.5
            for ix in range(ix0, ix1 + 1):
                px = ix + 0.5
                w0 = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
                w1 = (x0 - x2) * (py - y2) - (y0 - y2) * (px - x2)
                w2 = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                inv_z = (w0 * z0 + w1 * z1 + w2 * z2) / area
                if inv_z <= 0.0:
                    continue
                depth = 1.0 / inv_z
                if depth < zbuf[iy, ix]:
                    zbuf[iy, ix] = depth
                    fid[iy, ix] = f
    return zbuf, fid


def _rasterize_np(pix, zinv, faces, width, height):
    # same pixel-center coverage rule as _rasterize_py, vectorized per face
    zbuf = np.full((height, width), _FAR, dtype=np.float64)
    fid = np.full((height, width), -1, dtype=np.int64)
    for f in range(faces.shape[0]):
        i0, i1, i2 = faces[f]
        z = zinv[[i0, i1, i2]]
        if np.any(z <= 0.0):
            continue
        tri = pix[[i0, i1, i2]]
        (x0, y0), (x1, y1), (x2, y2) = tri
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area < 0.0:
            x1, y1, x2, y2 = x2, y2, x1, y1
            z = z[[0, 2, 1]]
            area = -area
        if area < 1e-12:
            continue
        ix0 = max(int(np.floor(min(x0, x1, x2) - 0.5)), 0)
        ix1 = min(int(np.ceil(max(x0, x1, x2) - 0.5)), width - 1)
        iy0 = max(int(np.floor(min(y0, y1, y2) - 0.5)), 0)
        iy1 = min(int(np.ceil(max(y0, y1, y2) - 0.5)), height - 1)
        if ix1 < ix0 or iy1 < iy0:
            continue
        px = np.arange(ix0, ix1 + 1, dtype=np.float64) + 0.5
        py = (np.arange(iy0, iy1 + 1, dtype=np.float64) + 0.5)[:, None]
        w0 = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
        w1 = (x0 - x2) * (py - y2) - (y0 - y2) * (px - x2)
        w2 = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
        inside = (w0 >= 0.0) & (w1 >= 0.0) & (w2 >= 0.0)
        inv_z = (w0 * z[0] + w1 * z[1] + w2 * z[2]) / area
        inside &= inv_z > 0.0
        if not inside.any():
            continue
        depth = np.where(inside, 1.0 / np.where(inv_z > 0.0, inv_z, 1.0), _FAR)
        window = (slice(iy0, iy1 + 1), slice(ix0, ix1 + 1))
        closer = depth < zbuf[window]
        zbuf[window] = np.where(closer, depth, zbuf[window])
        fid[window] = np.where(closer, f, fid[window])
    return zbuf, fid


if USING_NUMBA:
    _nn_indices_impl = numba.njit(cache=True)(_nn_indices_py)
    _rasterize_impl = numba.njit(cache=True)(_rasterize_py)
else:
    _nn_indices_impl = _nn_indices_np
    _rasterize_impl = _rasterize_np


def nn_indices(query: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Index of the nearest row of `ref` for every row of `query`.

    Low-dimensional queries (the pixel-space ones) go through the compiled
    loop; high-dimensional ones (spectral embeddings) are faster through the
    BLAS-backed fallback regardless of backend.
    """
    if query.shape[0] == 0:
        return np.empty(0, dtype=np.int64)
    if ref.shape[0] == 0:
        raise ValueError("nearest-neighbor reference set is empty")
    q = np.ascontiguousarray(query, dtype=np.float64)
    r = np.ascontiguousarray(ref, dtype=np.float64)
    if query.shape[1] > 8:
        return _nn_indices_np(q, r)
    return _nn_indices_impl(q, r)


def rasterize(pix: np.ndarray, depth: np.ndarray, faces: np.ndarray,
              width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Depth-buffered triangle rasterization at pixel centers.

    `pix` holds projected vertex positions, `depth` camera-space depths
    (faces with any vertex at depth <= 0 are skipped whole). Depth is
    perspective-correct (1/z interpolated). Returns (zbuf, face_id) where
    uncovered pixels carry zbuf=inf and face_id=-1.
    """
    p = np.ascontiguousarray(pix, dtype=np.float64)
    zinv = np.zeros(depth.shape[0], dtype=np.float64)
    pos = depth > 0.0
    zinv[pos] = 1.0 / depth[pos]
    f = np.ascontiguousarray(faces, dtype=np.int64)
    zbuf, fid = _rasterize_impl(p, zinv, f, int(width), int(height))
    zbuf = np.where(fid < 0, np.inf, zbuf)
    return zbuf, fid
