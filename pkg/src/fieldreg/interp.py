"""Sampling kernels shared by resampling and warping.

Positions are fractional voxel indices into the sampled array. Anything
outside the grid clamps to the border voxel (clamp-to-edge); no synthetic
background value is ever introduced. Nearest-neighbor rounding breaks ties
toward the lower index so results do not depend on platform rounding modes.
"""

from __future__ import annotations

import numpy as np


def trilinear(samples: np.ndarray, px, py, pz) -> np.ndarray:
    """Trilinear interpolation of a scalar volume at fractional indices.

    Index arithmetic runs in float64; the value blend runs in the sample
    dtype. Exactly-integer positions reproduce the stored sample values.
    """
    nx, ny, nz = samples.shape
    px, py, pz = np.broadcast_arrays(px, py, pz)
    shape = px.shape
    dt = samples.dtype

    cx = np.clip(px, 0.0, nx - 1.0).ravel()
    cy = np.clip(py, 0.0, ny - 1.0).ravel()
    cz = np.clip(pz, 0.0, nz - 1.0).ravel()
    x0 = np.floor(cx).astype(np.intp)
    y0 = np.floor(cy).astype(np.intp)
    z0 = np.floor(cz).astype(np.intp)
    fx = (cx - x0).astype(dt)
    fy = (cy - y0).astype(dt)
    fz = (cz - z0).astype(dt)
    x1 = np.minimum(x0 + 1, nx - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    z1 = np.minimum(z0 + 1, nz - 1)

    flat = samples.ravel()
    sy, sx = nz, ny * nz
    one = dt.type(1)

    def corner(ix, iy, iz):
        return flat[ix * sx + iy * sy + iz]

    c00 = corner(x0, y0, z0) * (one - fz) + corner(x0, y0, z1) * fz
    c01 = corner(x0, y1, z0) * (one - fz) + corner(x0, y1, z1) * fz
    c10 = corner(x1, y0, z0) * (one - fz) + corner(x1, y0, z1) * fz
    c11 = corner(x1, y1, z0) * (one - fz) + corner(x1, y1, z1) * fz
    c0 = c00 * (one - fy) + c01 * fy
    c1 = c10 * (one - fy) + c11 * fy
    out = c0 * (one - fx) + c1 * fx
    return out.reshape(shape)


def trilinear_grad(samples: np.ndarray, px, py, pz) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Derivative of :func:`trilinear` with respect to each position axis.

    Where a position is clamped the sampled value is locally constant, so
    the corresponding derivative component is zero.
    """
    nx, ny, nz = samples.shape
    px, py, pz = np.broadcast_arrays(px, py, pz)
    shape = px.shape

    dt = samples.dtype
    inx = ((px > 0.0) & (px < nx - 1.0)).ravel()
    iny = ((py > 0.0) & (py < ny - 1.0)).ravel()
    inz = ((pz > 0.0) & (pz < nz - 1.0)).ravel()

    cx = np.clip(px, 0.0, nx - 1.0).ravel()
    cy = np.clip(py, 0.0, ny - 1.0).ravel()
    cz = np.clip(pz, 0.0, nz - 1.0).ravel()
    x0 = np.floor(cx).astype(np.intp)
    y0 = np.floor(cy).astype(np.intp)
    z0 = np.floor(cz).astype(np.intp)
    fx = (cx - x0).astype(dt)
    fy = (cy - y0).astype(dt)
    fz = (cz - z0).astype(dt)
    x1 = np.minimum(x0 + 1, nx - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    z1 = np.minimum(z0 + 1, nz - 1)

    flat = samples.ravel()
    sy, sx = nz, ny * nz

    def corner(ix, iy, iz):
        return flat[ix * sx + iy * sy + iz]

    v000 = corner(x0, y0, z0)
    v001 = corner(x0, y0, z1)
    v010 = corner(x0, y1, z0)
    v011 = corner(x0, y1, z1)
    v100 = corner(x1, y0, z0)
    v101 = corner(x1, y0, z1)
    v110 = corner(x1, y1, z0)
    v111 = corner(x1, y1, z1)

    one = dt.type(1)
    wx0, wx1 = one - fx, fx
    wy0, wy1 = one - fy, fy
    wz0, wz1 = one - fz, fz

    gx = (wy0 * wz0 * (v100 - v000) + wy0 * wz1 * (v101 - v001)
          + wy1 * wz0 * (v110 - v010) + wy1 * wz1 * (v111 - v011))
    gy = (wx0 * wz0 * (v010 - v000) + wx0 * wz1 * (v011 - v001)
          + wx1 * wz0 * (v110 - v100) + wx1 * wz1 * (v111 - v101))
    gz = (wx0 * wy0 * (v001 - v000) + wx0 * wy1 * (v011 - v010)
          + wx1 * wy0 * (v101 - v100) + wx1 * wy1 * (v111 - v110))
    gx *= inx
    gy *= iny
    gz *= inz
    return gx.reshape(shape), gy.reshape(shape), gz.reshape(shape)


def nearest_indices(p, n: int) -> np.ndarray:
    """Round fractional indices to the nearest integer, ties toward the
    lower index, clamped to [0, n-1]."""
    idx = np.ceil(np.asarray(p, dtype=np.float64) - 0.5)
    return np.clip(idx, 0, n - 1).astype(np.intp)


def nearest(labels: np.ndarray, px, py, pz) -> np.ndarray:
    """Nearest-neighbor lookup of an integer volume at fractional indices."""
    nx, ny, nz = labels.shape
    px, py, pz = np.broadcast_arrays(px, py, pz)
    ix = nearest_indices(px, nx).ravel()
    iy = nearest_indices(py, ny).ravel()
    iz = nearest_indices(pz, nz).ravel()
    out = labels.ravel()[(ix * ny + iy) * nz + iz]
    return out.reshape(px.shape)
