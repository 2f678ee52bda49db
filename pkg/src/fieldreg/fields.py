"""Affine transforms, dense displacement fields, warping, and field analysis.

Displacements are stored in voxel units of their grid, component-first as a
``(3, nx, ny, nz)`` array: a field ``u`` maps voxel ``x`` to ``x + u(x)``.
The total transform of the engine is an ordered sum of such fields applied
in a single final warp of the original moving image.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError, GridMismatchError, TooSmallGridError
from .interp import nearest_indices, trilinear, trilinear_grad
from .volume import Grid, LabelMask, Volume


@dataclass(frozen=True)
class AffineParams:
    """12-parameter affine transform in voxel units: x -> A @ x + t."""

    linear: np.ndarray      # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        A = np.asarray(self.linear, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if A.shape != (3, 3) or t.shape != (3,):
            raise ContractError("affine params must be a 3x3 matrix and a 3-vector")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(t))):
            raise ContractError("affine params must be finite")
        object.__setattr__(self, "linear", A)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "AffineParams":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_params12(cls, p: np.ndarray) -> "AffineParams":
        p = np.asarray(p, dtype=np.float64).reshape(12)
        return cls(p[:9].reshape(3, 3), p[9:])

    def params12(self) -> np.ndarray:
        return np.concatenate([self.linear.ravel(), self.translation])

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.linear))

    @property
    def orientation_reversing(self) -> bool:
        return self.det <= 0.0


@dataclass(frozen=True)
class DisplacementField:
    """Per-voxel 3-vector displacements, voxel units, shape (3, nx, ny, nz)."""

    grid: Grid
    u: np.ndarray

    def __post_init__(self):
        u = self.u
        if not isinstance(u, np.ndarray) or not np.issubdtype(u.dtype, np.floating):
            raise ContractError("field components must be a floating-point ndarray")
        if u.shape != (3, *self.grid.dims):
            raise GridMismatchError(f"field shape {u.shape} != (3, *{self.grid.dims})")
        if not np.all(np.isfinite(u)):
            raise ContractError("field components must be finite")

    @classmethod
    def zero(cls, grid: Grid, dtype=np.float32) -> "DisplacementField":
        return cls(grid, np.zeros((3, *grid.dims), dtype=dtype))

    def max_displacement(self) -> float:
        if self.grid.voxel_count == 0:
            return 0.0
        return float(np.sqrt((self.u.astype(np.float64) ** 2).sum(axis=0).max()))


@dataclass(frozen=True)
class JacobianMap:
    """Per-voxel determinant of the transform Jacobian (identity + field)."""

    grid: Grid
    det: np.ndarray

    def __post_init__(self):
        if self.det.shape != self.grid.dims:
            raise GridMismatchError("jacobian map shape does not match grid")
        if not np.all(np.isfinite(self.det)):
            raise ContractError("jacobian determinants must be finite")


def affine_to_field(a: AffineParams, grid: Grid, dtype=np.float32) -> DisplacementField:
    """Densify an affine transform: u(x) = (A - I) @ x + t per voxel index."""
    nx, ny, nz = grid.dims
    M = a.linear - np.eye(3)
    t = a.translation
    X = np.arange(nx, dtype=np.float64)[:, None, None]
    Y = np.arange(ny, dtype=np.float64)[None, :, None]
    Z = np.arange(nz, dtype=np.float64)[None, None, :]
    u = np.empty((3, nx, ny, nz), dtype=dtype)
    for k in range(3):
        u[k] = M[k, 0] * X + M[k, 1] * Y + M[k, 2] * Z + t[k]
    return DisplacementField(grid, u)


def _sample_positions(field: DisplacementField, source: Grid):
    """Fractional source indices hit by each output voxel of a warp."""
    nx, ny, nz = field.grid.dims
    X = np.arange(nx, dtype=np.float64)[:, None, None]
    Y = np.arange(ny, dtype=np.float64)[None, :, None]
    Z = np.arange(nz, dtype=np.float64)[None, None, :]
    px = X + field.u[0]
    py = Y + field.u[1]
    pz = Z + field.u[2]
    if source != field.grid:
        # Positions are voxel indices of the field grid; convert through
        # physical coordinates when the source lives on a different grid.
        g = field.grid
        px = (g.origin[0] + px * g.spacing[0] - source.origin[0]) / source.spacing[0]
        py = (g.origin[1] + py * g.spacing[1] - source.origin[1]) / source.spacing[1]
        pz = (g.origin[2] + pz * g.spacing[2] - source.origin[2]) / source.spacing[2]
    return px, py, pz


def warp(moving: Volume, field: DisplacementField) -> Volume:
    """Resample the moving image through the field: out(x) = moving(x + u(x))."""
    px, py, pz = _sample_positions(field, moving.grid)
    out = trilinear(moving.samples, px, py, pz)
    if moving.normalized:
        out = np.clip(out, 0.0, 1.0)
    return Volume(field.grid, out, moving.normalized)


def warp_with_grad(moving: Volume, field: DisplacementField):
    """Warp plus the derivative of each output voxel w.r.t. its displacement.

    Returns ``(warped, grad)`` with ``grad`` shaped (3, nx, ny, nz): the
    sampled spatial gradient of the moving image at the warped positions,
    which is the chain-rule factor from image values back to the field.
    """
    px, py, pz = _sample_positions(field, moving.grid)
    out = trilinear(moving.samples, px, py, pz)
    if moving.normalized:
        out = np.clip(out, 0.0, 1.0)
    gx, gy, gz = trilinear_grad(moving.samples, px, py, pz)
    grad = np.stack([gx, gy, gz])
    if moving.grid != field.grid:
        for a in range(3):
            grad[a] *= field.grid.spacing[a] / moving.grid.spacing[a]
    return Volume(field.grid, out, moving.normalized), grad


def warp_array(samples: np.ndarray, field: DisplacementField) -> np.ndarray:
    """Warp a bare array living on the field grid (soft masks, channels)."""
    if samples.shape != field.grid.dims:
        raise GridMismatchError("array shape does not match field grid")
    px, py, pz = _sample_positions(field, field.grid)
    return trilinear(samples, px, py, pz)


def warp_array_with_grad(samples: np.ndarray, field: DisplacementField):
    if samples.shape != field.grid.dims:
        raise GridMismatchError("array shape does not match field grid")
    px, py, pz = _sample_positions(field, field.grid)
    out = trilinear(samples, px, py, pz)
    gx, gy, gz = trilinear_grad(samples, px, py, pz)
    return out, np.stack([gx, gy, gz])


def warp_mask_soft(one_hot: dict[int, np.ndarray], field: DisplacementField) -> dict[int, np.ndarray]:
    """Warp per-label soft masks channel by channel; values stay in [0, 1]."""
    out = {}
    for label, ch in one_hot.items():
        if ch.size and (ch.min() < 0.0 or ch.max() > 1.0):
            raise ContractError("soft mask channels must lie in [0, 1]")
        out[label] = np.clip(warp_array(ch, field), 0.0, 1.0)
    return out


def warp_mask_nearest(m: LabelMask, field: DisplacementField) -> LabelMask:
    """Warp hard labels: label(x) = moving label at round(x + u(x))."""
    px, py, pz = _sample_positions(field, m.grid)
    nx, ny, nz = m.grid.dims
    ix = nearest_indices(px, nx)
    iy = nearest_indices(py, ny)
    iz = nearest_indices(pz, nz)
    out = m.labels[ix, iy, iz]
    return LabelMask(field.grid, out, dict(m.label_table))


def accumulate(fields: Sequence[DisplacementField]) -> DisplacementField:
    """Sum displacement fields componentwise in the given order."""
    if not fields:
        raise ContractError("accumulate requires at least one field")
    grid = fields[0].grid
    for f in fields[1:]:
        if f.grid != grid:
            raise GridMismatchError("accumulated fields must share one grid")
    total = fields[0].u.copy()
    for f in fields[1:]:
        total = total + f.u
    return DisplacementField(grid, total)


def jacobian(field: DisplacementField) -> JacobianMap:
    """Determinant of I + grad(u) per voxel.

    Central differences at interior voxels, one-sided at the boundary, so
    the map covers the full domain.
    """
    if any(d < 3 for d in field.grid.dims):
        raise TooSmallGridError(f"jacobian needs dims >= 3 per axis, got {field.grid.dims}")
    u = field.u.astype(np.float64, copy=False)
    J = np.empty((3, 3, *field.grid.dims))
    for k in range(3):
        for a in range(3):
            J[k, a] = np.gradient(u[k], axis=a, edge_order=1)
        J[k, k] += 1.0
    det = (J[0, 0] * (J[1, 1] * J[2, 2] - J[1, 2] * J[2, 1])
           - J[0, 1] * (J[1, 0] * J[2, 2] - J[1, 2] * J[2, 0])
           + J[0, 2] * (J[1, 0] * J[2, 1] - J[1, 1] * J[2, 0]))
    return JacobianMap(field.grid, det)


def folding_fraction(j: JacobianMap) -> float:
    """Fraction of voxels with det <= 0 (inverted or collapsed space)."""
    return float(np.mean(j.det <= 0.0))
