"""Voxel grids, intensity volumes, label masks, and preprocessing steps.

All types are immutable value objects: operations return new instances and
never modify their inputs. Arrays are indexed ``[ix, iy, iz]`` and a voxel
center sits at ``origin + index * spacing`` in millimeters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ContractError,
    EmptyMaskError,
    GridMismatchError,
    InvalidRangeError,
)
from .interp import nearest_indices, trilinear

DEFAULT_CLIP_LO = -1000.0
DEFAULT_CLIP_HI = 1000.0


@dataclass(frozen=True)
class Grid:
    """Regular 3D voxel lattice: counts, mm spacing, and mm origin."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            raise InvalidRangeError(f"grid dims must be three counts >= 1, got {self.dims}")
        if len(self.spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in self.spacing):
            raise InvalidRangeError(f"grid spacing must be three positive reals, got {self.spacing}")
        if len(self.origin) != 3 or any(not np.isfinite(o) for o in self.origin):
            raise InvalidRangeError(f"grid origin must be three finite reals, got {self.origin}")

    @property
    def voxel_count(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def axis_mm(self, axis: int) -> np.ndarray:
        """Physical coordinates of the voxel centers along one axis."""
        return self.origin[axis] + np.arange(self.dims[axis], dtype=np.float64) * self.spacing[axis]

    def to_json(self) -> dict:
        return {"dims": list(self.dims), "spacing": list(self.spacing), "origin": list(self.origin)}

    @classmethod
    def from_json(cls, obj: dict) -> "Grid":
        return cls(tuple(obj["dims"]), tuple(obj["spacing"]), tuple(obj["origin"]))


@dataclass(frozen=True)
class Volume:
    """Scalar intensity volume on a grid.

    ``normalized`` marks volumes rescaled to [0, 1]; similarity losses
    require it. Raw Hounsfield-unit data carries ``normalized=False``.
    """

    grid: Grid
    samples: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        s = self.samples
        if not isinstance(s, np.ndarray) or not np.issubdtype(s.dtype, np.floating):
            raise ContractError("volume samples must be a floating-point ndarray")
        if s.shape != self.grid.dims:
            raise GridMismatchError(f"sample shape {s.shape} != grid dims {self.grid.dims}")
        if not np.all(np.isfinite(s)):
            raise ContractError("volume samples must be finite")
        if self.normalized and (s.size and (s.min() < 0.0 or s.max() > 1.0)):
            raise ContractError("normalized volume has samples outside [0, 1]")

    def with_samples(self, samples: np.ndarray, normalized: bool | None = None) -> "Volume":
        return Volume(self.grid, samples, self.normalized if normalized is None else normalized)


@dataclass(frozen=True)
class LabelMask:
    """Integer label volume (0 = background) with a label-name table."""

    grid: Grid
    labels: np.ndarray
    label_table: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        lab = self.labels
        if not isinstance(lab, np.ndarray) or not np.issubdtype(lab.dtype, np.integer):
            raise ContractError("mask labels must be an integer ndarray")
        if lab.shape != self.grid.dims:
            raise GridMismatchError(f"label shape {lab.shape} != grid dims {self.grid.dims}")
        if lab.size and lab.min() < 0:
            raise ContractError("labels must be non-negative")
        present = set(np.unique(lab).tolist()) - {0}
        missing = present - set(self.label_table)
        if missing:
            raise ContractError(f"labels {sorted(missing)} missing from label_table")

    def indicator(self, label: int, dtype=np.float32) -> np.ndarray:
        """Binary {0,1} indicator of one label as a float array."""
        return (self.labels == label).astype(dtype)

    def present_labels(self) -> list[int]:
        return sorted(set(np.unique(self.labels).tolist()) - {0})

    def label_for_name(self, name: str) -> int:
        for lab, nm in self.label_table.items():
            if nm == name:
                return int(lab)
        raise KeyError(f"no label named {name!r} in label table")


@dataclass(frozen=True)
class CropBox:
    """Half-open index box ``[lo, hi)`` recording where a crop came from."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(h - l for l, h in zip(self.lo, self.hi))

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(l, h) for l, h in zip(self.lo, self.hi))

    def to_json(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi)}


def clip_normalize(v: Volume, lo: float = DEFAULT_CLIP_LO, hi: float = DEFAULT_CLIP_HI) -> Volume:
    """Clamp intensities to [lo, hi] and rescale affinely to [0, 1]."""
    if not (np.isfinite(lo) and np.isfinite(hi)) or lo >= hi:
        raise InvalidRangeError(f"clip range must satisfy lo < hi, got ({lo}, {hi})")
    if v.normalized:
        raise ContractError("volume is already normalized")
    out = (np.clip(v.samples, lo, hi) - lo) / (hi - lo)
    return Volume(v.grid, out.astype(v.samples.dtype, copy=False), normalized=True)


def _source_index_axes(src: Grid, target: Grid) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fractional source indices of each target voxel center, per axis."""
    axes = []
    for a in range(3):
        mm = target.axis_mm(a)
        axes.append((mm - src.origin[a]) / src.spacing[a])
    fx, fy, fz = axes
    return (fx[:, None, None], fy[None, :, None], fz[None, None, :])


def resample_trilinear(v: Volume, target: Grid) -> Volume:
    """Resample an intensity volume onto another grid (trilinear, mm space)."""
    if target == v.grid:
        return Volume(v.grid, v.samples.copy(), v.normalized)
    px, py, pz = _source_index_axes(v.grid, target)
    out = trilinear(v.samples, px, py, pz)
    # Interpolation of in-range values stays in range up to rounding; a
    # normalized input therefore yields a normalized output.
    if v.normalized:
        out = np.clip(out, 0.0, 1.0)
    return Volume(target, out, v.normalized)


def resample_nearest(m: LabelMask, target: Grid) -> LabelMask:
    """Resample a label mask onto another grid (nearest neighbor, mm space)."""
    if target == m.grid:
        return LabelMask(m.grid, m.labels.copy(), dict(m.label_table))
    px, py, pz = _source_index_axes(m.grid, target)
    ix = nearest_indices(px, m.grid.dims[0])
    iy = nearest_indices(py, m.grid.dims[1])
    iz = nearest_indices(pz, m.grid.dims[2])
    out = m.labels[ix, iy, iz]
    return LabelMask(target, out, dict(m.label_table))


def crop_to_mask(v: Volume, body: LabelMask, margin: int = 0) -> tuple[Volume, CropBox]:
    """Crop a volume to the bounding box of a body mask plus a margin.

    The returned box is recorded so companion masks can be cropped
    identically and so the crop can be placed back for provenance checks.
    """
    if body.grid != v.grid:
        raise GridMismatchError("volume and body mask grids differ")
    if margin < 0:
        raise InvalidRangeError("margin must be >= 0")
    nz = body.labels != 0
    if not nz.any():
        raise EmptyMaskError("body mask has no nonzero voxels")
    lo, hi = [], []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        line = nz.any(axis=other)
        idx = np.nonzero(line)[0]
        lo.append(max(int(idx[0]) - margin, 0))
        hi.append(min(int(idx[-1]) + margin + 1, v.grid.dims[axis]))
    box = CropBox(tuple(lo), tuple(hi))
    return apply_crop_box(v, box), box


def apply_crop_box(obj: Volume | LabelMask, box: CropBox):
    """Apply a previously computed crop box to a volume or mask."""
    grid = obj.grid
    new_origin = tuple(grid.origin[a] + box.lo[a] * grid.spacing[a] for a in range(3))
    new_grid = Grid(box.shape, grid.spacing, new_origin)
    data = (obj.samples if isinstance(obj, Volume) else obj.labels)[box.slices()].copy()
    if isinstance(obj, Volume):
        return Volume(new_grid, data, obj.normalized)
    return LabelMask(new_grid, data, dict(obj.label_table))


def require_block_compatible(dims: tuple[int, int, int]) -> None:
    """Working grids must survive four exact halvings (dims % 16 == 0)."""
    if any(d % 16 != 0 for d in dims):
        raise InvalidRangeError(
            f"grid dims {dims} must all be divisible by 16 "
            "(four stride-2 encoder stages halve each axis)")
