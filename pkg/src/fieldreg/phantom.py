"""Synthetic ellipsoid phantoms with known smooth deformations.

The generators are deterministic per seed (Philox counter-based PRNG) so
suites regenerate bit-identically across platforms. Ground-truth fields are
rescaled and, if necessary, halved until completely fold-free.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import InvalidRangeError
from .fields import DisplacementField, folding_fraction, jacobian, warp, warp_mask_nearest
from .regions import RegionSpec, canonical_regions
from .volume import Grid, LabelMask, Volume

_FIELD_SEED_SALT = 0x9E3779B97F4A7C15


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.uint64(seed & (2 ** 64 - 1))))


@dataclass(frozen=True)
class OrganSpec:
    """One ellipsoidal structure: where it sits and how bright it is."""

    name: str
    region: str
    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]
    intensity: float

    def __post_init__(self):
        if not 0.0 <= self.intensity <= 1.0:
            raise InvalidRangeError(f"organ intensity must be in [0, 1], got {self.intensity}")
        if any(s <= 0 for s in self.semi_axes):
            raise InvalidRangeError("organ semi-axes must be positive")


@dataclass(frozen=True)
class PhantomSpec:
    grid: Grid
    organs: tuple[OrganSpec, ...]
    background: float = 0.1
    noise_sigma: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "organs", tuple(self.organs))
        if not 0.0 <= self.background <= 1.0:
            raise InvalidRangeError("background intensity must be in [0, 1]")
        if self.noise_sigma < 0:
            raise InvalidRangeError("noise sigma must be >= 0")
        for o in self.organs:
            for a in range(3):
                if o.center[a] - o.semi_axes[a] < 0 or o.center[a] + o.semi_axes[a] > self.grid.dims[a] - 1:
                    raise InvalidRangeError(f"organ {o.name!r} ellipsoid leaves the grid")

    def to_json(self) -> dict:
        return {
            "grid": self.grid.to_json(),
            "background": self.background,
            "noise_sigma": self.noise_sigma,
            "organs": [
                {"name": o.name, "region": o.region, "center": list(o.center),
                 "semi_axes": list(o.semi_axes), "intensity": o.intensity}
                for o in self.organs
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PhantomSpec":
        organs = tuple(
            OrganSpec(o["name"], o["region"], tuple(o["center"]),
                      tuple(o["semi_axes"]), float(o["intensity"]))
            for o in obj["organs"])
        return cls(Grid.from_json(obj["grid"]), organs,
                   float(obj.get("background", 0.1)), float(obj.get("noise_sigma", 0.01)))


@dataclass(frozen=True)
class DeformationSpec:
    """Smooth random field: peak amplitude and Gaussian smoothing scale."""

    amplitude: float
    sigma: float
    seed: int | None = None
    region_amplitudes: dict[str, float] = dc_field(default_factory=dict)

    def __post_init__(self):
        if self.amplitude < 0:
            raise InvalidRangeError("deformation amplitude must be >= 0")
        if self.sigma <= 0:
            raise InvalidRangeError("deformation sigma must be > 0")

    def to_json(self) -> dict:
        out = {"amplitude": self.amplitude, "sigma": self.sigma}
        if self.seed is not None:
            out["seed"] = self.seed
        if self.region_amplitudes:
            out["region_amplitudes"] = dict(self.region_amplitudes)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "DeformationSpec":
        return cls(float(obj["amplitude"]), float(obj["sigma"]), obj.get("seed"),
                   dict(obj.get("region_amplitudes", {})))


@dataclass(frozen=True)
class PhantomPair:
    fixed: Volume
    fixed_mask: LabelMask
    moving: Volume
    moving_mask: LabelMask
    truth: DisplacementField


def gen_phantom(spec: PhantomSpec, seed: int) -> tuple[Volume, LabelMask]:
    """Rasterize the ellipsoid list; later organs overwrite earlier ones."""
    nx, ny, nz = spec.grid.dims
    X = np.arange(nx, dtype=np.float64)[:, None, None]
    Y = np.arange(ny, dtype=np.float64)[None, :, None]
    Z = np.arange(nz, dtype=np.float64)[None, None, :]
    samples = np.full(spec.grid.dims, spec.background, dtype=np.float64)
    labels = np.zeros(spec.grid.dims, dtype=np.int32)
    table: dict[int, str] = {}
    for i, o in enumerate(spec.organs, start=1):
        d = (((X - o.center[0]) / o.semi_axes[0]) ** 2
             + ((Y - o.center[1]) / o.semi_axes[1]) ** 2
             + ((Z - o.center[2]) / o.semi_axes[2]) ** 2)
        inside = d <= 1.0
        samples[inside] = o.intensity
        labels[inside] = i
        table[i] = o.name
    if spec.noise_sigma > 0:
        samples += _rng(seed).normal(0.0, spec.noise_sigma, size=spec.grid.dims)
        np.clip(samples, 0.0, 1.0, out=samples)
    return (Volume(spec.grid, samples.astype(np.float32), normalized=True),
            LabelMask(spec.grid, labels, table))


def region_soft_masks(mask: LabelMask, regions: RegionSpec, blend_sigma: float = 3.0) -> dict[str, np.ndarray]:
    """Smooth per-region occupancy maps in [0, 1], used to modulate fields.

    Rescaled so the organ interiors stay near one regardless of how much
    the blur dilutes small structures.
    """
    out = {}
    for region, organs in regions.regions.items():
        ind = np.zeros(mask.grid.dims, dtype=np.float64)
        for name in organs:
            try:
                lab = mask.label_for_name(name)
            except KeyError:
                continue
            ind = np.maximum(ind, mask.indicator(lab, dtype=np.float64))
        sm = gaussian_filter(ind, blend_sigma)
        peak = float(sm.max())
        if peak > 0:
            sm = sm / peak
        out[region] = np.clip(sm, 0.0, 1.0)
    return out


def gen_smooth_field(
    spec: DeformationSpec,
    grid: Grid,
    region_masks: dict[str, np.ndarray] | None = None,
) -> DisplacementField:
    """Smoothed white-noise field, rescaled to the requested peak amplitude.

    Per-region amplitude overrides scale the field inside smoothed region
    occupancy maps. The result is halved until fold-free, so the achieved
    peak (``max_displacement``) may be smaller than requested.
    """
    seed = spec.seed if spec.seed is not None else 0
    if spec.amplitude == 0.0:
        return DisplacementField.zero(grid)
    raw = _rng(seed).normal(size=(3, *grid.dims))
    u = np.stack([gaussian_filter(raw[k], spec.sigma) for k in range(3)])
    mag = np.sqrt((u ** 2).sum(axis=0))
    peak = float(mag.max())
    if peak == 0.0:
        return DisplacementField.zero(grid)
    u *= spec.amplitude / peak
    if spec.region_amplitudes:
        if region_masks is None:
            raise InvalidRangeError("region amplitude overrides need region masks")
        scale = np.ones(grid.dims)
        for region, amp in spec.region_amplitudes.items():
            m = region_masks.get(region)
            if m is None:
                continue
            scale = scale * (1.0 + (amp / spec.amplitude - 1.0) * m)
        u = u * scale
        mag = np.sqrt((u ** 2).sum(axis=0))
        peak = float(mag.max())
        if peak > spec.amplitude:
            u *= spec.amplitude / peak
    f = DisplacementField(grid, u.astype(np.float32))
    for _ in range(60):
        if folding_fraction(jacobian(f)) == 0.0:
            break
        f = DisplacementField(grid, f.u * np.float32(0.5))
    return f


def make_pair(spec_p: PhantomSpec, spec_d: DeformationSpec, seed: int) -> PhantomPair:
    """Fixed phantom plus a deformed copy and the deforming field."""
    fixed, fixed_mask = gen_phantom(spec_p, seed)
    field_seed = spec_d.seed if spec_d.seed is not None else (seed ^ _FIELD_SEED_SALT)
    masks = region_soft_masks(fixed_mask, canonical_regions()) if spec_d.region_amplitudes else None
    truth = gen_smooth_field(
        DeformationSpec(spec_d.amplitude, spec_d.sigma, field_seed, spec_d.region_amplitudes),
        spec_p.grid, masks)
    moving = warp(fixed, truth)
    moving_mask = warp_mask_nearest(fixed_mask, truth)
    return PhantomPair(fixed, fixed_mask, moving, moving_mask, truth)


def default_phantom_spec(grid: Grid | None = None, organs_per_region: int = 2) -> PhantomSpec:
    """A body-like ellipsoid layout, positioned as fractions of the grid.

    ``organs_per_region=1`` keeps only the largest organ of each region,
    which is the configuration the scaled end-to-end experiments use.
    """
    grid = grid or Grid((64, 48, 80))
    nx, ny, nz = grid.dims

    def organ(name, region, c, s, val):
        return OrganSpec(name, region,
                         (c[0] * nx, c[1] * ny, c[2] * nz),
                         (s[0] * nx, s[1] * ny, s[2] * nz), val)

    organs = [
        organ("lung", "thorax", (0.31, 0.50, 0.72), (0.17, 0.21, 0.17), 0.30),
        organ("liver", "abdomen", (0.39, 0.50, 0.42), (0.22, 0.23, 0.13), 0.55),
        organ("pelvis", "bone", (0.50, 0.50, 0.14), (0.23, 0.17, 0.09), 0.90),
    ]
    if organs_per_region >= 2:
        organs += [
            organ("heart", "thorax", (0.65, 0.50, 0.70), (0.13, 0.17, 0.11), 0.65),
            organ("spleen", "abdomen", (0.72, 0.56, 0.45), (0.09, 0.10, 0.08), 0.50),
            organ("vertebrae", "bone", (0.50, 0.75, 0.50), (0.08, 0.10, 0.35), 0.85),
        ]
    return PhantomSpec(grid, tuple(organs), background=0.1, noise_sigma=0.01)


def regions_of_spec(spec: PhantomSpec) -> RegionSpec:
    """Region grouping restricted to the organs this phantom actually has."""
    regions: dict[str, list[str]] = {"thorax": [], "abdomen": [], "bone": []}
    for o in spec.organs:
        regions.setdefault(o.region, []).append(o.name)
    return RegionSpec({r: tuple(names) for r, names in regions.items()})


def suite_to_json(spec_p: PhantomSpec, spec_d: DeformationSpec, pairs: int) -> str:
    return json.dumps(
        {"pairs": pairs, "phantom": spec_p.to_json(), "deformation": spec_d.to_json()},
        sort_keys=True, indent=1)


def suite_from_json(text: str) -> tuple[PhantomSpec, DeformationSpec, int]:
    obj = json.loads(text)
    return (PhantomSpec.from_json(obj["phantom"]),
            DeformationSpec.from_json(obj["deformation"]),
            int(obj.get("pairs", 1)))
