"""The block pipeline: an ordered chain whose displacement fields accumulate
into one transform, applied in a single warp of the original moving image.

Block order is fixed: affine, bone, thorax, abdomen, wholebody. Each block
sees the fixed image and the moving image warped by the fields accumulated
so far; masks are never required at inference.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .errors import ChecksumError, ContractError, FormatError, GridMismatchError
from .fields import DisplacementField, accumulate, affine_to_field, warp
from .net import (
    BlockWeights,
    affine_forward,
    deformable_forward,
    init_weights,
    load_block,
    save_block,
)
from .regions import BLOCK_ORDER, RegionSpec, canonical_regions
from .volume import Grid, Volume, require_block_compatible

BUNDLE_FORMAT = "regmodel-1"


@dataclass(frozen=True)
class PipelineModel:
    """Ordered block weights plus working grid and region configuration."""

    blocks: dict[str, BlockWeights]
    grid: Grid
    regions: RegionSpec = dc_field(default_factory=canonical_regions)
    version: str = BUNDLE_FORMAT

    def __post_init__(self):
        missing = [n for n in BLOCK_ORDER if n not in self.blocks]
        if missing:
            raise ContractError(f"pipeline missing blocks {missing}")
        for name, bw in self.blocks.items():
            want = "affine" if name == "affine" else "deformable"
            if bw.arch != want:
                raise ContractError(f"block {name!r} must be a {want} architecture")
        require_block_compatible(self.grid.dims)

    @classmethod
    def zero_init(cls, grid: Grid, regions: RegionSpec | None = None, seed: int = 0) -> "PipelineModel":
        blocks = {}
        for i, name in enumerate(BLOCK_ORDER):
            arch = "affine" if name == "affine" else "deformable"
            blocks[name] = init_weights(arch, seed + i)
        return cls(blocks, grid, regions or canonical_regions())


@dataclass(frozen=True)
class RegistrationResult:
    total: DisplacementField
    warped: Volume
    components: dict[str, DisplacementField]


def _check_pair(model: PipelineModel, fixed: Volume, moving: Volume) -> None:
    if fixed.grid != model.grid or moving.grid != model.grid:
        raise GridMismatchError("inputs must be preprocessed to the model's working grid")
    if not (fixed.normalized and moving.normalized):
        raise ContractError("inputs must be normalized to [0, 1]")


def _block_field(name: str, bw: BlockWeights, fixed: Volume, current: Volume) -> DisplacementField:
    if name == "affine":
        params, _ = affine_forward(bw, fixed, current, record=False)
        return affine_to_field(params, fixed.grid, dtype=np.float32)
    f, _ = deformable_forward(bw, fixed, current, record=False)
    return f


def register_partial(model: PipelineModel, fixed: Volume, moving: Volume,
                     upto: str) -> RegistrationResult:
    """Run the chain up to and including the named block."""
    if upto not in BLOCK_ORDER:
        raise ContractError(f"unknown block {upto!r}; expected one of {BLOCK_ORDER}")
    _check_pair(model, fixed, moving)
    components: dict[str, DisplacementField] = {}
    acc: DisplacementField | None = None
    for name in BLOCK_ORDER:
        current = moving if acc is None else warp(moving, acc)
        f = _block_field(name, model.blocks[name], fixed, current)
        components[name] = f
        acc = f if acc is None else accumulate([acc, f])
        if name == upto:
            break
    return RegistrationResult(acc, warp(moving, acc), components)


def register(model: PipelineModel, fixed: Volume, moving: Volume) -> RegistrationResult:
    """Full five-block registration; needs images only, never masks."""
    return register_partial(model, fixed, moving, upto=BLOCK_ORDER[-1])


class FrozenPrefix:
    """Accumulated field of already-trained blocks, evaluated read-only."""

    def __init__(self, named_blocks: list[tuple[str, BlockWeights]], grid: Grid):
        self.named_blocks = list(named_blocks)
        self.grid = grid

    @classmethod
    def from_model(cls, model: PipelineModel, upto: str) -> "FrozenPrefix":
        """Prefix of every block strictly before ``upto`` in pipeline order."""
        idx = BLOCK_ORDER.index(upto)
        return cls([(n, model.blocks[n]) for n in BLOCK_ORDER[:idx]], model.grid)

    def __call__(self, fixed: Volume, moving: Volume) -> DisplacementField:
        acc = DisplacementField.zero(self.grid)
        for name, bw in self.named_blocks:
            current = warp(moving, acc)
            f = _block_field(name, bw, fixed, current)
            acc = accumulate([acc, f])
        return acc


def export_model(model: PipelineModel, path) -> None:
    """Write a model bundle directory: manifest.json plus one block file
    per pipeline stage, with checksums over every stored file."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    files: dict[str, dict] = {}
    for name in BLOCK_ORDER:
        save_block(model.blocks[name], path / f"{name}.trw")
        for suffix in (".trw", ".bin"):
            fname = name + suffix
            digest = hashlib.sha256((path / fname).read_bytes()).hexdigest()
            files[fname] = {"sha256": digest}
    manifest = {
        "format": BUNDLE_FORMAT,
        "order": list(BLOCK_ORDER),
        "grid": model.grid.to_json(),
        "regions": model.regions.to_json(),
        "files": files,
    }
    (path / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def import_model(path) -> PipelineModel:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable model manifest in {path}: {e}") from e
    if manifest.get("format") != BUNDLE_FORMAT:
        raise FormatError(f"unsupported model bundle format {manifest.get('format')!r}")
    if list(manifest.get("order", [])) != list(BLOCK_ORDER):
        raise FormatError("model bundle block order does not match the pipeline")
    for fname, meta in manifest["files"].items():
        fpath = path / fname
        if not fpath.exists():
            raise FormatError(f"model bundle missing file {fname}")
        if hashlib.sha256(fpath.read_bytes()).hexdigest() != meta.get("sha256"):
            raise ChecksumError(f"model bundle checksum mismatch for {fname}")
    blocks = {name: load_block(path / f"{name}.trw") for name in BLOCK_ORDER}
    return PipelineModel(blocks, Grid.from_json(manifest["grid"]),
                         RegionSpec.from_json(manifest["regions"]))
