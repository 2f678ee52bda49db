"""Block-weight serialization: JSON manifest plus a raw f32 tensor blob.

Format "trw-1": ``<stem>.trw`` holds the manifest (architecture tag, layer
chain, tensor shapes, optional seed, blob checksum) and ``<stem>.bin`` the
little-endian f32 tensors concatenated in layer order. Writing is
deterministic so repeated exports are byte-identical.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from ..errors import ChecksumError, FormatError
from .blocks import BlockWeights, LayerSpec, affine_layers, deformable_layers

FORMAT = "trw-1"


def save_block(bw: BlockWeights, path) -> None:
    path = Path(path)
    blob = b"".join(np.ascontiguousarray(t, dtype="<f4").tobytes() for t in bw.flat())
    manifest = {
        "format": FORMAT,
        "arch": bw.arch,
        "dtype": "f32le",
        "seed": bw.seed,
        "layers": [s.to_json() for s in bw.layers],
        "tensors": [list(t.shape) for t in bw.flat()],
        "blob": path.stem + ".bin",
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    (path.parent / (path.stem + ".bin")).write_bytes(blob)
    path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def load_block(path) -> BlockWeights:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable block manifest {path}: {e}") from e
    if manifest.get("format") != FORMAT:
        raise FormatError(f"unsupported weight format {manifest.get('format')!r}")
    blob = (path.parent / manifest["blob"]).read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest.get("sha256"):
        raise ChecksumError(f"weight blob checksum mismatch for {path}")

    arch = manifest["arch"]
    layers = tuple(LayerSpec.from_json(o) for o in manifest["layers"])
    expected = deformable_layers() if arch == "deformable" else affine_layers()
    if layers != expected:
        raise FormatError(f"layer chain in {path} does not match the {arch} architecture")

    shapes = [tuple(s) for s in manifest["tensors"]]
    offset = 0
    flat: list[np.ndarray] = []
    for shape in shapes:
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        flat.append(arr.reshape(shape).astype(np.float32))
        offset += count * 4
    if offset != len(blob):
        raise FormatError(f"weight blob size mismatch for {path}")

    params: list[list[np.ndarray]] = []
    it = iter(flat)
    for spec in layers:
        params.append([next(it) for _ in spec.param_shapes()])
    return BlockWeights(arch, layers, params, manifest.get("seed"))
