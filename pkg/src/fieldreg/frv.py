"""Native volume container ("FRV") and a minimal NIfTI-1 importer.

An FRV dataset is a UTF-8 JSON header (``*.frv``) plus a raw little-endian
binary next to it. Sample order in the binary is x-fastest, z-slowest.
Header fields:

    schema      "frv-1"
    dims        [nx, ny, nz]
    spacing     [sx, sy, sz]           mm per voxel
    origin      [ox, oy, oz]           mm
    dtype       "f32le" | "u16le"
    kind        "intensity" | "labels" | "field"
    data        relative path of the raw binary
    sha256      checksum of the raw binary
    normalized  intensity only: samples rescaled to [0, 1]
    label_table labels only: {"<label>": "name"}
    components  field only: 3 (component-major in the binary)
    units       field only: "voxel"

Writing is deterministic (sorted keys, canonical floats) so that
export -> import -> export reproduces identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ChecksumError, FormatError
from .fields import DisplacementField
from .volume import Grid, LabelMask, Volume

SCHEMA = "frv-1"


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _write(path: Path, header: dict, raw: bytes) -> None:
    path = Path(path)
    raw_name = path.stem + ".raw"
    header = dict(header, schema=SCHEMA, data=raw_name, sha256=_sha256(raw))
    (path.parent / raw_name).write_bytes(raw)
    path.write_text(json.dumps(header, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _read(path: Path) -> tuple[dict, bytes]:
    path = Path(path)
    try:
        header = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable FRV header {path}: {e}") from e
    if header.get("schema") != SCHEMA:
        raise FormatError(f"unsupported schema {header.get('schema')!r} in {path}")
    raw = (path.parent / header["data"]).read_bytes()
    if _sha256(raw) != header.get("sha256"):
        raise ChecksumError(f"raw data checksum mismatch for {path}")
    return header, raw


def _grid_of(header: dict) -> Grid:
    return Grid(tuple(header["dims"]), tuple(header["spacing"]), tuple(header["origin"]))


def _scalar_bytes(arr: np.ndarray, dtype: np.dtype) -> bytes:
    return np.ascontiguousarray(arr, dtype=dtype).tobytes(order="F")


def _scalar_from_bytes(raw: bytes, dims, dtype) -> np.ndarray:
    expected = int(np.prod(dims)) * np.dtype(dtype).itemsize
    if len(raw) != expected:
        raise FormatError(f"raw size {len(raw)} != expected {expected}")
    return np.frombuffer(raw, dtype=dtype).reshape(dims, order="F").copy()


def write_volume(v: Volume, path) -> None:
    header = {
        "dims": list(v.grid.dims),
        "spacing": list(v.grid.spacing),
        "origin": list(v.grid.origin),
        "dtype": "f32le",
        "kind": "intensity",
        "normalized": bool(v.normalized),
    }
    _write(Path(path), header, _scalar_bytes(v.samples, np.dtype("<f4")))


def write_mask(m: LabelMask, path) -> None:
    if m.labels.size and m.labels.max() > np.iinfo(np.uint16).max:
        raise FormatError("labels exceed u16 range")
    header = {
        "dims": list(m.grid.dims),
        "spacing": list(m.grid.spacing),
        "origin": list(m.grid.origin),
        "dtype": "u16le",
        "kind": "labels",
        "label_table": {str(k): v for k, v in sorted(m.label_table.items())},
    }
    _write(Path(path), header, _scalar_bytes(m.labels, np.dtype("<u2")))


def write_field(f: DisplacementField, path) -> None:
    raw = b"".join(_scalar_bytes(f.u[k], np.dtype("<f4")) for k in range(3))
    header = {
        "dims": list(f.grid.dims),
        "spacing": list(f.grid.spacing),
        "origin": list(f.grid.origin),
        "dtype": "f32le",
        "kind": "field",
        "components": 3,
        "units": "voxel",
    }
    _write(Path(path), header, raw)


def read(path):
    """Read any FRV dataset; returns Volume, LabelMask, or DisplacementField."""
    header, raw = _read(Path(path))
    grid = _grid_of(header)
    kind = header.get("kind")
    if kind == "intensity":
        samples = _scalar_from_bytes(raw, grid.dims, np.dtype("<f4"))
        return Volume(grid, samples, bool(header.get("normalized", False)))
    if kind == "labels":
        labels = _scalar_from_bytes(raw, grid.dims, np.dtype("<u2")).astype(np.int32)
        table = {int(k): str(v) for k, v in header.get("label_table", {}).items()}
        return LabelMask(grid, labels, table)
    if kind == "field":
        if header.get("components") != 3:
            raise FormatError("field FRV must declare components: 3")
        n = grid.voxel_count * 4
        if len(raw) != 3 * n:
            raise FormatError(f"field raw size {len(raw)} != expected {3 * n}")
        u = np.stack([
            _scalar_from_bytes(raw[k * n:(k + 1) * n], grid.dims, np.dtype("<f4"))
            for k in range(3)
        ])
        return DisplacementField(grid, u)
    raise FormatError(f"unknown FRV kind {kind!r}")


def read_volume(path) -> Volume:
    obj = read(path)
    if not isinstance(obj, Volume):
        raise FormatError(f"{path} is not an intensity volume")
    return obj


def read_mask(path) -> LabelMask:
    obj = read(path)
    if not isinstance(obj, LabelMask):
        raise FormatError(f"{path} is not a label mask")
    return obj


def read_field(path) -> DisplacementField:
    obj = read(path)
    if not isinstance(obj, DisplacementField):
        raise FormatError(f"{path} is not a displacement field")
    return obj


# --- NIfTI-1 import -------------------------------------------------------

_NIFTI_DTYPES = {
    2: np.dtype("u1"), 4: np.dtype("<i2"), 8: np.dtype("<i4"),
    16: np.dtype("<f4"), 64: np.dtype("<f8"), 256: np.dtype("i1"),
    512: np.dtype("<u2"), 768: np.dtype("<u4"),
}


def read_nifti(path) -> tuple[np.ndarray, Grid]:
    """Load an uncompressed single-file NIfTI-1 volume as (array, grid).

    Only the voxel lattice is honored: spacing from pixdim and origin from
    the sform/qform offset. Rotations are not applied; the stored index
    order is preserved.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 352:
        raise FormatError(f"{path}: file too small for a NIfTI-1 header")
    if raw[344:347] != b"n+1":
        raise FormatError(f"{path}: missing NIfTI-1 magic 'n+1' (single-file, uncompressed)")
    bo = "<"
    (sizeof_hdr,) = struct.unpack_from(bo + "i", raw, 0)
    if sizeof_hdr != 348:
        bo = ">"
        (sizeof_hdr,) = struct.unpack_from(bo + "i", raw, 0)
        if sizeof_hdr != 348:
            raise FormatError(f"{path}: sizeof_hdr != 348")
    dim = struct.unpack_from(bo + "8h", raw, 40)
    ndim = dim[0]
    if ndim < 3 or any(d > 1 for d in dim[4:4 + max(0, ndim - 3)]):
        raise FormatError(f"{path}: only 3D volumes are supported (dim={dim})")
    dims = tuple(int(d) for d in dim[1:4])
    (datatype,) = struct.unpack_from(bo + "h", raw, 70)
    if datatype not in _NIFTI_DTYPES:
        raise FormatError(f"{path}: unsupported NIfTI datatype code {datatype}")
    dtype = _NIFTI_DTYPES[datatype].newbyteorder(bo)
    pixdim = struct.unpack_from(bo + "8f", raw, 76)
    spacing = tuple(abs(float(p)) or 1.0 for p in pixdim[1:4])
    (vox_offset,) = struct.unpack_from(bo + "f", raw, 108)
    scl_slope, scl_inter = struct.unpack_from(bo + "2f", raw, 112)
    qform_code, sform_code = struct.unpack_from(bo + "2h", raw, 252)
    if sform_code > 0:
        srow = struct.unpack_from(bo + "12f", raw, 280)
        origin = (float(srow[3]), float(srow[7]), float(srow[11]))
    elif qform_code > 0:
        origin = tuple(float(q) for q in struct.unpack_from(bo + "3f", raw, 268))
    else:
        origin = (0.0, 0.0, 0.0)

    offset = int(vox_offset)
    count = int(np.prod(dims))
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    arr = data.reshape(dims, order="F").astype(np.float64)
    if scl_slope not in (0.0, 1.0) or (scl_slope == 1.0 and scl_inter != 0.0):
        arr = arr * scl_slope + scl_inter
    return arr, Grid(dims, spacing, origin)


def nifti_to_volume(path) -> Volume:
    arr, grid = read_nifti(path)
    return Volume(grid, arr.astype(np.float32))


def nifti_to_mask(path, label_table: dict[int, str] | None = None) -> LabelMask:
    arr, grid = read_nifti(path)
    labels = np.rint(arr).astype(np.int32)
    if labels.size and labels.min() < 0:
        raise FormatError(f"{path}: negative values cannot be labels")
    if label_table is None:
        label_table = {int(k): f"label_{int(k)}" for k in np.unique(labels) if k != 0}
    return LabelMask(grid, labels, label_table)


def load_volume(path) -> Volume:
    """Read a volume from FRV or NIfTI, dispatching on file suffix."""
    if str(path).endswith(".nii"):
        return nifti_to_volume(path)
    return read_volume(path)


def load_mask(path) -> LabelMask:
    if str(path).endswith(".nii"):
        return nifti_to_mask(path)
    return read_mask(path)
