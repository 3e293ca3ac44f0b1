"""Volume and table I/O plus world/voxel coordinate mapping.

Arrays are indexed ``[x, y, z]`` in memory; on disk the payload is written
with x varying fastest, as NIfTI and the raw format both require.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DomainError, FormatError

logger = logging.getLogger(__name__)

NIFTI_HEADER_SIZE = 348
NIFTI_VOX_OFFSET = 352

# NIfTI datatype code -> numpy dtype (little-endian) and bitpix
_NIFTI_CODES = {
    2: np.dtype("u1"),
    4: np.dtype("<i2"),
    16: np.dtype("<f4"),
    512: np.dtype("<u2"),
}
_NIFTI_CODE_OF = {dt.newbyteorder("="): code for code, dt in _NIFTI_CODES.items()}

_RAW_DTYPES = {"i16": np.dtype("<i2"), "f32": np.dtype("<f4"),
               "u8": np.dtype("u1"), "u16": np.dtype("<u2")}
_RAW_NAME_OF = {dt.newbyteorder("="): name for name, dt in _RAW_DTYPES.items()}

VOLUME_DTYPES = (np.dtype(np.int16), np.dtype(np.float32), np.dtype(np.float64))


@dataclass(frozen=True)
class VolumeMeta:
    """Grid geometry: voxel counts, spacing (mm) and origin (mm) per axis."""

    dims: tuple
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise DomainError("dims, spacing and origin must have 3 components")
        if any(d < 1 for d in dims):
            raise DomainError(f"dims must be >= 1, got {dims}")
        if any(not s > 0 for s in spacing):
            raise DomainError(f"spacing must be > 0, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def size(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]


def _frozen_array(data, dtype=None):
    arr = np.array(data, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Volume:
    """Scalar volume (HU or unitless) on a :class:`VolumeMeta` grid."""

    meta: VolumeMeta
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.shape != self.meta.dims:
            raise DomainError(f"data shape {data.shape} does not match dims {self.meta.dims}")
        if data.dtype not in VOLUME_DTYPES:
            raise DomainError(f"unsupported volume dtype {data.dtype}")
        object.__setattr__(self, "data", _frozen_array(data))


@dataclass(frozen=True)
class LabelMap:
    """Unsigned integer label grid sharing a volume's geometry."""

    meta: VolumeMeta
    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.shape != self.meta.dims:
            raise DomainError(f"label shape {labels.shape} does not match dims {self.meta.dims}")
        if labels.dtype.kind not in "ub":
            if labels.dtype.kind != "i" or (labels.size and labels.min() < 0):
                raise DomainError(f"labels must be non-negative integers, got {labels.dtype}")
        object.__setattr__(self, "labels", _frozen_array(labels, label_dtype(labels)))


def label_dtype(labels) -> np.dtype:
    """Smallest unsigned integer dtype holding every value of ``labels``."""
    top = int(np.max(labels)) if np.size(labels) else 0
    for dt in (np.uint8, np.uint16, np.uint32):
        if top <= np.iinfo(dt).max:
            return np.dtype(dt)
    raise DomainError(f"label value {top} does not fit in 32 bits")


@dataclass(frozen=True)
class NoduleAnnotation:
    series_id: str
    center_mm: tuple
    extent_mm: tuple
    diameter_mm: float
    label: Optional[int] = None

    def __post_init__(self):
        if any(not e > 0 for e in self.extent_mm):
            raise DomainError(f"extent components must be > 0, got {self.extent_mm}")
        if not self.diameter_mm > 0:
            raise DomainError(f"diameter_mm must be > 0, got {self.diameter_mm}")
        if self.label not in (None, 0, 1):
            raise DomainError(f"label must be 0 (benign) or 1 (cancer), got {self.label}")


@dataclass(frozen=True)
class DetectionCandidate:
    series_id: str
    center_mm: tuple
    extent_mm: tuple
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise DomainError(f"score must lie in [0, 1], got {self.score}")
        if any(not e > 0 for e in self.extent_mm):
            raise DomainError(f"extent components must be > 0, got {self.extent_mm}")


# ---------------------------------------------------------------------------
# coordinates

def _round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def world_to_voxel(meta: VolumeMeta, point_mm) -> tuple:
    """Map a world point (mm) to the nearest voxel index, unclamped."""
    rel = (np.asarray(point_mm, dtype=np.float64) - meta.origin) / meta.spacing
    return tuple(int(v) for v in _round_half_away(rel))


def voxel_to_world(meta: VolumeMeta, index) -> tuple:
    """World position (mm) of a voxel centre."""
    world = np.asarray(meta.origin) + np.asarray(index, dtype=np.float64) * meta.spacing
    return tuple(float(v) for v in world)


def in_bounds(meta: VolumeMeta, index) -> bool:
    return all(0 <= i < d for i, d in zip(index, meta.dims))


# ---------------------------------------------------------------------------
# NIfTI-1 subset

def _check_payload(data: np.ndarray, path) -> np.dtype:
    dt = data.dtype.newbyteorder("=")
    if dt not in _NIFTI_CODE_OF:
        raise FormatError(f"{path}: unsupported datatype {data.dtype}")
    return dt


def _nifti_header(meta: VolumeMeta, dt: np.dtype) -> bytes:
    code = _NIFTI_CODE_OF[dt]
    hdr = bytearray(NIFTI_HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, NIFTI_HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *meta.dims, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, code, dt.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *meta.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(NIFTI_VOX_OFFSET))
    struct.pack_into("<ff", hdr, 112, 0.0, 0.0)
    hdr[123] = 2  # xyzt_units: mm
    struct.pack_into("<hh", hdr, 252, 0, 1)  # qform_code, sform_code
    sx, sy, sz = meta.spacing
    ox, oy, oz = meta.origin
    struct.pack_into("<4f", hdr, 280, sx, 0.0, 0.0, ox)
    struct.pack_into("<4f", hdr, 296, 0.0, sy, 0.0, oy)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, sz, oz)
    hdr[344:348] = b"n+1\0"
    return bytes(hdr)


def _write_nifti(meta: VolumeMeta, data: np.ndarray, path) -> None:
    dt = _check_payload(data, path)
    payload = np.asarray(data, dtype=dt.newbyteorder("<")).tobytes(order="F")
    with open(path, "wb") as f:
        f.write(_nifti_header(meta, dt))
        f.write(b"\0\0\0\0")
        f.write(payload)


def _read_nifti(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < NIFTI_HEADER_SIZE:
        raise FormatError(f"{path}: header truncated ({len(raw)} bytes)")
    if raw[344:348] != b"n+1\0":
        raise FormatError(f"{path}: bad magic {raw[344:348]!r}, expected 'n+1'")
    if struct.unpack_from("<i", raw, 0)[0] == NIFTI_HEADER_SIZE:
        e = "<"
    elif struct.unpack_from(">i", raw, 0)[0] == NIFTI_HEADER_SIZE:
        e = ">"
    else:
        raise FormatError(f"{path}: sizeof_hdr is not 348")

    dim = struct.unpack_from(e + "8h", raw, 40)
    if dim[0] < 3 or any(d > 1 for d in dim[4:dim[0] + 1]):
        raise FormatError(f"{path}: only 3D volumes are supported (dim={dim})")
    dims = dim[1:4]
    code = struct.unpack_from(e + "h", raw, 70)[0]
    if code not in _NIFTI_CODES:
        raise FormatError(f"{path}: unsupported datatype code {code}")
    dtype = _NIFTI_CODES[code].newbyteorder(e)
    pixdim = struct.unpack_from(e + "8f", raw, 76)
    vox_offset = struct.unpack_from(e + "f", raw, 108)[0]
    slope, inter = struct.unpack_from(e + "ff", raw, 112)
    qform_code, sform_code = struct.unpack_from(e + "hh", raw, 252)
    quatern = struct.unpack_from(e + "3f", raw, 256)
    qoffset = struct.unpack_from(e + "3f", raw, 268)
    srow = np.array(struct.unpack_from(e + "12f", raw, 280), dtype=np.float64).reshape(3, 4)

    if vox_offset < NIFTI_VOX_OFFSET:
        raise FormatError(f"{path}: vox_offset {vox_offset} < {NIFTI_VOX_OFFSET}")
    spacing = tuple(float(p) for p in pixdim[1:4])
    if any(not s > 0 for s in spacing):
        raise FormatError(f"{path}: non-positive pixdim {spacing}")
    if sform_code > 0:
        rot = srow[:, :3]
        if np.any(rot[~np.eye(3, dtype=bool)] != 0) or np.any(np.diag(rot) <= 0):
            raise FormatError(f"{path}: sform has rotation or flips; only axis-aligned grids are supported")
        origin = tuple(float(v) for v in srow[:, 3])
    else:
        if qform_code > 0 and (any(q != 0 for q in quatern) or pixdim[0] < 0):
            raise FormatError(f"{path}: qform has rotation; only axis-aligned grids are supported")
        origin = tuple(float(v) for v in qoffset)

    meta = VolumeMeta(dims, spacing, origin)
    start = int(vox_offset)
    nbytes = meta.size * dtype.itemsize
    if len(raw) < start + nbytes:
        raise OSError(f"{path}: payload truncated ({len(raw) - start} of {nbytes} bytes)")
    data = np.frombuffer(raw, dtype=dtype, count=meta.size, offset=start)
    data = data.reshape(dims, order="F").astype(dtype.newbyteorder("="))
    if slope != 0 and not (slope == 1 and inter == 0):
        data = (data.astype(np.float32) * np.float32(slope) + np.float32(inter)).astype(np.float32)
    return meta, data


# ---------------------------------------------------------------------------
# raw + JSON sidecar

def _raw_paths(path):
    path = Path(path)
    name = path.name
    for suffix in (".meta.json", ".raw"):
        if name.endswith(suffix):
            stem = name[: -len(suffix)]
            return path.with_name(stem + ".raw"), path.with_name(stem + ".meta.json")
    return path.with_name(name + ".raw"), path.with_name(name + ".meta.json")


def _write_raw(meta: VolumeMeta, data: np.ndarray, path) -> None:
    dt = data.dtype.newbyteorder("=")
    if dt not in _RAW_NAME_OF:
        raise FormatError(f"{path}: unsupported datatype {data.dtype}")
    raw_path, meta_path = _raw_paths(path)
    raw_path.write_bytes(np.asarray(data, dtype=dt.newbyteorder("<")).tobytes(order="F"))
    sidecar = {"dims": list(meta.dims), "spacing": list(meta.spacing),
               "origin": list(meta.origin), "dtype": _RAW_NAME_OF[dt]}
    meta_path.write_text(json.dumps(sidecar, indent=2) + "\n")


def _read_raw(path):
    raw_path, meta_path = _raw_paths(path)
    try:
        side = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{meta_path}: invalid JSON ({exc})") from exc
    for key in ("dims", "spacing", "origin", "dtype"):
        if key not in side:
            raise FormatError(f"{meta_path}: missing key {key!r}")
    if side["dtype"] not in _RAW_DTYPES:
        raise FormatError(f"{meta_path}: unsupported dtype {side['dtype']!r}")
    try:
        meta = VolumeMeta(side["dims"], side["spacing"], side["origin"])
    except (DomainError, TypeError) as exc:
        raise FormatError(f"{meta_path}: {exc}") from exc
    dtype = _RAW_DTYPES[side["dtype"]]
    payload = raw_path.read_bytes()
    nbytes = meta.size * dtype.itemsize
    if len(payload) < nbytes:
        raise OSError(f"{raw_path}: payload truncated ({len(payload)} of {nbytes} bytes)")
    data = np.frombuffer(payload, dtype=dtype, count=meta.size).reshape(meta.dims, order="F")
    return meta, data.astype(dtype.newbyteorder("="))


def _is_raw(path) -> bool:
    name = str(path)
    return name.endswith(".raw") or name.endswith(".meta.json")


def read_volume(path):
    """Read a ``.nii`` or ``.raw``/``.meta.json`` file.

    Signed and floating payloads come back as :class:`Volume`; unsigned
    integer payloads as :class:`LabelMap`.
    """
    meta, data = _read_raw(path) if _is_raw(path) else _read_nifti(path)
    if data.dtype.kind == "u":
        return LabelMap(meta, data)
    return Volume(meta, data)


def write_volume(v, path) -> None:
    """Write a :class:`Volume` or :class:`LabelMap`; the suffix picks the format."""
    if isinstance(v, LabelMap):
        data = v.labels
    elif isinstance(v, Volume):
        data = v.data
    else:
        raise TypeError(f"expected Volume or LabelMap, got {type(v).__name__}")
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
    if _is_raw(path):
        _write_raw(v.meta, data, path)
    else:
        _write_nifti(v.meta, data, path)


# ---------------------------------------------------------------------------
# CSV tables

ANNOTATION_COLUMNS = ("series_id", "coordX", "coordY", "coordZ",
                      "w_mm", "h_mm", "d_mm", "diameter_mm")
DETECTION_COLUMNS = ("series_id", "coordX", "coordY", "coordZ",
                     "w_mm", "h_mm", "d_mm", "score")


def _read_table(path, required: Sequence[str], build, strict: bool):
    records = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        header = reader.fieldnames or []
        for col in required:
            if col not in header:
                raise FormatError(f"{path}: missing required column {col!r}")
        for row_no, row in enumerate(reader, start=1):
            try:
                records.append(build(row))
            except (ValueError, TypeError) as exc:
                msg = f"{path}: row {row_no}: {exc}"
                if strict:
                    raise FormatError(msg) from exc
                logger.warning("skipping %s", msg)
    return records


def _floats(row, keys):
    out = []
    for k in keys:
        val = float(row[k])
        if not math.isfinite(val):
            raise ValueError(f"non-finite {k}")
        out.append(val)
    return tuple(out)


def _annotation(row):
    label = (row.get("label") or "").strip()
    return NoduleAnnotation(
        series_id=row["series_id"],
        center_mm=_floats(row, ("coordX", "coordY", "coordZ")),
        extent_mm=_floats(row, ("w_mm", "h_mm", "d_mm")),
        diameter_mm=_floats(row, ("diameter_mm",))[0],
        label=int(label) if label else None,
    )


def _detection(row):
    return DetectionCandidate(
        series_id=row["series_id"],
        center_mm=_floats(row, ("coordX", "coordY", "coordZ")),
        extent_mm=_floats(row, ("w_mm", "h_mm", "d_mm")),
        score=_floats(row, ("score",))[0],
    )


def read_annotations(path, strict: bool = True) -> list:
    """Parse a nodule annotation CSV.

    In strict mode the first malformed data row raises :class:`FormatError`
    naming its 1-based row number; otherwise such rows are logged and skipped.
    """
    return _read_table(path, ANNOTATION_COLUMNS, _annotation, strict)


def read_detections(path, strict: bool = True) -> list:
    return _read_table(path, DETECTION_COLUMNS, _detection, strict)


def write_annotations(annotations, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(ANNOTATION_COLUMNS + ("label",))
        for a in annotations:
            w.writerow([a.series_id, *map(repr, a.center_mm), *map(repr, a.extent_mm),
                        repr(a.diameter_mm), "" if a.label is None else a.label])


def write_detections(detections, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(DETECTION_COLUMNS)
        for d in detections:
            w.writerow([d.series_id, *map(repr, d.center_mm), *map(repr, d.extent_mm),
                        repr(d.score)])
