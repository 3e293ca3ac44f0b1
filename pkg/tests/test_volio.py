import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nodkit.errors import DomainError, FormatError
from nodkit.volio import (LabelMap, NoduleAnnotation, Volume, VolumeMeta, in_bounds,
                          read_annotations, read_detections, read_volume, voxel_to_world,
                          world_to_voxel, write_annotations, write_volume)

# float32-representable geometry: NIfTI headers store spacing and origin as float32
META = VolumeMeta((5, 4, 3), (0.75, 0.625, 1.25), (-10.0, 3.5, 100.0))


def _payload(dtype, shape, seed=0):
    rng = np.random.default_rng(seed)
    dt = np.dtype(dtype)
    if dt.kind == "f":
        return rng.standard_normal(shape).astype(dt) * 100
    info = np.iinfo(dt)
    return rng.integers(info.min, info.max, size=shape, endpoint=True).astype(dt)


@pytest.mark.parametrize("suffix", [".nii", ".raw"])
@pytest.mark.parametrize("dtype", [np.int16, np.float32, np.uint8, np.uint16])
def test_round_trip_bit_exact(tmp_path, suffix, dtype):
    data = _payload(dtype, META.dims)
    obj = Volume(META, data) if np.dtype(dtype).kind != "u" else LabelMap(META, data)
    path = tmp_path / f"vol{suffix}"
    write_volume(obj, path)
    back = read_volume(path)
    arr = back.data if isinstance(back, Volume) else back.labels
    assert back.meta == META
    assert arr.dtype == np.dtype(dtype)
    assert arr.tobytes() == data.tobytes()


def test_nifti_geometry_is_float32(tmp_path):
    meta = VolumeMeta((2, 2, 2), (0.7, 0.8, 1.25), (0.1, 0.0, 0.0))
    path = tmp_path / "v.nii"
    write_volume(Volume(meta, np.zeros(meta.dims, np.int16)), path)
    back = read_volume(path).meta
    assert back.spacing == tuple(float(np.float32(s)) for s in meta.spacing)
    assert back.origin[0] == float(np.float32(0.1))


def test_raw_geometry_is_exact(tmp_path):
    meta = VolumeMeta((2, 2, 2), (0.7, 0.8, 1.25), (0.1, 0.0, 0.0))
    path = tmp_path / "v.raw"
    write_volume(Volume(meta, np.zeros(meta.dims, np.int16)), path)
    assert read_volume(path).meta == meta


def test_nifti_size_arithmetic(tmp_path):
    path = tmp_path / "v.nii"
    write_volume(Volume(META, np.zeros(META.dims, np.int16)), path)
    assert path.stat().st_size == 352 + 5 * 4 * 3 * 2
    raw = path.read_bytes()
    assert struct.unpack("<i", raw[:4])[0] == 348
    assert raw[344:348] == b"n+1\0"


def test_raw_sidecar_contents(tmp_path):
    path = tmp_path / "v.raw"
    write_volume(Volume(META, np.zeros(META.dims, np.float32)), path)
    side = json.loads((tmp_path / "v.meta.json").read_text())
    assert side["dims"] == [5, 4, 3]
    assert side["dtype"] == "f32"
    assert path.stat().st_size == 60 * 4


def test_payload_is_x_fastest(tmp_path):
    data = np.arange(60, dtype=np.int16).reshape(META.dims, order="F")
    path = tmp_path / "v.nii"
    write_volume(Volume(META, data), path)
    payload = np.frombuffer(path.read_bytes()[352:], dtype="<i2")
    assert list(payload[:6]) == [0, 1, 2, 3, 4, 5]


def test_bad_magic(tmp_path):
    path = tmp_path / "v.nii"
    write_volume(Volume(META, np.zeros(META.dims, np.int16)), path)
    raw = bytearray(path.read_bytes())
    raw[344:348] = b"abcd"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        read_volume(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "v.nii"
    write_volume(Volume(META, np.zeros(META.dims, np.int16)), path)
    path.write_bytes(path.read_bytes()[:-7])
    with pytest.raises(OSError):
        read_volume(path)


def test_label_map_uses_smallest_unsigned_dtype():
    lm = LabelMap(META, np.full(META.dims, 201))
    assert lm.labels.dtype == np.uint8
    lm = LabelMap(META, np.full(META.dims, 300))
    assert lm.labels.dtype == np.uint16


def test_meta_validation():
    with pytest.raises(DomainError):
        VolumeMeta((0, 2, 2))
    with pytest.raises(DomainError):
        VolumeMeta((2, 2, 2), (1.0, -1.0, 1.0))


def test_world_to_voxel_examples():
    meta = VolumeMeta((10, 10, 10), (0.5, 0.5, 2.0), (1.0, 2.0, 3.0))
    assert world_to_voxel(meta, (1.0, 2.0, 3.0)) == (0, 0, 0)
    assert world_to_voxel(meta, (2.25, 2.0, 3.0)) == (3, 0, 0)  # 2.5 rounds away from zero
    assert world_to_voxel(meta, (0.0, 2.0, 3.0)) == (-2, 0, 0)  # unclamped
    assert not in_bounds(meta, (-2, 0, 0))


@settings(max_examples=50, deadline=None)
@given(st.tuples(*[st.integers(-50, 50)] * 3),
       st.tuples(*[st.floats(0.3, 3.0)] * 3),
       st.tuples(*[st.floats(-200, 200)] * 3))
def test_voxel_world_inverse(index, spacing, origin):
    meta = VolumeMeta((4, 4, 4), spacing, origin)
    assert world_to_voxel(meta, voxel_to_world(meta, index)) == index


def _ann_csv(path, rows):
    header = "series_id,coordX,coordY,coordZ,w_mm,h_mm,d_mm,diameter_mm\n"
    path.write_text(header + "".join(r + "\n" for r in rows))


def test_annotation_csv_round_trip(tmp_path):
    anns = [NoduleAnnotation("a", (1.0, 2.0, 3.0), (4.0, 5.0, 6.0), 6.0, 1),
            NoduleAnnotation("b", (-1.5, 0.0, 9.0), (3.0, 3.0, 3.0), 3.0)]
    path = tmp_path / "ann.csv"
    write_annotations(anns, path)
    assert read_annotations(path) == anns


def test_annotation_bad_row_is_named(tmp_path):
    path = tmp_path / "ann.csv"
    good = "s,0,0,0,5,5,5,5"
    _ann_csv(path, [good, good, good, "s,0,zero,0,5,5,5,5"])
    with pytest.raises(FormatError, match="row 4"):
        read_annotations(path)
    assert len(read_annotations(path, strict=False)) == 3


def test_annotation_missing_column(tmp_path):
    path = tmp_path / "ann.csv"
    path.write_text("series_id,coordX,coordY\n")
    with pytest.raises(FormatError, match="coordZ"):
        read_annotations(path)


def test_detection_csv_requires_score(tmp_path):
    path = tmp_path / "det.csv"
    _ann_csv(path, ["s,0,0,0,5,5,5,5"])
    with pytest.raises(FormatError, match="score"):
        read_detections(path)
