import json
import zlib

import nibabel as nib
import numpy as np
import pytest

from src.errors import InputNotFound, MalformedHeader, MissingDataFile, SizeMismatch, UnsupportedElementType, UnwritablePath
from src.io_formats import read_report, read_volume, write_report, write_volume
from src.volume import BinaryMask, Volume3D


def _int16(shape=(7, 5, 4), seed=0):
    return np.random.default_rng(seed).integers(-1024, 3072, size=shape).astype(np.int16)


def _header(**over):
    fields = {
        "ObjectType": "Image",
        "NDims": "3",
        "DimSize": "3 2 2",
        "ElementType": "MET_SHORT",
        "ElementSpacing": "1 1 1",
    }
    fields.update(over)
    lines = [f"{k} = {v}" for k, v in fields.items() if v is not None]
    return ("\n".join(lines) + "\nElementDataFile = LOCAL\n").encode()


def test_mha_roundtrip_is_bitwise(tmp_path):
    vol = Volume3D(_int16(), spacing=(0.23, 0.23, 0.625), origin=(-12.5, 3.0, 100.25))
    path = write_volume(vol, tmp_path / "ct.mha")
    back = read_volume(path)
    assert isinstance(back, Volume3D)
    assert back.data.dtype == np.int16
    assert np.array_equal(back.data, vol.data)
    assert back.spacing == vol.spacing and back.origin == vol.origin
    head = path.read_bytes().split(b"ElementDataFile")[0].decode()
    for key in ("ObjectType", "NDims", "DimSize", "ElementType", "ElementSpacing", "Offset", "ElementByteOrderMSB"):
        assert key in head
    assert "MET_SHORT" in head


def test_mhd_with_raw_file(tmp_path):
    data = np.random.default_rng(1).normal(-500, 200, (4, 6, 3)).astype(np.float32)
    vol = Volume3D(data, spacing=(0.5, 0.7, 1.1))
    path = write_volume(vol, tmp_path / "ct.mhd")
    assert (tmp_path / "ct.raw").is_file()
    back = read_volume(path)
    assert back.data.dtype == np.float32
    assert np.array_equal(back.data, vol.data)
    assert back.spacing == (0.5, 0.7, 1.1)


def test_mask_written_as_uchar(tmp_path):
    m = np.zeros((5, 5, 5), dtype=bool)
    m[1:3, 2:4, 0:5] = True
    path = write_volume(BinaryMask(m), tmp_path / "mask.mha")
    assert b"MET_UCHAR" in path.read_bytes()
    back = read_volume(path)
    assert isinstance(back, BinaryMask)
    assert np.array_equal(back.data, m)


def test_truncated_raw_and_missing_raw(tmp_path):
    path = write_volume(Volume3D(_int16()), tmp_path / "ct.mhd")
    raw = tmp_path / "ct.raw"
    raw.write_bytes(raw.read_bytes()[:-10])
    with pytest.raises(SizeMismatch):
        read_volume(path)
    raw.unlink()
    with pytest.raises(MissingDataFile):
        read_volume(path)


def test_compressed_and_big_endian_reads(tmp_path):
    data = np.arange(12, dtype=np.int16).reshape((3, 2, 2)) - 6
    packed = zlib.compress(data.tobytes(order="F"))
    (tmp_path / "z.mha").write_bytes(_header(CompressedData="True") + packed)
    assert np.array_equal(read_volume(tmp_path / "z.mha").data, data)

    swapped = data.astype(">i2").tobytes(order="F")
    (tmp_path / "be.mha").write_bytes(_header(ElementByteOrderMSB="True") + swapped)
    back = read_volume(tmp_path / "be.mha")
    assert np.array_equal(back.data, data)
    assert back.data.dtype == np.int16


def test_malformed_headers(tmp_path):
    payload = np.zeros(12, dtype=np.int16).tobytes()
    cases = [
        (_header(NDims=None), MalformedHeader),
        (_header(DimSize="3 2"), MalformedHeader),
        (_header(ElementSpacing="1 a 1"), MalformedHeader),
        (_header(NDims="2"), MalformedHeader),
        (_header(ElementType="MET_DOUBLE"), UnsupportedElementType),
        (b"NDims = 3\nDimSize = 3 2 2\n", MalformedHeader),
    ]
    for i, (head, err) in enumerate(cases):
        p = tmp_path / f"bad{i}.mha"
        p.write_bytes(head + payload)
        with pytest.raises(err):
            read_volume(p)


def test_nifti_roundtrip(tmp_path):
    vol = Volume3D(_int16(seed=3), spacing=(0.5, 0.25, 1.25), origin=(1.0, -2.0, 3.5))
    back = read_volume(write_volume(vol, tmp_path / "ct.nii.gz"))
    assert back.data.dtype == np.int16
    assert np.array_equal(back.data, vol.data)
    assert back.spacing == vol.spacing and back.origin == vol.origin

    f32 = Volume3D(np.random.default_rng(4).normal(size=(3, 4, 5)).astype(np.float32))
    again = read_volume(write_volume(f32, tmp_path / "f.nii"))
    assert again.data.dtype == np.float32 and np.array_equal(again.data, f32.data)

    m = BinaryMask(np.random.default_rng(5).random((4, 4, 4)) < 0.5)
    assert np.array_equal(read_volume(write_volume(m, tmp_path / "m.nii")).data, m.data)


def test_nifti_unsupported_voxel_type(tmp_path):
    nib.save(nib.Nifti1Image(np.zeros((2, 2, 2), dtype=np.int32), np.eye(4)), str(tmp_path / "i32.nii"))
    with pytest.raises(UnsupportedElementType):
        read_volume(tmp_path / "i32.nii")


def test_missing_input_and_unknown_format(tmp_path):
    with pytest.raises(InputNotFound):
        read_volume(tmp_path / "nope.mha")
    with pytest.raises(UnsupportedElementType):
        write_volume(Volume3D(_int16()), tmp_path / "ct.png")


def test_report_quoting_and_parse_back(tmp_path):
    rows = [{"case": "a,b", "dsc": 0.95}, {"case": 'say "hi"', "dsc": 0.5}]
    path = write_report(rows, ["case", "dsc"], tmp_path / "r.csv")
    text = path.read_text(encoding="utf-8")
    assert '"a,b"' in text and "\r" not in text
    back = read_report(path)
    assert [r["case"] for r in back] == ["a,b", 'say "hi"']
    assert [float(r["dsc"]) for r in back] == [0.95, 0.5]

    jpath = write_report(rows, ["case"], tmp_path / "r.json", fmt="json")
    assert json.loads(jpath.read_text(encoding="utf-8")) == [{"case": "a,b"}, {"case": 'say "hi"'}]


def test_empty_report_is_header_only(tmp_path):
    path = write_report([], ["case", "slice", "dsc"], tmp_path / "empty.csv")
    assert path.read_text(encoding="utf-8") == "case,slice,dsc\n"


def test_unwritable_path(tmp_path):
    blocker = tmp_path / "file.txt"
    blocker.write_text("x")
    with pytest.raises(UnwritablePath):
        write_report([], ["a"], blocker / "sub" / "r.csv")
    with pytest.raises(UnwritablePath):
        write_volume(Volume3D(_int16()), blocker / "ct.mha")
