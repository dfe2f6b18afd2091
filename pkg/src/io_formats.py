"""
Volume and report files.

MetaImage (.mha, or .mhd with a separate .raw) and NIfTI-1 (.nii, .nii.gz)
volumes with int16, uint8 or float32 voxels. MetaImage voxel order is x
fastest, which is Fortran order for our (x, y, z) arrays. Compressed and
big-endian MetaImage data are read; writing is always little-endian and
uncompressed. A uint8 volume holding only 0 and 1 is read as a BinaryMask.
"""

from __future__ import annotations

import csv
import json
import logging
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import nibabel as nib
import numpy as np
from nibabel.filebasedimages import ImageFileError

from src.errors import (
    InputNotFound,
    MalformedHeader,
    MissingDataFile,
    SizeMismatch,
    UnsupportedElementType,
    UnwritablePath,
)
from src.volume import BinaryMask, Volume3D

logger = logging.getLogger(__name__)

MET_TYPES = {"MET_SHORT": np.dtype(np.int16), "MET_UCHAR": np.dtype(np.uint8), "MET_FLOAT": np.dtype(np.float32)}
MET_NAMES = {v: k for k, v in MET_TYPES.items()}
REQUIRED_KEYS = ("NDims", "DimSize", "ElementType", "ElementDataFile")
ORIGIN_KEYS = ("Offset", "Origin", "Position")

Image = Union[Volume3D, BinaryMask]


@dataclass
class VolumeHeader:
    dims: Tuple[int, int, int]
    spacing: Tuple[float, float, float]
    origin: Tuple[float, float, float]
    element_type: str  # numpy name: int16 | uint8 | float32
    msb: bool = False
    compressed: bool = False
    data_file: str = "LOCAL"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.element_type).newbyteorder(">" if self.msb else "<")

    @property
    def n_bytes(self) -> int:
        return int(np.prod(self.dims)) * np.dtype(self.element_type).itemsize


def _format_of(path: Path) -> str:
    name = path.name.lower()
    if name.endswith(".nii.gz") or name.endswith(".nii"):
        return "nifti"
    if name.endswith(".mha") or name.endswith(".mhd"):
        return "metaimage"
    raise UnsupportedElementType(f"unknown volume format for {path.name}")


# ------------------------------- metaimage --------------------------------------


def _numbers(key: str, text: str, count: int, cast=float) -> tuple:
    try:
        values = tuple(cast(v) for v in text.split())
    except ValueError as e:
        raise MalformedHeader(f"{key}: cannot parse {text!r}") from e
    if len(values) != count:
        raise MalformedHeader(f"{key}: expected {count} values, got {len(values)}")
    return values


def _flag(key: str, text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1"):
        return True
    if low in ("false", "0"):
        return False
    raise MalformedHeader(f"{key}: not a boolean: {text!r}")


def parse_metaimage_header(raw: bytes) -> Tuple[VolumeHeader, int]:
    """Header fields and the byte offset where the header ends."""
    fields: Dict[str, str] = {}
    pos = 0
    while "ElementDataFile" not in fields:
        end = raw.find(b"\n", pos)
        if end < 0:
            raise MalformedHeader("header has no ElementDataFile line")
        line = raw[pos:end].decode("utf-8", errors="replace").strip()
        pos = end + 1
        if not line:
            continue
        if "=" not in line:
            raise MalformedHeader(f"not a 'key = value' line: {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        fields[key] = value

    missing = [k for k in REQUIRED_KEYS if k not in fields]
    if missing:
        raise MalformedHeader(f"missing header keys: {missing}")
    if fields.get("ObjectType", "Image") != "Image":
        raise MalformedHeader(f"ObjectType {fields['ObjectType']!r} is not an image")
    if fields["NDims"] != "3":
        raise MalformedHeader(f"only 3D images are supported, NDims = {fields['NDims']}")
    etype = fields["ElementType"]
    if etype not in MET_TYPES:
        raise UnsupportedElementType(f"element type {etype}")

    dims = _numbers("DimSize", fields["DimSize"], 3, int)
    if min(dims) < 1:
        raise MalformedHeader(f"DimSize must be positive, got {dims}")
    spacing = _numbers("ElementSpacing", fields.get("ElementSpacing", "1 1 1"), 3)
    origin_key = next((k for k in ORIGIN_KEYS if k in fields), None)
    origin = _numbers(origin_key, fields[origin_key], 3) if origin_key else (0.0, 0.0, 0.0)
    msb = _flag("ElementByteOrderMSB", fields.get("ElementByteOrderMSB", fields.get("BinaryDataByteOrderMSB", "False")))
    compressed = _flag("CompressedData", fields.get("CompressedData", "False"))
    header = VolumeHeader(dims, spacing, origin, MET_TYPES[etype].name, msb, compressed, fields["ElementDataFile"])
    return header, pos


def _decode(header: VolumeHeader, payload: bytes) -> np.ndarray:
    if header.compressed:
        try:
            payload = zlib.decompress(payload)
        except zlib.error as e:
            raise SizeMismatch(f"compressed data is corrupt: {e}") from e
    if len(payload) != header.n_bytes:
        raise SizeMismatch(f"expected {header.n_bytes} data bytes, found {len(payload)}")
    data = np.frombuffer(payload, dtype=header.dtype).reshape(header.dims, order="F")
    return data.astype(header.element_type)


def read_metaimage(path: str | Path) -> Tuple[VolumeHeader, np.ndarray]:
    path = Path(path)
    raw = path.read_bytes()
    header, offset = parse_metaimage_header(raw)
    if header.data_file == "LOCAL":
        payload = raw[offset:]
    else:
        data_path = path.parent / header.data_file
        if not data_path.is_file():
            raise MissingDataFile(f"{path.name} refers to missing data file {header.data_file}")
        payload = data_path.read_bytes()
    return header, _decode(header, payload)


def _header_text(header: VolumeHeader) -> str:
    def join(values) -> str:
        return " ".join(repr(float(v)) if isinstance(v, float) else str(v) for v in values)

    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "CompressedData = False",
        "ElementByteOrderMSB = False",
        f"Offset = {join(header.origin)}",
        f"ElementSpacing = {join(header.spacing)}",
        f"DimSize = {join(header.dims)}",
        f"ElementType = {MET_NAMES[np.dtype(header.element_type)]}",
        f"ElementDataFile = {header.data_file}",
    ]
    return "\n".join(lines) + "\n"


def write_metaimage(path: str | Path, data: np.ndarray, spacing, origin) -> Path:
    path = Path(path)
    detached = path.suffix.lower() == ".mhd"
    data_file = path.with_suffix(".raw").name if detached else "LOCAL"
    header = VolumeHeader(
        tuple(int(n) for n in data.shape),
        tuple(float(s) for s in spacing),
        tuple(float(o) for o in origin),
        data.dtype.name,
        data_file=data_file,
    )
    payload = np.ascontiguousarray(data).astype(data.dtype.newbyteorder("<")).tobytes(order="F")
    text = _header_text(header).encode("utf-8")
    if detached:
        path.write_bytes(text)
        (path.parent / data_file).write_bytes(payload)
    else:
        path.write_bytes(text + payload)
    return path


# ------------------------------- nifti ------------------------------------------


def read_nifti(path: str | Path) -> Tuple[VolumeHeader, np.ndarray]:
    try:
        img = nib.load(str(path))
    except (ImageFileError, OSError, EOFError, ValueError) as e:
        raise MalformedHeader(f"{Path(path).name}: {e}") from e
    if len(img.shape) != 3:
        raise MalformedHeader(f"only 3D images are supported, got shape {img.shape}")
    try:
        data = np.asanyarray(img.dataobj)
    except (OSError, EOFError, ValueError) as e:
        raise SizeMismatch(f"{Path(path).name}: {e}") from e
    if data.dtype.name not in ("int16", "uint8", "float32"):
        raise UnsupportedElementType(f"voxel type {data.dtype}")
    data = data.astype(data.dtype.name, copy=False)
    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    origin = tuple(float(o) for o in img.affine[:3, 3])
    header = VolumeHeader(tuple(int(n) for n in data.shape), spacing, origin, data.dtype.name, data_file=Path(path).name)
    return header, data


def write_nifti(path: str | Path, data: np.ndarray, spacing, origin) -> Path:
    affine = np.diag([float(s) for s in spacing] + [1.0])
    affine[:3, 3] = [float(o) for o in origin]
    img = nib.Nifti1Image(data, affine)
    img.header.set_data_dtype(data.dtype)
    img.header.set_xyzt_units("mm")
    nib.save(img, str(path))
    return Path(path)


# ------------------------------- volumes ----------------------------------------


def _storage(obj: Image) -> np.ndarray:
    data = obj.data
    if isinstance(obj, BinaryMask):
        return data.astype(np.uint8)
    if data.dtype in (np.int16, np.uint8, np.float32):
        return data
    if np.issubdtype(data.dtype, np.integer):
        if data.size and (data.min() < np.iinfo(np.int16).min or data.max() > np.iinfo(np.int16).max):
            raise UnsupportedElementType(f"{data.dtype} values do not fit int16")
        return data.astype(np.int16)
    if np.issubdtype(data.dtype, np.floating):
        return data.astype(np.float32)
    raise UnsupportedElementType(f"voxel type {data.dtype}")


def read_volume(path: str | Path) -> Image:
    path = Path(path)
    if not path.is_file():
        raise InputNotFound(f"no such file: {path}")
    fmt = _format_of(path)
    header, data = read_metaimage(path) if fmt == "metaimage" else read_nifti(path)
    logger.debug("read %s: dims=%s spacing=%s type=%s", path.name, header.dims, header.spacing, header.element_type)
    if data.dtype == np.uint8 and data.size and data.max() <= 1:
        return BinaryMask(data.astype(bool), header.spacing, header.origin)
    return Volume3D(data, header.spacing, header.origin)


def write_volume(obj: Image, path: str | Path, fmt: Optional[str] = None) -> Path:
    path = Path(path)
    fmt = fmt or _format_of(path)
    data = _storage(obj)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if fmt == "metaimage":
            return write_metaimage(path, data, obj.spacing, obj.origin)
        if fmt == "nifti":
            return write_nifti(path, data, obj.spacing, obj.origin)
    except OSError as e:
        raise UnwritablePath(f"cannot write {path}: {e}") from e
    raise UnsupportedElementType(f"unknown volume format {fmt!r}")


# ------------------------------- reports ----------------------------------------


def write_report(
    rows: Sequence[Mapping[str, object]],
    columns: Sequence[str],
    path: str | Path,
    fmt: str = "csv",
) -> Path:
    """CSV (RFC 4180 quoting, UTF-8, LF) or JSON list of objects restricted to ``columns``."""
    path = Path(path)
    records = [{c: r.get(c, "") for c in columns} for r in rows]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as f:
            if fmt == "json":
                json.dump(records, f, ensure_ascii=False, indent=2)
                f.write("\n")
            else:
                w = csv.DictWriter(f, fieldnames=list(columns), lineterminator="\n")
                w.writeheader()
                w.writerows(records)
    except OSError as e:
        raise UnwritablePath(f"cannot write {path}: {e}") from e
    return path


def read_report(path: str | Path) -> List[Dict[str, str]]:
    path = Path(path)
    if not path.is_file():
        raise InputNotFound(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as f:
        if path.suffix.lower() == ".json":
            return json.load(f)
        return list(csv.DictReader(f))
