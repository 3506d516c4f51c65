"""MetaImage (.mhd header + .raw payload) volume I/O."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ELEMENT_TYPES = {
    "MET_SHORT": np.dtype("<i2"),
    "MET_UCHAR": np.dtype("u1"),
}
REQUIRED_KEYS = ("ObjectType", "NDims", "DimSize", "ElementType", "ElementDataFile")
# written in this order; anything else read from a header is kept after these
_KEY_ORDER = ("ObjectType", "NDims", "BinaryData", "BinaryDataByteOrderMSB", "CompressedData",
              "DimSize", "ElementSpacing", "ElementType", "ElementDataFile")


class MhdError(ValueError):
    pass


@dataclass
class MhdVolume:
    """Voxel array stored (nz, ny, nx) with x fastest, matching the raw layout."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    header: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.data.ndim == 2:
            self.data = self.data[None]
        if self.data.ndim != 3:
            raise MhdError(f"volume data must be 2-D or 3-D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self) -> tuple:
        nz, ny, nx = self.data.shape
        return nx, ny, nz

    @property
    def element_type(self) -> str:
        dt = self.data.dtype
        if dt.kind == "i" and dt.itemsize == 2:
            return "MET_SHORT"
        if dt.kind == "u" and dt.itemsize == 1:
            return "MET_UCHAR"
        raise MhdError(f"unsupported element dtype {dt}")


def _parse_header(text: str) -> dict:
    header = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise MhdError(f"malformed header line {line!r}")
        header[key.strip()] = value.strip()
    return header


def read_mhd(path) -> MhdVolume:
    path = Path(path)
    header = _parse_header(path.read_text())
    missing = [k for k in REQUIRED_KEYS if k not in header]
    if missing:
        raise MhdError(f"{path}: missing header keys {missing}")
    etype = header["ElementType"]
    if etype not in ELEMENT_TYPES:
        raise MhdError(f"{path}: unsupported ElementType {etype}")
    if header.get("CompressedData", "False").lower() == "true":
        raise MhdError(f"{path}: compressed payloads are not supported")
    ndims = int(header["NDims"])
    dims = [int(d) for d in header["DimSize"].split()]
    if len(dims) != ndims or ndims not in (2, 3):
        raise MhdError(f"{path}: DimSize {dims} inconsistent with NDims {ndims}")
    if ndims == 2:
        dims.append(1)
    nx, ny, nz = dims
    dtype = ELEMENT_TYPES[etype]
    if header.get("BinaryDataByteOrderMSB", header.get("ElementByteOrderMSB", "False")).lower() == "true":
        dtype = dtype.newbyteorder(">")
    raw_path = path.parent / header["ElementDataFile"]
    raw = raw_path.read_bytes()
    expected = nx * ny * nz * dtype.itemsize
    if len(raw) != expected:
        raise MhdError(f"{path}: DimSize promises {expected} bytes, {raw_path.name} has {len(raw)}")
    data = np.frombuffer(raw, dtype=dtype).reshape(nz, ny, nx).astype(dtype.newbyteorder("="))
    spacing = tuple(float(s) for s in header.get("ElementSpacing", " ".join(["1"] * ndims)).split())
    if len(spacing) == 2:
        spacing = (*spacing, 1.0)
    return MhdVolume(data=data, spacing=spacing, header=header)


def _fmt_spacing(s: float) -> str:
    return repr(float(s))


def write_mhd(vol: MhdVolume, path) -> Path:
    """Write ``path`` (.mhd) and its sibling .raw; returns the header path."""
    path = Path(path)
    if path.suffix != ".mhd":
        path = path.with_suffix(".mhd")
    raw_name = path.with_suffix(".raw").name
    etype = vol.element_type
    nx, ny, nz = vol.dims
    header = dict(vol.header)
    header.update({
        "ObjectType": "Image",
        "NDims": "3",
        "BinaryData": "True",
        "BinaryDataByteOrderMSB": "False",
        "CompressedData": "False",
        "DimSize": f"{nx} {ny} {nz}",
        "ElementSpacing": " ".join(_fmt_spacing(s) for s in vol.spacing),
        "ElementType": etype,
        "ElementDataFile": raw_name,
    })
    header.pop("ElementByteOrderMSB", None)
    keys = [k for k in _KEY_ORDER if k in header] + [k for k in header if k not in _KEY_ORDER]
    path.write_text("".join(f"{k} = {header[k]}\n" for k in keys))
    data = np.ascontiguousarray(vol.data, dtype=ELEMENT_TYPES[etype])
    (path.parent / raw_name).write_bytes(data.tobytes())
    return path
