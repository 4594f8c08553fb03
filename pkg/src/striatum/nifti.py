"""Minimal NIfTI-1 reader/writer for uncompressed single-volume files.

Only what the pipeline needs: the 348-byte header, datatypes uint8/int16/
float32, either endianness (auto-detected from sizeof_hdr), 3-D volumes,
and scl_slope/scl_inter scaling. Compressed files are out of scope; gunzip
a .nii.gz before ingesting it.

Header fields used, with byte offsets:
    0   sizeof_hdr   int32      must be 348; endianness probe
    40  dim[8]       int16[8]   dim[0]=3, dim[1..3] = extents (x fastest)
    70  datatype     int16      2=uint8, 4=int16, 16=float32
    72  bitpix       int16      must match datatype
    76  pixdim       float32[8]
    108 vox_offset   float32    byte offset of the data section
    112 scl_slope    float32    value = raw*slope + inter when slope != 0
    116 scl_inter    float32
    344 magic        char[4]    "n+1\\0" (single file) or "ni1\\0" (.hdr/.img pair)

Voxel data is stored x-fastest (Fortran order). Values are rounded to
integers and clamped to [0, 32767] on read; clamped voxels are counted and
reported as a warning on stderr.
"""

from __future__ import annotations

import struct
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataFormatError

HEADER_SIZE = 348
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"
INTENSITY_MAX = 2**15 - 1  # 32767

_DTYPES = {2: "u1", 4: "i2", 16: "f4"}
_BITPIX = {2: 8, 4: 16, 16: 32}
_CODES = {"uint8": 2, "int16": 4, "float32": 16}


@dataclass
class Volume:
    """A 3-D scan; voxels indexed [x, y, z], integer intensities in [0, 32767]."""

    voxels: np.ndarray
    source_id: str = ""
    n_clamped: int = 0

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3:
            raise ValueError(f"volume must be 3-D, got shape {self.voxels.shape}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape


def _detect_endianness(header: bytes) -> str:
    for order in ("<", ">"):
        if struct.unpack_from(order + "i", header, 0)[0] == HEADER_SIZE:
            return order
    got_le = struct.unpack_from("<i", header, 0)[0]
    raise DataFormatError(
        f"not a NIfTI-1 header: sizeof_hdr is {got_le} in either byte order, expected {HEADER_SIZE}"
    )


def read_nifti(path) -> Volume:
    """Parse an uncompressed NIfTI-1 file into a Volume.

    Raises DataFormatError with a distinct message for: bad magic, unsupported
    datatype, bitpix mismatch, wrong dimensionality, and truncated header or
    data section.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < HEADER_SIZE:
        raise DataFormatError(f"{path}: truncated header ({len(raw)} bytes < {HEADER_SIZE})")
    order = _detect_endianness(raw)

    magic = raw[344:348]
    if magic not in (MAGIC_SINGLE, MAGIC_PAIR):
        raise DataFormatError(f"{path}: bad magic {magic!r}, expected 'n+1' or 'ni1'")

    dim = struct.unpack_from(order + "8h", raw, 40)
    if dim[0] != 3:
        raise DataFormatError(f"{path}: expected a 3-D volume, header says dim[0]={dim[0]}")
    nx, ny, nz = dim[1], dim[2], dim[3]
    if min(nx, ny, nz) < 1:
        raise DataFormatError(f"{path}: non-positive extents {(nx, ny, nz)}")

    datatype = struct.unpack_from(order + "h", raw, 70)[0]
    if datatype not in _DTYPES:
        raise DataFormatError(
            f"{path}: unsupported datatype code {datatype} (supported: uint8=2, int16=4, float32=16)"
        )
    bitpix = struct.unpack_from(order + "h", raw, 72)[0]
    if bitpix != _BITPIX[datatype]:
        raise DataFormatError(f"{path}: bitpix {bitpix} inconsistent with datatype {datatype}")

    vox_offset = struct.unpack_from(order + "f", raw, 108)[0]
    scl_slope = struct.unpack_from(order + "f", raw, 112)[0]
    scl_inter = struct.unpack_from(order + "f", raw, 116)[0]

    if magic == MAGIC_PAIR:
        img_path = path.with_suffix(".img")
        if not img_path.exists():
            raise DataFormatError(f"{path}: header/image pair but {img_path} is missing")
        data_bytes = img_path.read_bytes()
        offset = int(vox_offset)
    else:
        data_bytes = raw
        offset = int(vox_offset) if vox_offset >= HEADER_SIZE else HEADER_SIZE

    dtype = np.dtype(order + _DTYPES[datatype])
    need = nx * ny * nz * dtype.itemsize
    if len(data_bytes) < offset + need:
        raise DataFormatError(
            f"{path}: truncated data section ({len(data_bytes) - offset} bytes, need {need})"
        )
    flat = np.frombuffer(data_bytes, dtype=dtype, count=nx * ny * nz, offset=offset)
    values = flat.astype(np.float64)
    if scl_slope != 0.0 and (scl_slope != 1.0 or scl_inter != 0.0):
        values = values * scl_slope + scl_inter
    values = np.rint(values)
    clamped = int(np.count_nonzero((values < 0) | (values > INTENSITY_MAX)))
    if clamped:
        print(
            f"warning: {path}: clamped {clamped} voxel(s) into [0, {INTENSITY_MAX}]",
            file=sys.stderr,
        )
    values = np.clip(values, 0, INTENSITY_MAX)
    voxels = values.astype(np.int32).reshape((nx, ny, nz), order="F")
    return Volume(voxels=voxels, source_id=path.stem, n_clamped=clamped)


def write_nifti(volume: Volume, path, datatype: str = "int16", endianness: str = "little") -> None:
    """Write a Volume as a single-file NIfTI-1 (.nii) in the requested encoding."""
    if datatype not in _CODES:
        raise ValueError(f"datatype must be one of {sorted(_CODES)}, got {datatype!r}")
    if endianness not in ("little", "big"):
        raise ValueError(f"endianness must be 'little' or 'big', got {endianness!r}")
    vox = volume.voxels
    if vox.min() < 0 or vox.max() > INTENSITY_MAX:
        raise ValueError(f"voxel values outside [0, {INTENSITY_MAX}] cannot be written")
    if datatype == "uint8" and vox.max() > 255:
        raise ValueError("voxel values exceed the uint8 range")

    order = "<" if endianness == "little" else ">"
    code = _CODES[datatype]
    nx, ny, nz = vox.shape

    header = bytearray(HEADER_SIZE)
    struct.pack_into(order + "i", header, 0, HEADER_SIZE)
    struct.pack_into(order + "8h", header, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into(order + "h", header, 70, code)
    struct.pack_into(order + "h", header, 72, _BITPIX[code])
    struct.pack_into(order + "8f", header, 76, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into(order + "f", header, 108, float(HEADER_SIZE + 4))  # vox_offset
    struct.pack_into(order + "f", header, 112, 0.0)  # scl_slope 0: values used as stored
    struct.pack_into(order + "f", header, 116, 0.0)
    header[344:348] = MAGIC_SINGLE

    data = np.ascontiguousarray(vox.astype(np.dtype(order + _DTYPES[code])))
    with open(path, "wb") as f:
        f.write(bytes(header))
        f.write(b"\x00\x00\x00\x00")
        f.write(data.tobytes(order="F"))
