"""Single-file NIfTI-1 (.nii / .nii.gz) reading and writing.

Only the fields this package needs are interpreted (dimensions, datatype,
scaling, vox_offset); every other header byte is carried through untouched so
that writing a volume that was read reproduces the original stream.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"

DATATYPES: dict[int, np.dtype] = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
}
_CODE_FOR_DTYPE = {v: k for k, v in DATATYPES.items()}

# byte offsets inside the 348-byte header
_OFF_DIM = 40
_OFF_DATATYPE = 70
_OFF_BITPIX = 72
_OFF_PIXDIM = 76
_OFF_VOX_OFFSET = 108
_OFF_SCL_SLOPE = 112
_OFF_SCL_INTER = 116
_OFF_XYZT_UNITS = 123
_OFF_QFORM_CODE = 252
_OFF_SFORM_CODE = 254
_OFF_SROW = 280
_OFF_MAGIC = 344


class NiftiError(ValueError):
    pass


class NiftiHeaderError(NiftiError):
    """sizeof_hdr is not 348 in either byte order."""


class NiftiMagicError(NiftiError):
    pass


class NiftiDatatypeError(NiftiError):
    pass


class NiftiTruncatedError(NiftiError):
    pass


class NiftiDimensionError(NiftiError):
    pass


@dataclass
class NiftiVolume:
    """Stored voxel values plus the opaque header they came with.

    ``raw`` holds the values exactly as encoded in the file, indexed
    ``[x, y, z]``. ``data`` applies scl_slope / scl_inter (when the slope is
    non-zero) and returns float64.
    """

    raw: np.ndarray
    header: bytes
    extension: bytes = b"\x00\x00\x00\x00"
    byteorder: str = "<"

    @property
    def datatype(self) -> int:
        return _CODE_FOR_DTYPE[self.raw.dtype.newbyteorder("=")]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.raw.shape

    def _float(self, offset: int) -> float:
        return struct.unpack_from(self.byteorder + "f", self.header, offset)[0]

    @property
    def scl_slope(self) -> float:
        return self._float(_OFF_SCL_SLOPE)

    @property
    def scl_inter(self) -> float:
        return self._float(_OFF_SCL_INTER)

    @property
    def pixdim(self) -> tuple[float, ...]:
        return struct.unpack_from(self.byteorder + "8f", self.header, _OFF_PIXDIM)

    @property
    def data(self) -> np.ndarray:
        out = self.raw.astype(np.float64)
        slope = self.scl_slope
        if slope != 0.0 and np.isfinite(slope):
            out = out * slope + self.scl_inter
        return out

    @classmethod
    def from_array(cls, array, datatype: int | None = None, voxel_size=(1.0, 1.0, 1.0), affine=None) -> "NiftiVolume":
        """Wrap ``array`` (indexed [x, y, z]) with a fresh little-endian header, no scaling."""
        array = np.asarray(array)
        if datatype is None:
            datatype = _CODE_FOR_DTYPE.get(array.dtype.newbyteorder("="), 16)
        if datatype not in DATATYPES:
            raise NiftiDatatypeError(f"unsupported datatype code {datatype}")
        if not 1 <= array.ndim <= 3:
            raise NiftiDimensionError(f"expected 1 to 3 spatial axes, got shape {array.shape}")
        raw = np.ascontiguousarray(array, dtype=DATATYPES[datatype].newbyteorder("<"))
        hdr = bytearray(HEADER_SIZE)
        struct.pack_into("<i", hdr, 0, HEADER_SIZE)
        hdr[38] = ord("r")
        pixdim = [1.0, *voxel_size[: array.ndim]]
        pixdim += [1.0] * (8 - len(pixdim))
        struct.pack_into("<8f", hdr, _OFF_PIXDIM, *pixdim)
        struct.pack_into("<f", hdr, _OFF_SCL_SLOPE, 1.0)
        hdr[_OFF_XYZT_UNITS] = 2  # mm
        if affine is not None:
            affine = np.asarray(affine, dtype=np.float64)
            struct.pack_into("<hh", hdr, _OFF_QFORM_CODE, 0, 2)
            struct.pack_into("<12f", hdr, _OFF_SROW, *affine[:3].ravel())
        hdr[_OFF_MAGIC:_OFF_MAGIC + 4] = MAGIC_SINGLE
        return cls(raw=raw, header=bytes(hdr))


def _detect_byteorder(hdr: bytes) -> str:
    for order in ("<", ">"):
        if struct.unpack_from(order + "i", hdr, 0)[0] == HEADER_SIZE:
            return order
    raise NiftiHeaderError("sizeof_hdr is not 348 in either byte order")


def parse_nifti(blob: bytes) -> NiftiVolume:
    if len(blob) < HEADER_SIZE:
        raise NiftiTruncatedError(f"file is {len(blob)} bytes, shorter than the 348-byte header")
    hdr = bytes(blob[:HEADER_SIZE])
    order = _detect_byteorder(hdr)
    magic = hdr[_OFF_MAGIC:_OFF_MAGIC + 4]
    if magic == MAGIC_PAIR:
        raise NiftiMagicError("header/image pairs (magic 'ni1') are not supported; convert to single-file .nii")
    if magic != MAGIC_SINGLE:
        raise NiftiMagicError(f"bad magic {magic!r}, expected {MAGIC_SINGLE!r}")
    dim = struct.unpack_from(order + "8h", hdr, _OFF_DIM)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise NiftiDimensionError(f"dim[0] = {ndim} is out of range")
    extents = list(dim[1:ndim + 1])
    if any(e < 1 for e in extents):
        raise NiftiDimensionError(f"non-positive extent in {extents}")
    if ndim > 3:
        if any(e != 1 for e in extents[3:]):
            raise NiftiDimensionError(f"only 3 spatial axes are supported, got extents {extents}")
        extents = extents[:3]
    code = struct.unpack_from(order + "h", hdr, _OFF_DATATYPE)[0]
    if code not in DATATYPES:
        raise NiftiDatatypeError(f"unsupported datatype code {code}")
    dtype = DATATYPES[code].newbyteorder(order)
    vox_offset = int(struct.unpack_from(order + "f", hdr, _OFF_VOX_OFFSET)[0])
    if vox_offset < HEADER_SIZE:
        vox_offset = HEADER_SIZE + 4
    nbytes = int(np.prod(extents)) * dtype.itemsize
    if len(blob) < vox_offset + nbytes:
        raise NiftiTruncatedError(f"expected {nbytes} data bytes at offset {vox_offset}, file has {len(blob)} bytes")
    flat = np.frombuffer(blob, dtype=dtype, count=int(np.prod(extents)), offset=vox_offset)
    raw = flat.reshape(extents, order="F")
    return NiftiVolume(raw=raw, header=hdr, extension=bytes(blob[HEADER_SIZE:vox_offset]), byteorder=order)


def read_nifti(path) -> NiftiVolume:
    blob = Path(path).read_bytes()
    if blob[:2] == b"\x1f\x8b":
        blob = gzip.decompress(blob)
    return parse_nifti(blob)


def encode_nifti(vol: NiftiVolume) -> bytes:
    order = vol.byteorder
    raw = vol.raw
    if raw.ndim > 3:
        raise NiftiDimensionError("only up to 3 spatial axes can be written")
    code = vol.datatype
    hdr = bytearray(vol.header)
    dims = [raw.ndim, *raw.shape] + [1] * (7 - raw.ndim)
    struct.pack_into(order + "8h", hdr, _OFF_DIM, *dims)
    struct.pack_into(order + "hh", hdr, _OFF_DATATYPE, code, raw.dtype.itemsize * 8)
    ext = vol.extension if len(vol.extension) >= 4 else b"\x00\x00\x00\x00"
    struct.pack_into(order + "f", hdr, _OFF_VOX_OFFSET, float(HEADER_SIZE + len(ext)))
    hdr[_OFF_MAGIC:_OFF_MAGIC + 4] = MAGIC_SINGLE
    payload = np.asarray(raw, dtype=raw.dtype.newbyteorder(order)).tobytes(order="F")
    return bytes(hdr) + ext + payload


def write_nifti(vol: NiftiVolume, path) -> None:
    """Write ``vol``; a ``.gz`` suffix selects a gzip container (mtime 0, so bytes are reproducible).

    The file is written to a temporary name and renamed into place.
    """
    path = Path(path)
    blob = encode_nifti(vol)
    if path.suffix == ".gz":
        blob = gzip.compress(blob, mtime=0)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def save_volume(array, path, datatype: int = 16) -> None:
    write_nifti(NiftiVolume.from_array(array, datatype=datatype), path)


def load_volume(path) -> np.ndarray:
    return read_nifti(path).data
