"""Reader/writer for the single-file NIfTI-1 subset the tool accepts.

Supported: magic ``n+1``, either byte order, 2D/3D volumes (a 4th axis of
length 1 is tolerated), datatypes uint8, int16, uint16 and float32.
Detached headers (``ni1``), NIfTI-2 and compressed files are rejected.

Slice ``k`` of a volume is returned as a ``(ny, nx)`` array, so raster rows
follow the j axis and columns the i axis. Slices keep their stored order;
no reorientation is applied.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
MIN_VOX_OFFSET = 352

DT_UINT8, DT_INT16, DT_FLOAT32, DT_UINT16 = 2, 4, 16, 512
_DTYPES = {DT_UINT8: ("u1", 8), DT_INT16: ("i2", 16), DT_FLOAT32: ("f4", 32), DT_UINT16: ("u2", 16)}
IMAGE_DTYPES = (DT_INT16, DT_UINT16, DT_FLOAT32, DT_UINT8)
LABEL_DTYPES = (DT_UINT8, DT_INT16)

# field name -> (offset, struct code)
_FIELDS = {
    "sizeof_hdr": (0, "i"),
    "dim": (40, "8h"),
    "datatype": (70, "h"),
    "bitpix": (72, "h"),
    "pixdim": (76, "8f"),
    "vox_offset": (108, "f"),
    "scl_slope": (112, "f"),
    "scl_inter": (116, "f"),
    "magic": (344, "4s"),
}


class NiftiError(ValueError):
    """Malformed or unsupported file. ``offset`` and ``field`` locate the problem."""

    def __init__(self, message: str, offset: int | None = None, field: str | None = None):
        where = f" (field {field} at byte {offset})" if field is not None else ""
        super().__init__(message + where)
        self.offset = offset
        self.field = field


class BadMagic(NiftiError):
    pass


class UnsupportedVariant(NiftiError):
    pass


class UnsupportedDatatype(NiftiError):
    pass


class TruncatedData(NiftiError):
    pass


class DimMismatch(NiftiError):
    pass


@dataclass(frozen=True)
class NiftiHeader:
    raw: bytes  # the 348 header bytes, kept so writers can copy geometry verbatim
    endian: str  # "<" or ">"
    shape: tuple[int, int, int]  # (nx, ny, nz)
    datatype: int
    vox_offset: int
    scl_slope: float
    scl_inter: float
    pixdim: tuple[float, ...]

    @property
    def n_slices(self) -> int:
        return self.shape[2]

    @property
    def spacing(self) -> tuple[float, float, float]:
        """(row_mm, col_mm, slice_mm) in raster terms."""
        return (abs(self.pixdim[2]), abs(self.pixdim[1]), abs(self.pixdim[3]))


def _unpack(raw: bytes, endian: str, name: str):
    off, code = _FIELDS[name]
    vals = struct.unpack_from(endian + code, raw, off)
    return vals if len(vals) > 1 else vals[0]


def parse_header(raw: bytes) -> NiftiHeader:
    if len(raw) < HEADER_SIZE:
        raise TruncatedData(f"file holds {len(raw)} bytes, shorter than a NIfTI-1 header", 0, "sizeof_hdr")
    magic = raw[344:348]
    if magic == b"ni1\x00":
        raise UnsupportedVariant("detached-header NIfTI (ni1) is not supported; convert to a single .nii file",
                                 344, "magic")
    if magic != b"n+1\x00":
        raise BadMagic(f"bad magic {magic!r}, expected b'n+1\\x00'", 344, "magic")
    endian = "<"
    dim0 = _unpack(raw, endian, "dim")[0]
    if not 1 <= dim0 <= 7:
        endian = ">"
        dim0 = _unpack(raw, endian, "dim")[0]
        if not 1 <= dim0 <= 7:
            raise NiftiError(f"dim[0] is {dim0} in either byte order", 40, "dim")
    if _unpack(raw, endian, "sizeof_hdr") != HEADER_SIZE:
        raise NiftiError("sizeof_hdr is not 348", 0, "sizeof_hdr")
    dim = _unpack(raw, endian, "dim")
    if dim0 < 2 or dim0 > 4:
        raise DimMismatch(f"only 2D/3D volumes are supported, dim[0]={dim0}", 40, "dim")
    extents = list(dim[1:dim0 + 1])
    if any(d < 1 for d in extents):
        raise DimMismatch(f"non-positive extent in dim {tuple(extents)}", 42, "dim")
    if dim0 == 4 and extents[3] != 1:
        raise DimMismatch(f"4D volumes are not supported (dim[4]={extents[3]})", 48, "dim")
    nx, ny = extents[0], extents[1]
    nz = extents[2] if dim0 >= 3 else 1
    datatype = _unpack(raw, endian, "datatype")
    if datatype not in _DTYPES:
        raise UnsupportedDatatype(f"unsupported datatype code {datatype}", 70, "datatype")
    bitpix = _unpack(raw, endian, "bitpix")
    if bitpix != _DTYPES[datatype][1]:
        raise NiftiError(f"bitpix {bitpix} disagrees with datatype {datatype}", 72, "bitpix")
    vox = _unpack(raw, endian, "vox_offset")
    if not math.isfinite(vox) or vox < MIN_VOX_OFFSET or vox != int(vox) or vox > 2**40:
        raise NiftiError(f"invalid vox_offset {vox}", 108, "vox_offset")
    slope = _unpack(raw, endian, "scl_slope")
    inter = _unpack(raw, endian, "scl_inter")
    if not math.isfinite(slope):
        slope = 0.0
    if not math.isfinite(inter):
        inter = 0.0
    return NiftiHeader(bytes(raw[:HEADER_SIZE]), endian, (nx, ny, nz), datatype, int(vox),
                       float(slope), float(inter), tuple(_unpack(raw, endian, "pixdim")))


def _read_data(raw: bytes, hdr: NiftiHeader, allowed) -> np.ndarray:
    if hdr.datatype not in allowed:
        raise UnsupportedDatatype(f"datatype code {hdr.datatype} not allowed here", 70, "datatype")
    code, bits = _DTYPES[hdr.datatype]
    nx, ny, nz = hdr.shape
    count = nx * ny * nz
    need = count * bits // 8
    have = len(raw) - hdr.vox_offset
    if have < need:
        raise TruncatedData(f"data section needs {need} bytes from offset {hdr.vox_offset}, file has {max(have, 0)}",
                            hdr.vox_offset, "data")
    flat = np.frombuffer(raw, dtype=hdr.endian + code, count=count, offset=hdr.vox_offset)
    # stored with i fastest; -> (nz, ny, nx)
    return flat.reshape(nz, ny, nx)


def read_header(path) -> NiftiHeader:
    return parse_header(Path(path).read_bytes())


def parse_volume(raw: bytes) -> tuple[np.ndarray, NiftiHeader]:
    hdr = parse_header(raw)
    data = _read_data(raw, hdr, IMAGE_DTYPES).astype(np.float64)
    if hdr.scl_slope != 0.0:
        with np.errstate(over="ignore", invalid="ignore"):
            data = data * hdr.scl_slope + hdr.scl_inter
    if not np.all(np.isfinite(data)):
        raise NiftiError("volume contains non-finite voxel values", hdr.vox_offset, "data")
    return data, hdr


def parse_label_volume(raw: bytes) -> tuple[np.ndarray, NiftiHeader]:
    hdr = parse_header(raw)
    return _read_data(raw, hdr, LABEL_DTYPES) > 0, hdr


def read_volume(path) -> tuple[np.ndarray, NiftiHeader]:
    """Intensity stack ``(n_slices, rows, cols)`` with scl_slope/scl_inter applied."""
    return parse_volume(Path(path).read_bytes())


def read_label_volume(path) -> tuple[np.ndarray, NiftiHeader]:
    """Boolean stack; any voxel > 0 is foreground."""
    return parse_label_volume(Path(path).read_bytes())


def _put(buf: bytearray, endian: str, name: str, *values):
    off, code = _FIELDS[name]
    struct.pack_into(endian + code, buf, off, *values)


def _encode(stack: np.ndarray, header: bytearray, endian: str, datatype: int) -> bytes:
    code, bits = _DTYPES[datatype]
    nz, ny, nx = stack.shape
    _put(header, endian, "dim", 3, nx, ny, nz, 1, 1, 1, 1)
    _put(header, endian, "datatype", datatype)
    _put(header, endian, "bitpix", bits)
    _put(header, endian, "vox_offset", float(MIN_VOX_OFFSET))
    _put(header, endian, "scl_slope", 1.0)
    _put(header, endian, "scl_inter", 0.0)
    body = np.ascontiguousarray(stack).astype(endian + code).tobytes()
    return bytes(header) + b"\x00" * (MIN_VOX_OFFSET - HEADER_SIZE) + body


def new_header(spacing=(1.0, 1.0, 1.0)) -> bytearray:
    buf = bytearray(HEADER_SIZE)
    _put(buf, "<", "sizeof_hdr", HEADER_SIZE)
    row_mm, col_mm, slice_mm = spacing
    _put(buf, "<", "pixdim", 1.0, col_mm, row_mm, slice_mm, 1.0, 0.0, 0.0, 0.0)
    struct.pack_into("<h", buf, 254, 1)  # sform_code
    struct.pack_into("<4f", buf, 280, -col_mm, 0.0, 0.0, 0.0)  # srow_x
    struct.pack_into("<4f", buf, 296, 0.0, -row_mm, 0.0, 0.0)  # srow_y
    struct.pack_into("<4f", buf, 312, 0.0, 0.0, slice_mm, 0.0)  # srow_z
    buf[344:348] = b"n+1\x00"
    return buf


def write_volume(stack, path, spacing=(1.0, 1.0, 1.0), datatype=DT_FLOAT32) -> None:
    """Write an intensity stack ``(n_slices, rows, cols)`` with a fresh header."""
    stack = np.asarray(stack)
    if stack.ndim != 3:
        raise ValueError(f"expected a (slices, rows, cols) stack, got shape {stack.shape}")
    if datatype not in _DTYPES:
        raise ValueError(f"unsupported datatype {datatype}")
    Path(path).write_bytes(_encode(stack, new_header(spacing), "<", datatype))


def write_mask_volume(masks, reference: NiftiHeader, path) -> None:
    """Write a uint8 {0, 1} stack whose geometry fields come from ``reference``."""
    masks = np.asarray(masks, dtype=bool)
    nx, ny, nz = reference.shape
    if masks.shape != (nz, ny, nx):
        raise ValueError(f"mask stack shape {masks.shape} does not match reference volume {(nz, ny, nx)}")
    Path(path).write_bytes(_encode(masks.astype(np.uint8), bytearray(reference.raw), reference.endian, DT_UINT8))
