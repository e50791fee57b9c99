"""Reading and writing volumes.

Two on-disk formats are supported:

* NIfTI-1 single file (``.nii``), uncompressed little-endian, datatypes
  uint8, int16 and float32. Only spacing and origin are taken from the
  header; any rotation in the affine is ignored with a warning.
* ``AF3D`` raw files for displacement and bias fields: a 72-byte header
  followed by little-endian voxel data, x fastest, vector components
  interleaved per voxel.

  ====== ======= =====================================
  offset type    meaning
  ====== ======= =====================================
  0      4s      magic ``b"AF3D"``
  4      3 x u32 dims
  16     3 x f64 spacing (mm)
  40     3 x f64 origin (mm)
  64     u8      datatype (NIfTI code: 2, 4, 16 or 64)
  65     u8      components per voxel (1 or 3)
  66     6 x     zero padding
  ====== ======= =====================================
"""

import struct
import warnings
from pathlib import Path

import numpy as np

from .volume import DisplacementField, Grid, LabelVolume, VectorField, Volume3


class VolumeIOError(Exception):
    """Base class for volume file errors."""


class BadMagicError(VolumeIOError):
    pass


class UnsupportedDatatypeError(VolumeIOError):
    pass


class TruncatedFileError(VolumeIOError):
    pass


class UnsupportedLayoutError(VolumeIOError):
    """Valid file that uses a feature outside the supported subset."""


DTYPES = {
    2: np.dtype("<u1"),
    4: np.dtype("<i2"),
    16: np.dtype("<f4"),
    64: np.dtype("<f8"),
}
NIFTI_DTYPES = (2, 4, 16)
DTYPE_CODES = {"uint8": 2, "int16": 4, "float32": 16, "float64": 64}

NIFTI_HEADER_SIZE = 348
NIFTI_VOX_OFFSET = 352
AF3D_MAGIC = b"AF3D"
AF3D_HEADER = struct.Struct("<4s3I3d3dBB6x")


def _dtype_code(dtype, allowed):
    if isinstance(dtype, str):
        if dtype not in DTYPE_CODES:
            raise UnsupportedDatatypeError(f"unknown datatype {dtype!r}")
        dtype = DTYPE_CODES[dtype]
    if dtype not in allowed:
        raise UnsupportedDatatypeError(f"datatype code {dtype} not supported here")
    return dtype


def _cast(values, code):
    dt = DTYPES[code]
    if dt.kind in "ui":
        info = np.iinfo(dt)
        r = np.rint(values)
        if r.min(initial=0) < info.min or r.max(initial=0) > info.max:
            raise ValueError(f"values out of range for {dt}")
        return r.astype(dt)
    return values.astype(dt)


# -- NIfTI-1 ---------------------------------------------------------------


def _nifti_header(grid: Grid, code: int) -> bytes:
    hdr = bytearray(NIFTI_VOX_OFFSET)
    struct.pack_into("<i", hdr, 0, NIFTI_HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *grid.dims, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, DTYPES[code].itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *grid.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(NIFTI_VOX_OFFSET))
    struct.pack_into("<ff", hdr, 112, 1.0, 0.0)
    hdr[123] = 2  # mm
    struct.pack_into("<hh", hdr, 252, 0, 2)
    sx, sy, sz = grid.spacing
    ox, oy, oz = grid.origin
    struct.pack_into("<4f", hdr, 280, sx, 0.0, 0.0, ox)
    struct.pack_into("<4f", hdr, 296, 0.0, sy, 0.0, oy)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, sz, oz)
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr)


def write_nifti(vol, path, dtype=None) -> None:
    if isinstance(vol, VectorField):
        raise UnsupportedLayoutError("NIfTI output holds scalar volumes only; use .af3d")
    if dtype is None:
        dtype = "int16" if isinstance(vol, LabelVolume) else "float32"
    code = _dtype_code(dtype, NIFTI_DTYPES)
    payload = _cast(vol.flat(), code).tobytes()
    with open(path, "wb") as fh:
        fh.write(_nifti_header(vol.grid, code))
        fh.write(payload)


def read_nifti(path, labels=False):
    raw = Path(path).read_bytes()
    if len(raw) < NIFTI_HEADER_SIZE:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes is shorter than a NIfTI-1 header")
    if raw[344:348] != b"n+1\x00":
        raise BadMagicError(f"{path}: bad magic {raw[344:348]!r}")
    (size,) = struct.unpack_from("<i", raw, 0)
    if size != NIFTI_HEADER_SIZE:
        raise UnsupportedLayoutError(f"{path}: not a little-endian NIfTI-1 header")
    dim = struct.unpack_from("<8h", raw, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise UnsupportedLayoutError(f"{path}: invalid dim[0]={ndim}")
    if ndim > 3 and any(d > 1 for d in dim[4 : ndim + 1]):
        raise UnsupportedLayoutError(f"{path}: multi-frame volumes are not supported")
    dims = tuple(dim[a] if a <= ndim else 1 for a in (1, 2, 3))
    (code,) = struct.unpack_from("<h", raw, 70)
    if code not in NIFTI_DTYPES:
        raise UnsupportedDatatypeError(f"{path}: datatype code {code} is not supported")
    pixdim = struct.unpack_from("<8f", raw, 76)
    spacing = tuple(abs(p) if p != 0 else 1.0 for p in pixdim[1:4])
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    slope, inter = struct.unpack_from("<ff", raw, 112)
    if slope == 0 or not np.isfinite(slope):
        slope = 1.0
    if not np.isfinite(inter):
        inter = 0.0
    qform, sform = struct.unpack_from("<hh", raw, 252)
    origin = (0.0, 0.0, 0.0)
    rotated = False
    if sform > 0:
        srow = np.array(struct.unpack_from("<12f", raw, 280)).reshape(3, 4)
        origin = tuple(float(v) for v in srow[:, 3])
        rotated = not np.allclose(srow[:, :3], np.diag(spacing), rtol=1e-5, atol=1e-6)
    elif qform > 0:
        quat = struct.unpack_from("<3f", raw, 256)
        origin = tuple(float(v) for v in struct.unpack_from("<3f", raw, 268))
        rotated = any(abs(q) > 1e-6 for q in quat) or pixdim[0] < 0
    if rotated:
        warnings.warn(f"{path}: orientation beyond spacing/origin is ignored", stacklevel=2)
    offset = int(vox_offset) if vox_offset >= NIFTI_HEADER_SIZE else NIFTI_VOX_OFFSET
    dt = DTYPES[code]
    count = int(np.prod(dims))
    need = offset + count * dt.itemsize
    if len(raw) < need:
        raise TruncatedFileError(f"{path}: expected {need} bytes, found {len(raw)}")
    values = np.frombuffer(raw, dtype=dt, count=count, offset=offset).astype(np.float64)
    values = values * slope + inter
    grid = Grid(dims, spacing, origin)
    if labels:
        return LabelVolume(grid, np.rint(values))
    return Volume3(grid, values)


# -- AF3D ------------------------------------------------------------------


def write_af3d(field, path, dtype="float64") -> None:
    code = _dtype_code(dtype, DTYPES)
    ncomp = 3 if isinstance(field, VectorField) else 1
    g = field.grid
    header = AF3D_HEADER.pack(AF3D_MAGIC, *g.dims, *g.spacing, *g.origin, code, ncomp)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(_cast(np.asarray(field.flat()), code).tobytes())


def read_af3d(path, labels=False, kind=DisplacementField):
    raw = Path(path).read_bytes()
    if len(raw) < AF3D_HEADER.size:
        if raw[:4] != AF3D_MAGIC[: len(raw[:4])]:
            raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
        raise TruncatedFileError(f"{path}: header is truncated")
    magic, nx, ny, nz, sx, sy, sz, ox, oy, oz, code, ncomp = AF3D_HEADER.unpack_from(raw)
    if magic != AF3D_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if code not in DTYPES:
        raise UnsupportedDatatypeError(f"{path}: datatype code {code} is not supported")
    if ncomp not in (1, 3):
        raise UnsupportedLayoutError(f"{path}: {ncomp} components per voxel")
    grid = Grid((nx, ny, nz), (sx, sy, sz), (ox, oy, oz))
    dt = DTYPES[code]
    count = grid.size * ncomp
    need = AF3D_HEADER.size + count * dt.itemsize
    if len(raw) < need:
        raise TruncatedFileError(f"{path}: expected {need} bytes, found {len(raw)}")
    values = np.frombuffer(raw, dtype=dt, count=count, offset=AF3D_HEADER.size)
    values = values.astype(np.float64)
    if ncomp == 3:
        return kind(grid, values.reshape(-1, 3))
    if labels:
        return LabelVolume(grid, np.rint(values))
    return Volume3(grid, values)


# -- dispatch --------------------------------------------------------------


def read_volume(path, labels=False):
    """Read a ``.nii`` or AF3D file, chosen by content.

    Returns a :class:`Volume3`, a :class:`LabelVolume` when ``labels`` is
    true, or a :class:`DisplacementField` for 3-component AF3D files.
    """
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            head = fh.read(4)
    except OSError as exc:
        raise VolumeIOError(f"{path}: {exc.strerror or exc}") from exc
    if head == AF3D_MAGIC:
        return read_af3d(path, labels=labels)
    return read_nifti(path, labels=labels)


def write_volume(vol, path, dtype=None) -> None:
    """Write by extension: ``.nii`` for NIfTI-1, anything else as AF3D."""
    path = Path(path)
    try:
        if path.suffix == ".nii":
            write_nifti(vol, path, dtype=dtype)
        else:
            write_af3d(vol, path, dtype=dtype or "float64")
    except OSError as exc:
        raise VolumeIOError(f"{path}: {exc.strerror or exc}") from exc
