"""NIfTI-1 single-file reading/writing, cropping and intensity normalization.

Voxel arrays are stored ``[1, nx, ny, nz]`` (x fastest on disk, as NIfTI
requires). Orientation fields (qform/sform) are carried through as the raw
header bytes and never interpreted.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"
GZIP_MAGIC = b"\x1f\x8b"

DT_INT16 = 4
DT_FLOAT32 = 16
_DTYPES = {DT_INT16: np.dtype("<i2"), DT_FLOAT32: np.dtype("<f4")}

MNI_SHAPE = (182, 218, 182)
WORK_SHAPE = (152, 180, 120)

# byte offsets of the fields we touch inside the 348-byte header
_OFF_DIM = 40
_OFF_DATATYPE = 70
_OFF_BITPIX = 72
_OFF_PIXDIM = 76
_OFF_VOX_OFFSET = 108
_OFF_SCL = 112
_OFF_MAGIC = 344


class NiftiFormatError(ValueError):
    pass


class UnsupportedDatatypeError(NiftiFormatError):
    pass


class TruncatedDataError(NiftiFormatError):
    pass


class CropBoundsError(ValueError):
    pass


class DegenerateRangeError(ValueError):
    pass


@dataclass
class NiftiHeader:
    sizeof_hdr: int
    dim: tuple[int, ...]
    datatype: int
    bitpix: int
    pixdim: tuple[float, ...]
    vox_offset: float
    scl_slope: float
    scl_inter: float
    magic: bytes
    endian: str = "<"
    raw: bytes = field(default=b"", repr=False)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.dim[1:1 + self.dim[0]])


@dataclass
class Volume:
    data: np.ndarray  # [1, D, H, W]
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)
    norm_stats: tuple[float, float] | None = None
    source: str | None = None
    header_raw: bytes = field(default=b"", repr=False)

    def __post_init__(self):
        if any(v <= 0 for v in self.voxel_size):
            raise ValueError(f"voxel sizes must be positive, got {self.voxel_size}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])


# -------------------------------------------------------------------- read

def _decompress(raw: bytes) -> bytes:
    if raw[:2] == GZIP_MAGIC:
        try:
            return gzip.decompress(raw)
        except (EOFError, OSError) as exc:
            raise TruncatedDataError(f"corrupt gzip stream: {exc}") from exc
    return raw


def parse_header(raw: bytes) -> NiftiHeader:
    if len(raw) < HEADER_SIZE:
        raise TruncatedDataError(f"need {HEADER_SIZE} header bytes, got {len(raw)}")
    for endian in "<>":
        if struct.unpack_from(endian + "i", raw, 0)[0] == HEADER_SIZE:
            break
    else:
        size = struct.unpack_from("<i", raw, 0)[0]
        raise NiftiFormatError(f"sizeof_hdr is {size}, expected {HEADER_SIZE}")
    magic = raw[_OFF_MAGIC:_OFF_MAGIC + 4]
    if magic == MAGIC_PAIR:
        raise NiftiFormatError("separate .hdr/.img NIfTI pairs are not supported")
    if magic != MAGIC_SINGLE:
        raise NiftiFormatError(f"bad magic {magic!r}, expected {MAGIC_SINGLE!r}")
    dim = struct.unpack_from(endian + "8h", raw, _OFF_DIM)
    if not 1 <= dim[0] <= 7:
        raise NiftiFormatError(f"dim[0] = {dim[0]} outside [1, 7]")
    datatype, bitpix = struct.unpack_from(endian + "2h", raw, _OFF_DATATYPE)
    pixdim = struct.unpack_from(endian + "8f", raw, _OFF_PIXDIM)
    vox_offset, slope, inter = struct.unpack_from(endian + "3f", raw, _OFF_VOX_OFFSET)
    return NiftiHeader(HEADER_SIZE, dim, datatype, bitpix, pixdim, vox_offset,
                       slope, inter, magic, endian, bytes(raw[:HEADER_SIZE]))


def read_nifti(raw: bytes, source: str | None = None) -> tuple[NiftiHeader, Volume]:
    """Decode a ``.nii`` or ``.nii.gz`` byte string into a float32 volume."""
    raw = _decompress(raw)
    hdr = parse_header(raw)
    if hdr.datatype not in _DTYPES:
        raise UnsupportedDatatypeError(
            f"datatype code {hdr.datatype} unsupported (supported: 4 int16, 16 float32)")
    shape = hdr.shape
    if len(shape) > 3 and any(n != 1 for n in shape[3:]):
        raise NiftiFormatError(f"expected a single 3D volume, got dims {shape}")
    shape = (tuple(shape) + (1, 1))[:3]
    dtype = _DTYPES[hdr.datatype].newbyteorder(hdr.endian)
    offset = int(hdr.vox_offset)
    n = int(np.prod(shape))
    need = offset + n * dtype.itemsize
    if len(raw) < need:
        raise TruncatedDataError(
            f"data section truncated: need {need} bytes, file has {len(raw)}")
    data = np.frombuffer(raw, dtype=dtype, count=n, offset=offset)
    data = data.reshape(shape, order="F").astype(np.float32)
    if hdr.scl_slope != 0 and not (hdr.scl_slope == 1 and hdr.scl_inter == 0):
        data = (data * np.float32(hdr.scl_slope) + np.float32(hdr.scl_inter)).astype(np.float32)
    voxel = tuple(float(v) for v in hdr.pixdim[1:4])
    voxel = tuple(v if v > 0 else 1.0 for v in voxel)
    vol = Volume(np.ascontiguousarray(data)[None], voxel, None, source, hdr.raw)
    return hdr, vol


def load(path: str | Path) -> Volume:
    path = Path(path)
    return read_nifti(path.read_bytes(), str(path))[1]


# ------------------------------------------------------------------- write

def _blank_header() -> bytearray:
    buf = bytearray(HEADER_SIZE)
    struct.pack_into("<i", buf, 0, HEADER_SIZE)
    struct.pack_into("<h", buf, 252, 0)  # qform_code
    struct.pack_into("<h", buf, 254, 0)  # sform_code
    buf[_OFF_MAGIC:_OFF_MAGIC + 4] = MAGIC_SINGLE
    return buf


def write_nifti(volume: Volume, compress: bool = False) -> bytes:
    """Encode as little-endian float32 NIfTI-1 with the payload at byte 352."""
    data = volume.data
    if data.ndim == 4 and data.shape[0] == 1:
        data = data[0]
    if data.ndim != 3:
        raise ValueError(f"write_nifti needs a single-channel 3D volume, got {volume.data.shape}")
    if data.size == 0:
        raise ValueError("cannot write an empty volume")
    raw = volume.header_raw
    if len(raw) == HEADER_SIZE and struct.unpack_from("<i", raw, 0)[0] == HEADER_SIZE:
        buf = bytearray(raw)
    else:
        # foreign or big-endian source: orientation fields are not carried over
        buf = _blank_header()
    buf[_OFF_MAGIC:_OFF_MAGIC + 4] = MAGIC_SINGLE
    struct.pack_into("<8h", buf, _OFF_DIM, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<2h", buf, _OFF_DATATYPE, DT_FLOAT32, 32)
    pixdim = list(struct.unpack_from("<8f", buf, _OFF_PIXDIM))
    pixdim[0] = pixdim[0] if pixdim[0] in (-1.0, 1.0) else 1.0
    pixdim[1:4] = volume.voxel_size
    struct.pack_into("<8f", buf, _OFF_PIXDIM, *pixdim)
    struct.pack_into("<3f", buf, _OFF_VOX_OFFSET, float(VOX_OFFSET), 1.0, 0.0)
    payload = np.asarray(data, dtype="<f4").tobytes(order="F")
    out = bytes(buf) + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + payload
    return gzip.compress(out, mtime=0) if compress else out


def save(volume: Volume, path: str | Path) -> None:
    path = Path(path)
    path.write_bytes(write_nifti(volume, compress=path.name.endswith(".gz")))


# ---------------------------------------------------------- preprocessing

def default_crop_offset(source: tuple[int, ...], target: tuple[int, ...] = WORK_SHAPE):
    return tuple((s - t) // 2 for s, t in zip(source, target))


def crop(volume: Volume, target: tuple[int, int, int] = WORK_SHAPE,
         offset: tuple[int, int, int] | None = None) -> Volume:
    """Copy the sub-block ``[offset, offset + target)``; centered by default."""
    src = volume.shape
    if offset is None:
        offset = default_crop_offset(src, target)
    for axis, o, t, s in zip("xyz", offset, target, src):
        if o < 0 or t < 1 or o + t > s:
            raise CropBoundsError(
                f"crop along {axis}: offset {o} + size {t} exceeds source size {s}")
    sl = tuple(slice(o, o + t) for o, t in zip(offset, target))
    return replace(volume, data=volume.data[(slice(None),) + sl].copy())


def normalize_intensity(volume: Volume, percentile: float = 99.5) -> Volume:
    """Clip to ``[0, hi]`` (hi = percentile of nonzero voxels) and map to [-1, 1].

    Raises :class:`DegenerateRangeError` when the volume is constant (all
    zeros included) or ``hi <= 0``.
    """
    data = volume.data
    nonzero = data[data != 0]
    if nonzero.size == 0:
        raise DegenerateRangeError("volume is all zeros; intensity range is degenerate")
    if data.min() == data.max():
        raise DegenerateRangeError(f"volume is constant ({float(data.min())}); no contrast")
    lo = 0.0
    hi = float(np.percentile(nonzero, percentile))
    if hi <= lo:
        raise DegenerateRangeError(
            f"intensity percentile {percentile} is {hi}, not above the floor {lo}")
    scaled = (np.clip(data, lo, hi) - lo) / (hi - lo) * 2.0 - 1.0
    return replace(volume, data=scaled.astype(np.float32), norm_stats=(lo, hi))


def denormalize(volume: Volume, stats: tuple[float, float] | None = None) -> Volume:
    stats = stats if stats is not None else volume.norm_stats
    if stats is None:
        raise ValueError("volume carries no normalization statistics")
    lo, hi = stats
    data = (volume.data.astype(np.float64) + 1.0) / 2.0 * (hi - lo) + lo
    return replace(volume, data=data.astype(np.float32), norm_stats=None)


def describe(volume: Volume) -> dict:
    d = volume.data
    return {"shape": volume.shape, "voxel_size": volume.voxel_size,
            "min": float(d.min()), "max": float(d.max()), "mean": float(d.mean()),
            "std": float(d.std()), "nonzero": int(np.count_nonzero(d))}
