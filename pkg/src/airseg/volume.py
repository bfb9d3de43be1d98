"""3D scalar grids with voxel spacing, file I/O, and geometric transforms.

Conventions used throughout the package:

- Arrays are indexed ``[i, j, k]`` for the (x, y, z) axes and have shape
  ``(nx, ny, nz)``.
- The world coordinate of voxel ``(i, j, k)`` is
  ``origin + (i * sx, j * sy, k * sz)``, i.e. indices address voxel centers.
- On disk the voxel order is x-fastest, which corresponds to a Fortran-order
  ravel of the in-memory array.

Only axis-aligned geometry is supported: spacing is a positive diagonal and
origin a translation. NIfTI files carrying rotated orientation matrices are
rejected rather than silently reinterpreted.
"""
from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

Triple = tuple[float, float, float]
IntTriple = tuple[int, int, int]

# NIfTI-1 datatype codes for the dtypes this library supports.
_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32}
_NIFTI_CODES = {np.dtype(np.uint8): 2, np.dtype(np.int16): 4, np.dtype(np.float32): 16}
_DTYPE_NAMES = {"uint8": np.uint8, "int16": np.int16, "float32": np.float32}

_HDR_SIZE = 348
_GZIP_MAGIC = b"\x1f\x8b"


class VolumeIOError(Exception):
    """File could not be read or written."""


class UnsupportedFormatError(VolumeIOError):
    """File is not a format this library understands."""


class UnsupportedDtypeError(VolumeIOError):
    """Voxel datatype outside the supported set (uint8, int16, float32)."""


class OrientationError(UnsupportedFormatError):
    """File carries a non-axis-aligned orientation."""


class DataLengthError(VolumeIOError):
    """Header-declared size disagrees with the available voxel payload."""


def _as_float_triple(value) -> Triple:
    t = tuple(float(v) for v in value)
    if len(t) != 3:
        raise ValueError(f"expected 3 components, got {len(t)}")
    return t  # type: ignore[return-value]


@dataclass
class Grid3D:
    """Common base: a 3D array plus axis-aligned geometry.

    Instances are treated as immutable after construction except through
    :func:`paste`, which requires exclusive access to ``dst``.
    """

    data: np.ndarray
    spacing: Triple
    origin: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = self._coerce(np.asarray(self.data))
        if self.data.ndim != 3:
            raise ValueError(f"data must be 3D, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ValueError(f"all dims must be >= 1, got {self.data.shape}")
        self.spacing = _as_float_triple(self.spacing)
        self.origin = _as_float_triple(self.origin)
        if min(self.spacing) <= 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    def _coerce(self, data: np.ndarray) -> np.ndarray:
        return data

    @property
    def dims(self) -> IntTriple:
        return self.data.shape  # type: ignore[return-value]

    @property
    def num_voxels(self) -> int:
        return int(self.data.size)


class Volume(Grid3D):
    """CT image grid; values are Hounsfield units."""

    def _coerce(self, data: np.ndarray) -> np.ndarray:
        if data.dtype == np.bool_:
            data = data.astype(np.uint8)
        if data.dtype not in (np.uint8, np.int16, np.float32):
            if np.issubdtype(data.dtype, np.floating):
                data = data.astype(np.float32)
            elif np.issubdtype(data.dtype, np.integer):
                info = np.iinfo(np.int16)
                if data.size and (data.min() < info.min or data.max() > info.max):
                    data = data.astype(np.float32)
                else:
                    data = data.astype(np.int16)
            else:
                raise ValueError(f"unsupported volume dtype {data.dtype}")
        if np.issubdtype(data.dtype, np.floating) and not np.isfinite(data).all():
            raise ValueError("volume contains non-finite values")
        return data


class Mask(Grid3D):
    """Binary labels on the same lattice as a paired Volume."""

    def _coerce(self, data: np.ndarray) -> np.ndarray:
        if data.dtype != np.uint8:
            arr = np.asarray(data)
            if not np.isin(arr, (0, 1)).all():
                raise ValueError("mask values must be strictly 0 or 1")
            data = arr.astype(np.uint8)
        elif data.size and data.max() > 1:
            raise ValueError("mask values must be strictly 0 or 1")
        return data

    @property
    def num_foreground(self) -> int:
        return int(np.count_nonzero(self.data))


class ProbMap(Grid3D):
    """Soft segmentation output; each voxel in [0, 1]."""

    def _coerce(self, data: np.ndarray) -> np.ndarray:
        data = data.astype(np.float32) if data.dtype != np.float32 else data
        if not np.isfinite(data).all():
            raise ValueError("probability map contains non-finite values")
        if data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise ValueError("probabilities must lie in [0, 1]")
        return data


@dataclass(frozen=True)
class BBox:
    """Axis-aligned voxel box: ``lo`` inclusive, ``hi`` exclusive."""

    lo: IntTriple
    hi: IntTriple

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(int(v) for v in self.lo))
        object.__setattr__(self, "hi", tuple(int(v) for v in self.hi))
        if any(l > h for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"bbox lo {self.lo} exceeds hi {self.hi}")

    @property
    def dims(self) -> IntTriple:
        return tuple(h - l for l, h in zip(self.lo, self.hi))  # type: ignore[return-value]


def geometry_equal(a: Grid3D, b: Grid3D, tol: float = 1e-5) -> bool:
    """True when two grids share dims and (within tolerance) spacing/origin."""
    if a.dims != b.dims:
        return False
    sp = all(abs(x - y) <= tol * max(abs(x), abs(y), 1.0) for x, y in zip(a.spacing, b.spacing))
    org = all(abs(x - y) <= tol * max(abs(x), abs(y), 1.0) for x, y in zip(a.origin, b.origin))
    return sp and org


def voxel_to_world(g: Grid3D, index) -> Triple:
    """World coordinate of a voxel center."""
    return tuple(o + i * s for o, i, s in zip(g.origin, index, g.spacing))  # type: ignore[return-value]


def crop(g: Grid3D, box: BBox) -> Grid3D:
    """Copy the sub-grid in ``box``; origin shifts by ``lo * spacing``."""
    for axis in range(3):
        if box.lo[axis] < 0 or box.hi[axis] > g.dims[axis]:
            raise ValueError(f"crop box {box.lo}..{box.hi} outside grid dims {g.dims}")
    (x0, y0, z0), (x1, y1, z1) = box.lo, box.hi
    data = g.data[x0:x1, y0:y1, z0:z1].copy()
    origin = tuple(o + l * s for o, l, s in zip(g.origin, box.lo, g.spacing))
    return type(g)(data, g.spacing, origin)


def paste(dst: Grid3D, src: Grid3D, offset) -> None:
    """Write ``src`` into ``dst`` at voxel ``offset`` (in place).

    Caller must hold exclusive access to ``dst``; concurrent pastes are only
    safe on disjoint regions.
    """
    if type(dst) is not type(src):
        raise ValueError(f"cannot paste {type(src).__name__} into {type(dst).__name__}")
    off = tuple(int(v) for v in offset)
    for axis in range(3):
        if off[axis] < 0 or off[axis] + src.dims[axis] > dst.dims[axis]:
            raise ValueError(
                f"paste at offset {off} with src dims {src.dims} "
                f"overflows dst dims {dst.dims}"
            )
    (x0, y0, z0) = off
    (nx, ny, nz) = src.dims
    dst.data[x0 : x0 + nx, y0 : y0 + ny, z0 : z0 + nz] = src.data


def _axis_fractional_index(n_out: int, spacing_out: float, origin_out: float,
                           n_src: int, spacing_src: float, origin_src: float) -> np.ndarray:
    u = (origin_out - origin_src + np.arange(n_out, dtype=np.float64) * spacing_out) / spacing_src
    return np.clip(u, 0.0, float(n_src - 1))


def resample_to_geometry(g: Grid3D, dims, spacing, origin, mode: str = "linear") -> Grid3D:
    """Sample ``g`` onto an arbitrary axis-aligned target grid.

    ``linear`` interpolates trilinearly with clamp-to-edge sampling and yields
    float32 data; ``nearest`` copies the nearest source voxel and preserves
    the source dtype (so binary masks stay binary).
    """
    dims = tuple(int(d) for d in dims)
    spacing = _as_float_triple(spacing)
    origin = _as_float_triple(origin)
    if min(spacing) <= 0:
        raise ValueError(f"target spacing must be positive, got {spacing}")
    if min(dims) < 1:
        raise ValueError(f"target dims must be >= 1, got {dims}")
    if dims == g.dims and spacing == g.spacing and origin == g.origin:
        return type(g)(g.data.copy(), g.spacing, g.origin)

    u = [
        _axis_fractional_index(dims[a], spacing[a], origin[a], g.dims[a], g.spacing[a], g.origin[a])
        for a in range(3)
    ]
    if mode == "nearest":
        idx = [np.floor(u[a] + 0.5).astype(np.intp).clip(0, g.dims[a] - 1) for a in range(3)]
        out = g.data[np.ix_(*idx)].copy()
    elif mode == "linear":
        i0 = [np.floor(u[a]).astype(np.intp) for a in range(3)]
        i1 = [np.minimum(i0[a] + 1, g.dims[a] - 1) for a in range(3)]
        frac = [u[a] - i0[a] for a in range(3)]
        w = [(1.0 - frac[a], frac[a]) for a in range(3)]
        idx = [(i0[a], i1[a]) for a in range(3)]
        src = g.data.astype(np.float64, copy=False)
        acc = np.zeros(dims, dtype=np.float64)
        for cx in (0, 1):
            for cy in (0, 1):
                for cz in (0, 1):
                    weight = (
                        w[0][cx][:, None, None]
                        * w[1][cy][None, :, None]
                        * w[2][cz][None, None, :]
                    )
                    acc += weight * src[np.ix_(idx[0][cx], idx[1][cy], idx[2][cz])]
        out = acc.astype(np.float32)
    else:
        raise ValueError(f"unknown resample mode {mode!r}")
    return type(g)(out, spacing, origin)


def resample(g: Grid3D, target_spacing, mode: str = "linear") -> Grid3D:
    """Resample to a new spacing, preserving world extent to within a voxel.

    Output dims are ``max(1, round_half_up(dims * spacing / target))``; the
    origin (voxel-0 center) is unchanged. Masks must use nearest mode.
    """
    target = _as_float_triple(target_spacing)
    if min(target) <= 0:
        raise ValueError(f"target spacing must be positive, got {target}")
    if isinstance(g, Mask) and mode != "nearest":
        raise ValueError("masks are resampled with nearest mode only")
    dims = tuple(
        max(1, int(math.floor(n * s / t + 0.5)))
        for n, s, t in zip(g.dims, g.spacing, target)
    )
    return resample_to_geometry(g, dims, target, g.origin, mode)


# --------------------------------------------------------------------------
# NIfTI-1 single-file codec (348-byte header, little-endian, axis-aligned)
# --------------------------------------------------------------------------

def _pack_nifti_header(g: Grid3D, code: int, bitpix: int) -> bytes:
    hdr = bytearray(_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _HDR_SIZE)
    hdr[38] = ord("r")
    struct.pack_into("<8h", hdr, 40, 3, *g.dims, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, *g.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(_HDR_SIZE + 4))  # vox_offset
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)  # scl_inter
    hdr[123] = 2  # spatial units: millimeters
    descrip = b"airseg"
    hdr[148 : 148 + len(descrip)] = descrip
    struct.pack_into("<h", hdr, 252, 0)  # qform_code
    struct.pack_into("<h", hdr, 254, 1)  # sform_code
    sx, sy, sz = g.spacing
    ox, oy, oz = g.origin
    struct.pack_into("<4f", hdr, 280, sx, 0.0, 0.0, ox)
    struct.pack_into("<4f", hdr, 296, 0.0, sy, 0.0, oy)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, sz, oz)
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr) + b"\x00\x00\x00\x00"  # empty extension flag


def _diagonal_from_srow(rows: list[tuple[float, ...]]) -> tuple[Triple, Triple]:
    diag = []
    for axis, row in enumerate(rows):
        scale = abs(row[axis])
        limit = 1e-4 * max(scale, 1.0)
        off = [abs(row[a]) for a in range(3) if a != axis]
        if max(off) > limit:
            raise OrientationError("non-axis-aligned orientation matrix is not supported")
        if row[axis] <= 0:
            raise OrientationError("flipped or degenerate axes are not supported")
        diag.append(row[axis])
    origin = tuple(row[3] for row in rows)
    return tuple(diag), origin  # type: ignore[return-value]


def _parse_nifti(raw: bytes, path: str) -> Volume:
    if len(raw) < _HDR_SIZE:
        raise UnsupportedFormatError(f"{path}: too short to hold a NIfTI-1 header")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != _HDR_SIZE:
        (swapped,) = struct.unpack_from(">i", raw, 0)
        if swapped == _HDR_SIZE:
            raise UnsupportedFormatError(f"{path}: big-endian NIfTI is not supported")
        raise UnsupportedFormatError(f"{path}: not a NIfTI-1 file")
    magic = raw[344:348]
    if magic == b"ni1\x00":
        raise UnsupportedFormatError(f"{path}: detached .hdr/.img pairs are not supported")
    if magic != b"n+1\x00":
        raise UnsupportedFormatError(f"{path}: bad NIfTI magic {magic!r}")

    dim = struct.unpack_from("<8h", raw, 40)
    if dim[0] != 3:
        raise UnsupportedFormatError(f"{path}: only 3D volumes supported, dim[0]={dim[0]}")
    nx, ny, nz = dim[1], dim[2], dim[3]
    if min(nx, ny, nz) < 1:
        raise UnsupportedFormatError(f"{path}: invalid dims ({nx}, {ny}, {nz})")

    (datatype,) = struct.unpack_from("<h", raw, 70)
    if datatype not in _NIFTI_DTYPES:
        raise UnsupportedDtypeError(f"{path}: unsupported NIfTI datatype code {datatype}")
    dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder("<")

    pixdim = struct.unpack_from("<8f", raw, 76)
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    scl_slope, scl_inter = struct.unpack_from("<2f", raw, 112)
    (qform_code,) = struct.unpack_from("<h", raw, 252)
    (sform_code,) = struct.unpack_from("<h", raw, 254)

    if sform_code > 0:
        rows = [
            struct.unpack_from("<4f", raw, 280),
            struct.unpack_from("<4f", raw, 296),
            struct.unpack_from("<4f", raw, 312),
        ]
        spacing, origin = _diagonal_from_srow(rows)
    else:
        if qform_code > 0:
            b, c, d = struct.unpack_from("<3f", raw, 256)
            if max(abs(b), abs(c), abs(d)) > 1e-4:
                raise OrientationError(f"{path}: rotated qform orientation is not supported")
            origin = struct.unpack_from("<3f", raw, 268)
        else:
            origin = (0.0, 0.0, 0.0)
        spacing = tuple(float(p) for p in pixdim[1:4])
    if min(spacing) <= 0:
        raise UnsupportedFormatError(f"{path}: non-positive voxel spacing {spacing}")

    offset = int(vox_offset)
    if offset < _HDR_SIZE:
        raise UnsupportedFormatError(f"{path}: vox_offset {offset} inside the header")
    n = nx * ny * nz
    need = n * dtype.itemsize
    if len(raw) - offset < need:
        raise DataLengthError(
            f"{path}: header declares {need} payload bytes, file holds {len(raw) - offset}"
        )
    data = np.frombuffer(raw, dtype=dtype, count=n, offset=offset)
    data = data.reshape((nx, ny, nz), order="F")

    slope = float(scl_slope)
    inter = float(scl_inter)
    if not math.isfinite(slope) or slope == 0.0:
        slope = 1.0
    if not math.isfinite(inter):
        inter = 0.0
    if slope != 1.0 or inter != 0.0:
        data = (data.astype(np.float32) * np.float32(slope)) + np.float32(inter)
    else:
        data = data.copy()  # detach from the read buffer
    return Volume(data, spacing, origin)


# --------------------------------------------------------------------------
# Raw payload + text sidecar format
# --------------------------------------------------------------------------
# <stem>.raw holds the little-endian x-fastest voxel payload; <stem>.meta is a
# "key = value" text file with exactly these keys: dims, spacing, origin, dtype.

def _write_raw(g: Grid3D, path: Path) -> None:
    meta_path = path.with_suffix(".meta")
    dtype = g.data.dtype
    if dtype not in _NIFTI_CODES:
        raise UnsupportedDtypeError(f"cannot write dtype {dtype} to raw")
    payload = np.asfortranarray(g.data).tobytes(order="F")
    try:
        path.write_bytes(payload)
        meta_path.write_text(
            "dims = {} {} {}\n".format(*g.dims)
            + "spacing = {!r} {!r} {!r}\n".format(*g.spacing)
            + "origin = {!r} {!r} {!r}\n".format(*g.origin)
            + f"dtype = {dtype.name}\n"
        )
    except OSError as exc:
        raise VolumeIOError(f"cannot write {path}: {exc}") from exc


def _read_raw(path: Path) -> Volume:
    meta_path = path.with_suffix(".meta")
    try:
        text = meta_path.read_text()
        payload = path.read_bytes()
    except OSError as exc:
        raise VolumeIOError(f"cannot read {path}: {exc}") from exc
    fields: dict[str, str] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    missing = {"dims", "spacing", "origin", "dtype"} - fields.keys()
    if missing:
        raise UnsupportedFormatError(f"{meta_path}: missing keys {sorted(missing)}")
    if fields["dtype"] not in _DTYPE_NAMES:
        raise UnsupportedDtypeError(f"{meta_path}: unsupported dtype {fields['dtype']!r}")
    dims = tuple(int(v) for v in fields["dims"].split())
    spacing = tuple(float(v) for v in fields["spacing"].split())
    origin = tuple(float(v) for v in fields["origin"].split())
    dtype = np.dtype(_DTYPE_NAMES[fields["dtype"]]).newbyteorder("<")
    need = int(np.prod(dims)) * dtype.itemsize
    if len(payload) < need:
        raise DataLengthError(f"{path}: need {need} bytes, file holds {len(payload)}")
    data = np.frombuffer(payload, dtype=dtype, count=int(np.prod(dims)))
    return Volume(data.reshape(dims, order="F").copy(), spacing, origin)


# --------------------------------------------------------------------------
# Public I/O entry points
# --------------------------------------------------------------------------

def read_volume(path) -> Volume:
    """Read a NIfTI-1 file (optionally gzipped) or a .raw/.meta pair.

    Intensities are converted to Hounsfield units via the header's
    scale/intercept (slope 0 is treated as 1).
    """
    p = Path(path)
    if p.suffix == ".raw":
        return _read_raw(p)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise VolumeIOError(f"cannot read {p}: {exc}") from exc
    if raw[:2] == _GZIP_MAGIC:
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise VolumeIOError(f"{p}: corrupt gzip container: {exc}") from exc
    return _parse_nifti(raw, str(p))


def read_mask(path) -> Mask:
    """Read a binary label file; rejects non-binary payloads."""
    v = read_volume(path)
    if not np.isin(v.data, (0, 1)).all():
        raise ValueError(f"{path}: voxel values are not binary")
    return Mask(v.data.astype(np.uint8), v.spacing, v.origin)


def write_volume(g: Grid3D, path) -> None:
    """Write a grid so that :func:`read_volume` reproduces it exactly.

    ``.raw`` paths use the raw+sidecar format; a ``.gz`` suffix selects a
    gzip container; anything else is written as single-file NIfTI-1.
    """
    p = Path(path)
    if p.suffix == ".raw":
        _write_raw(g, p)
        return
    dtype = g.data.dtype
    if dtype not in _NIFTI_CODES:
        raise UnsupportedDtypeError(f"cannot write dtype {dtype}")
    code = _NIFTI_CODES[dtype]
    payload = np.asfortranarray(g.data).tobytes(order="F")
    blob = _pack_nifti_header(g, code, dtype.itemsize * 8) + payload
    if p.suffix == ".gz":
        blob = gzip.compress(blob, mtime=0)
    try:
        p.write_bytes(blob)
    except OSError as exc:
        raise VolumeIOError(f"cannot write {p}: {exc}") from exc
