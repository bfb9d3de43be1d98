"""Pluggable segmentation backends.

Three kinds hide behind one ``segment`` entry point:

- ``region_grow``: classical seeded flood fill over an HU window, the
  desk-scale stand-in for a learned model;
- ``oracle_file``: replays a ground-truth mask from disk, sampling it onto
  whatever grid is requested (full volume, coarse grid, or tile);
- ``external``: ships the volume over stdin/stdout to a subprocess speaking
  the little-endian wire protocol below, so real models in any language can
  plug in.

Wire protocol, one request/response per process invocation:
  request  = b"AWSG" | u32 version=1 | u32 nx,ny,nz | f32 sx,sy,sz
             | f32 ox,oy,oz | f32 payload (nx*ny*nz, x-fastest)
  response = b"AWSP" | u32 status | (status == 0: same geometry header
             + f32 probabilities) (status != 0: u32 length + UTF-8 message)
"""
from __future__ import annotations

import struct
import subprocess
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from airseg.volume import (
    Mask,
    ProbMap,
    Volume,
    geometry_equal,
    read_mask,
    resample_to_geometry,
)

REQUEST_MAGIC = b"AWSG"
RESPONSE_MAGIC = b"AWSP"
PROTOCOL_VERSION = 1

KINDS = ("region_grow", "oracle_file", "external")

_STRUCT_26 = np.ones((3, 3, 3), dtype=bool)


class BackendError(Exception):
    """Backend-specific failure, annotated with the backend identity."""


class SeedNotFoundError(BackendError):
    """No usable seed voxel (outside window, or no candidate region)."""


class LeakageError(BackendError):
    """Region growth exceeded its voxel budget (leak into parenchyma)."""


class ExternalBackendError(BackendError):
    """External process failed or violated the wire protocol."""


@dataclass
class GrowParams:
    """HU window plus a leakage guard for seeded region growing."""

    hu_low: float = -1100.0
    hu_high: float = -900.0
    max_voxels: int = 2_000_000
    seed: tuple[int, int, int] | None = None

    def __post_init__(self):
        if self.hu_low >= self.hu_high:
            raise ValueError(f"hu_low {self.hu_low} must be below hu_high {self.hu_high}")
        if self.max_voxels <= 0:
            raise ValueError(f"max_voxels must be positive, got {self.max_voxels}")
        if self.seed is not None:
            self.seed = tuple(int(v) for v in self.seed)


@dataclass
class BackendDescriptor:
    """Which backend to run and its parameters; the model replacement point."""

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown backend kind {self.kind!r}, expected one of {KINDS}")
        if self.kind == "oracle_file" and "path" not in self.params:
            raise ValueError("oracle_file backend requires a 'path' parameter")
        if self.kind == "external":
            cmd = self.params.get("command")
            if not cmd or not isinstance(cmd, (list, tuple)):
                raise ValueError("external backend requires a 'command' argv list")
        if self.kind == "region_grow":
            self.grow_params()  # validates

    @classmethod
    def region_grow(cls, hu_low=-1100.0, hu_high=-900.0, max_voxels=2_000_000, seed=None):
        return cls("region_grow", {
            "hu_low": hu_low, "hu_high": hu_high, "max_voxels": max_voxels, "seed": seed,
        })

    @classmethod
    def oracle(cls, path):
        return cls("oracle_file", {"path": str(path)})

    @classmethod
    def external(cls, command):
        return cls("external", {"command": list(command)})

    def grow_params(self) -> GrowParams:
        p = self.params
        return GrowParams(
            hu_low=float(p.get("hu_low", -1100.0)),
            hu_high=float(p.get("hu_high", -900.0)),
            max_voxels=int(p.get("max_voxels", 2_000_000)),
            seed=p.get("seed"),
        )


def detect_seed(v: Volume, window: tuple[float, float]) -> tuple[int, int, int]:
    """Locate the trachea: the dominant central air column near the top.

    Scans the top 10% of axial slices, largest z first. The first slice
    containing an in-window 8-connected 2D region whose centroid falls in the
    central 50% of the slice (both in-plane axes) wins; the largest such
    region's rounded centroid is returned.
    """
    lo, hi = window
    nx, ny, nz = v.dims
    n_slices = max(1, -(-nz // 10))  # ceil(nz / 10)
    x_band = (0.25 * (nx - 1), 0.75 * (nx - 1))
    y_band = (0.25 * (ny - 1), 0.75 * (ny - 1))
    for z in range(nz - 1, nz - 1 - n_slices, -1):
        plane = (v.data[:, :, z] >= lo) & (v.data[:, :, z] <= hi)
        if not plane.any():
            continue
        labels, count = ndimage.label(plane, structure=np.ones((3, 3), dtype=bool))
        best = None
        for label in range(1, count + 1):
            member = labels == label
            area = int(member.sum())
            cx, cy = np.argwhere(member).mean(axis=0)
            if not (x_band[0] <= cx <= x_band[1] and y_band[0] <= cy <= y_band[1]):
                continue
            if best is None or area > best[0]:
                best = (area, cx, cy)
        if best is not None:
            return (int(round(best[1])), int(round(best[2])), z)
    raise SeedNotFoundError(
        f"no central in-window region in the top {n_slices} slices "
        f"(window [{lo}, {hi}])"
    )


def region_grow(v: Volume, p: GrowParams) -> Mask:
    """26-connected set of in-window voxels reachable from the seed.

    Raises if the seed lies outside the window or growth would exceed
    ``max_voxels`` (leakage into surrounding tissue).
    """
    seed = p.seed if p.seed is not None else detect_seed(v, (p.hu_low, p.hu_high))
    seed = tuple(int(c) for c in seed)
    for axis in range(3):
        if not 0 <= seed[axis] < v.dims[axis]:
            raise SeedNotFoundError(f"seed {seed} outside grid dims {v.dims}")
    value = float(v.data[seed])
    if not p.hu_low <= value <= p.hu_high:
        raise SeedNotFoundError(
            f"seed {seed} value {value} outside window [{p.hu_low}, {p.hu_high}]"
        )
    window = (v.data >= p.hu_low) & (v.data <= p.hu_high)
    labels, _ = ndimage.label(window, structure=_STRUCT_26)
    grown = labels == labels[seed]
    count = int(grown.sum())
    if count > p.max_voxels:
        raise LeakageError(f"growth from {seed} reached {count} voxels (max {p.max_voxels})")
    return Mask(grown.astype(np.uint8), v.spacing, v.origin)


def _grow_probmap(v: Volume, p: GrowParams) -> ProbMap:
    """Backend-level growth: explicit seed, or heuristic + face seeding.

    Without an explicit seed this unions the top-central heuristic component
    with every in-window component touching a grid face. Tiled inference
    needs the face rule: a connected tree enters a tile through its faces, so
    each tile captures exactly the airway pieces crossing it. No candidate
    seeds at all yields an all-zero map rather than an error, since tiles
    containing no airway are normal.
    """
    if p.seed is not None:
        mask = region_grow(v, p)
        return ProbMap(mask.data.astype(np.float32), v.spacing, v.origin)

    window = (v.data >= p.hu_low) & (v.data <= p.hu_high)
    if not window.any():
        return ProbMap(np.zeros(v.dims, dtype=np.float32), v.spacing, v.origin)
    labels, _ = ndimage.label(window, structure=_STRUCT_26)
    wanted = set()
    try:
        seed = detect_seed(v, (p.hu_low, p.hu_high))
        if labels[seed] > 0:
            wanted.add(int(labels[seed]))
    except SeedNotFoundError:
        pass
    for face in (
        labels[0, :, :], labels[-1, :, :],
        labels[:, 0, :], labels[:, -1, :],
        labels[:, :, 0], labels[:, :, -1],
    ):
        wanted.update(int(l) for l in np.unique(face) if l > 0)
    if not wanted:
        return ProbMap(np.zeros(v.dims, dtype=np.float32), v.spacing, v.origin)
    grown = np.isin(labels, sorted(wanted))
    count = int(grown.sum())
    if count > p.max_voxels:
        raise LeakageError(f"growth reached {count} voxels (max {p.max_voxels})")
    return ProbMap(grown.astype(np.float32), v.spacing, v.origin)


def _oracle_probmap(v: Volume, path: str) -> ProbMap:
    oracle = read_mask(path)
    if geometry_equal(oracle, v):
        sampled = oracle.data
    else:
        sampled = resample_to_geometry(oracle, v.dims, v.spacing, v.origin, "nearest").data
    return ProbMap(sampled.astype(np.float32), v.spacing, v.origin)


# ---------------------------------------------------------------------------
# Wire protocol encoding/decoding
# ---------------------------------------------------------------------------

def encode_request(v: Volume) -> bytes:
    header = REQUEST_MAGIC + struct.pack("<I", PROTOCOL_VERSION)
    header += struct.pack("<3I", *v.dims)
    header += struct.pack("<3f", *v.spacing)
    header += struct.pack("<3f", *v.origin)
    payload = np.asfortranarray(v.data.astype("<f4")).tobytes(order="F")
    return header + payload


def decode_response(blob: bytes, expect: Volume) -> ProbMap:
    if len(blob) < 8:
        raise ExternalBackendError(f"response truncated at {len(blob)} bytes")
    if blob[:4] != RESPONSE_MAGIC:
        raise ExternalBackendError(f"bad response magic {blob[:4]!r}")
    (status,) = struct.unpack_from("<I", blob, 4)
    if status != 0:
        if len(blob) >= 12:
            (msg_len,) = struct.unpack_from("<I", blob, 8)
            message = blob[12 : 12 + msg_len].decode("utf-8", "replace")
        else:
            message = "(no message)"
        raise ExternalBackendError(f"backend status {status}: {message}")
    if len(blob) < 44:
        raise ExternalBackendError("response geometry header truncated")
    nx, ny, nz = struct.unpack_from("<3I", blob, 8)
    spacing = struct.unpack_from("<3f", blob, 20)
    origin = struct.unpack_from("<3f", blob, 32)
    if (nx, ny, nz) != expect.dims:
        raise ExternalBackendError(
            f"response dims ({nx}, {ny}, {nz}) do not match request {expect.dims}"
        )
    if not np.allclose(spacing, np.float32(expect.spacing), rtol=1e-5) or not np.allclose(
        origin, np.float32(expect.origin), rtol=1e-5, atol=1e-4
    ):
        raise ExternalBackendError("response geometry does not match request")
    n = nx * ny * nz
    if len(blob) - 44 < n * 4:
        raise ExternalBackendError(
            f"response payload holds {len(blob) - 44} bytes, need {n * 4}"
        )
    values = np.frombuffer(blob, dtype="<f4", count=n, offset=44)
    if not np.isfinite(values).all():
        raise ExternalBackendError("response contains non-finite probabilities")
    if values.size and (values.min() < 0.0 or values.max() > 1.0):
        raise ExternalBackendError(
            f"response probabilities outside [0, 1]: min {values.min()}, max {values.max()}"
        )
    data = values.reshape((nx, ny, nz), order="F").copy()
    return ProbMap(data, expect.spacing, expect.origin)


def external_segment(command: list[str], v: Volume) -> ProbMap:
    """Run one request/response exchange with an external backend process.

    Out-of-range probabilities are a protocol error, never clamped. One child
    process per call; no pooling.
    """
    request = encode_request(v)
    try:
        proc = subprocess.run(
            list(command), input=request, stdout=subprocess.PIPE,
            stderr=subprocess.PIPE, check=False,
        )
    except OSError as exc:
        raise ExternalBackendError(f"cannot launch {command!r}: {exc}") from exc
    if proc.returncode != 0:
        detail = proc.stderr.decode("utf-8", "replace").strip()
        try:
            decode_response(proc.stdout, v)
        except ExternalBackendError as exc:
            raise ExternalBackendError(
                f"exit code {proc.returncode}: {exc} {f'(stderr: {detail})' if detail else ''}"
            ) from exc
        raise ExternalBackendError(f"nonzero exit code {proc.returncode}: {detail}")
    return decode_response(proc.stdout, v)


def segment(backend: BackendDescriptor, v: Volume) -> ProbMap:
    """Dispatch to the configured backend; output shares ``v``'s geometry."""
    try:
        if backend.kind == "region_grow":
            return _grow_probmap(v, backend.grow_params())
        if backend.kind == "oracle_file":
            return _oracle_probmap(v, backend.params["path"])
        return external_segment(backend.params["command"], v)
    except BackendError as exc:
        if str(exc).startswith(f"[{backend.kind}]"):
            raise
        exc.args = (f"[{backend.kind}] {exc}",) + exc.args[1:]
        raise
