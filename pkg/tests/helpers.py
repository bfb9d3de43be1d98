"""Shared test utilities: hand-built file fixtures and independent oracles."""
from __future__ import annotations

import gzip
import struct
from collections import deque

import numpy as np

NIFTI_HDR = 348


def build_nifti_bytes(
    data: np.ndarray,
    spacing=(1.0, 1.0, 1.0),
    origin=(0.0, 0.0, 0.0),
    scl_slope=1.0,
    scl_inter=0.0,
    vox_offset=None,
    datatype=None,
    magic=b"n+1\x00",
    sform=True,
    gzipped=False,
) -> bytes:
    """Create NIfTI-1 bytes from scratch, independent of the library writer."""
    codes = {np.dtype(np.uint8): (2, 8), np.dtype(np.int16): (4, 16), np.dtype(np.float32): (16, 32)}
    code, bitpix = codes[data.dtype] if datatype is None else (datatype, 0)
    if vox_offset is None:
        vox_offset = NIFTI_HDR
    hdr = bytearray(NIFTI_HDR)
    struct.pack_into("<i", hdr, 0, NIFTI_HDR)
    struct.pack_into("<8h", hdr, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 0, 0, 0, 0)
    struct.pack_into("<f", hdr, 108, float(vox_offset))
    struct.pack_into("<2f", hdr, 112, scl_slope, scl_inter)
    if sform:
        struct.pack_into("<h", hdr, 254, 1)
        struct.pack_into("<4f", hdr, 280, spacing[0], 0, 0, origin[0])
        struct.pack_into("<4f", hdr, 296, 0, spacing[1], 0, origin[1])
        struct.pack_into("<4f", hdr, 312, 0, 0, spacing[2], origin[2])
    hdr[344:348] = magic
    blob = bytes(hdr) + b"\x00" * (vox_offset - NIFTI_HDR)
    blob += np.asfortranarray(data).tobytes(order="F")
    return gzip.compress(blob, mtime=0) if gzipped else blob


def neighbor_offsets(connectivity: int):
    """Full 3D neighbor offset list for 6/18/26 connectivity."""
    offs = []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                if dx == dy == dz == 0:
                    continue
                order = abs(dx) + abs(dy) + abs(dz)
                if connectivity == 6 and order > 1:
                    continue
                if connectivity == 18 and order > 2:
                    continue
                offs.append((dx, dy, dz))
    return offs


def bfs_label(mask: np.ndarray, connectivity: int) -> np.ndarray:
    """Reference connected-component labeling by breadth-first flood fill.

    Seeds are visited in raster (x-fastest) order, so the dense label ids
    match a first-encounter scan-order assignment.
    """
    nx, ny, nz = mask.shape
    offs = neighbor_offsets(connectivity)
    labels = np.zeros(mask.shape, dtype=np.int32)
    next_label = 0
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                if not mask[i, j, k] or labels[i, j, k]:
                    continue
                next_label += 1
                queue = deque([(i, j, k)])
                labels[i, j, k] = next_label
                while queue:
                    x, y, z = queue.popleft()
                    for dx, dy, dz in offs:
                        u, v, w = x + dx, y + dy, z + dz
                        if 0 <= u < nx and 0 <= v < ny and 0 <= w < nz:
                            if mask[u, v, w] and not labels[u, v, w]:
                                labels[u, v, w] = next_label
                                queue.append((u, v, w))
    return labels


def bfs_region_grow(values: np.ndarray, seed, lo: float, hi: float) -> np.ndarray:
    """Reference seeded flood fill over a value window, 26-connected."""
    nx, ny, nz = values.shape
    offs = neighbor_offsets(26)
    out = np.zeros(values.shape, dtype=np.uint8)
    if not (lo <= values[seed] <= hi):
        raise ValueError("seed outside window")
    queue = deque([tuple(seed)])
    out[tuple(seed)] = 1
    while queue:
        x, y, z = queue.popleft()
        for dx, dy, dz in offs:
            u, v, w = x + dx, y + dy, z + dz
            if 0 <= u < nx and 0 <= v < ny and 0 <= w < nz and not out[u, v, w]:
                if lo <= values[u, v, w] <= hi:
                    out[u, v, w] = 1
                    queue.append((u, v, w))
    return out


def dice_of(pred: np.ndarray, gt: np.ndarray) -> float:
    p = pred.astype(bool)
    g = gt.astype(bool)
    inter = np.count_nonzero(p & g)
    denom = np.count_nonzero(p) + np.count_nonzero(g)
    return 2.0 * inter / denom if denom else 1.0


def _bfs_label_kernel_src():
    """Queue-based BFS labeling, JIT-compiled for bulk oracle runs.

    Same flood-fill algorithm as :func:`bfs_label` (explicit FIFO queue,
    first-encounter raster seeds); shares no machinery with the union-find
    implementation under test.
    """
    from numba import njit

    @njit(cache=True)
    def kernel(fg, nx, ny, nz, offsets):  # pragma: no cover - jitted
        n = nx * ny * nz
        labels = np.zeros(n, dtype=np.int32)
        queue = np.empty(n, dtype=np.int64)
        next_label = 0
        for start in range(n):
            if fg[start] == 0 or labels[start] != 0:
                continue
            next_label += 1
            labels[start] = next_label
            queue[0] = start
            head, tail = 0, 1
            while head < tail:
                idx = queue[head]
                head += 1
                i = idx % nx
                j = (idx // nx) % ny
                k = idx // (nx * ny)
                for o in range(offsets.shape[0]):
                    ni = i + offsets[o, 0]
                    nj = j + offsets[o, 1]
                    nk = k + offsets[o, 2]
                    if ni < 0 or ni >= nx or nj < 0 or nj >= ny or nk < 0 or nk >= nz:
                        continue
                    nidx = ni + nx * (nj + ny * nk)
                    if fg[nidx] != 0 and labels[nidx] == 0:
                        labels[nidx] = next_label
                        queue[tail] = nidx
                        tail += 1
        return labels

    return kernel


_bfs_kernel = None


def bfs_label_fast(mask: np.ndarray, connectivity: int) -> np.ndarray:
    """Compiled variant of :func:`bfs_label`; identical output."""
    global _bfs_kernel
    if _bfs_kernel is None:
        _bfs_kernel = _bfs_label_kernel_src()
    offs = np.asarray(neighbor_offsets(connectivity), dtype=np.int64)
    nx, ny, nz = mask.shape
    fg = np.ascontiguousarray(mask.astype(np.uint8).ravel(order="F"))
    flat = _bfs_kernel(fg, nx, ny, nz, offs)
    return flat.reshape((nx, ny, nz), order="F")
