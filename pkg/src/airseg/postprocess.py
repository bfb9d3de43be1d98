"""3D connected-component labeling and largest-component retention.

Labeling runs union-find (path compression, union by size) over a single
raster scan of the grid, merging each foreground voxel with its already
visited neighbors. The scan order is x-fastest, matching the on-disk voxel
order, and labels are assigned densely in first-encounter scan order, so
results are fully deterministic. The kernel is JIT-compiled for linear-time
behavior on full CT grids.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from airseg.volume import IntTriple, Mask, Triple

VALID_CONNECTIVITY = (6, 18, 26)


def _prior_offsets(connectivity: int) -> np.ndarray:
    """Neighbor offsets that precede the current voxel in scan order."""
    offs = []
    for dz in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if (dz, dy, dx) >= (0, 0, 0):
                    continue  # keep only the already-scanned half
                order = abs(dx) + abs(dy) + abs(dz)
                if connectivity == 6 and order > 1:
                    continue
                if connectivity == 18 and order > 2:
                    continue
                offs.append((dx, dy, dz))
    return np.asarray(offs, dtype=np.int64)


_PRIOR = {c: _prior_offsets(c) for c in VALID_CONNECTIVITY}


@njit(cache=True)
def _label_scan(fg, nx, ny, nz, offsets):  # pragma: no cover - jitted
    n = nx * ny * nz
    parent = np.arange(n, dtype=np.int64)
    size = np.ones(n, dtype=np.int64)

    for idx in range(n):
        if fg[idx] == 0:
            continue
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
            if fg[nidx] == 0:
                continue
            # find roots with path halving
            a = idx
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            b = nidx
            while parent[b] != b:
                parent[b] = parent[parent[b]]
                b = parent[b]
            if a == b:
                continue
            if size[a] < size[b]:
                a, b = b, a
            parent[b] = a
            size[a] += size[b]

    labels = np.zeros(n, dtype=np.int32)
    root_label = np.full(n, -1, dtype=np.int32)
    next_label = 0
    for idx in range(n):
        if fg[idx] == 0:
            continue
        r = idx
        while parent[r] != r:
            parent[r] = parent[parent[r]]
            r = parent[r]
        if root_label[r] < 0:
            next_label += 1
            root_label[r] = next_label
        labels[idx] = root_label[r]
    return labels, next_label


@dataclass
class LabeledVolume:
    """Dense component labels (0 = background) plus per-label voxel counts."""

    labels: np.ndarray
    spacing: Triple
    origin: Triple
    component_sizes: list[int]

    @property
    def dims(self) -> IntTriple:
        return self.labels.shape  # type: ignore[return-value]

    @property
    def num_components(self) -> int:
        return len(self.component_sizes)


def label_components(m: Mask, connectivity: int = 26) -> LabeledVolume:
    """Label connected components under a 6/18/26 voxel neighborhood."""
    if connectivity not in VALID_CONNECTIVITY:
        raise ValueError(f"connectivity must be one of {VALID_CONNECTIVITY}, got {connectivity}")
    nx, ny, nz = m.dims
    fg = np.ascontiguousarray(m.data.ravel(order="F"))
    flat, count = _label_scan(fg, nx, ny, nz, _PRIOR[connectivity])
    labels = flat.reshape((nx, ny, nz), order="F")
    sizes = np.bincount(flat, minlength=count + 1)[1:].tolist() if count else []
    return LabeledVolume(labels, m.spacing, m.origin, sizes)


def largest_component(m: Mask, connectivity: int = 26) -> Mask:
    """Keep only the largest component; ties go to the earliest in scan order.

    An empty mask maps to an empty mask.
    """
    lv = label_components(m, connectivity)
    if lv.num_components == 0:
        return Mask(np.zeros(m.dims, dtype=np.uint8), m.spacing, m.origin)
    best = int(np.argmax(lv.component_sizes)) + 1  # argmax returns first max
    return Mask((lv.labels == best).astype(np.uint8), m.spacing, m.origin)
