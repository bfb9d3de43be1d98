"""Deterministic synthetic airway-tree CT phantoms.

Generates a binary branching tree of capsule segments (trachea plus
symmetric child generations), rasterizes it into an image/ground-truth pair:
soft-tissue background, an ellipsoidal lung region, a one-voxel airway wall
shell, air-filled lumen, and optional Gaussian noise. Everything is seeded,
so a spec with the same seed reproduces the pair bit for bit.

The default tree tapers radii by ~2^(-1/3) per generation (Murray's law) and
shortens segments by 0.8, with children leaving the parent axis at 35 degrees
in opposite azimuthal pairs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from airseg.volume import IntTriple, Mask, Triple, Volume


class PhantomBoundsError(ValueError):
    """A branch capsule leaves the voxel-center span of the grid."""


@dataclass
class PhantomSpec:
    grid_dims: IntTriple = (128, 128, 128)
    spacing: Triple = (1.0, 1.0, 1.0)
    depth: int = 4
    trachea_radius: float = 5.0
    trachea_length: float = 28.0
    radius_ratio: float = 0.79
    length_ratio: float = 0.8
    branch_angle: float = 35.0
    lumen_hu: float = -1000.0
    wall_hu: float = -200.0
    lung_hu: float = -850.0
    body_hu: float = 40.0
    noise_sigma: float = 20.0
    rng_seed: int = 0

    def __post_init__(self):
        self.grid_dims = tuple(int(d) for d in self.grid_dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        if min(self.grid_dims) < 1:
            raise ValueError(f"grid_dims must be positive, got {self.grid_dims}")
        if min(self.spacing) <= 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if not 0 <= self.depth <= 8:
            raise ValueError(f"depth must be in [0, 8], got {self.depth}")
        if self.trachea_radius < 2 * max(self.spacing):
            raise ValueError(
                f"trachea_radius {self.trachea_radius} under-resolved at "
                f"spacing {self.spacing} (needs >= 2*max spacing)"
            )
        if not 0 < self.radius_ratio < 1:
            raise ValueError(f"radius_ratio must be in (0, 1), got {self.radius_ratio}")
        if not 0 < self.length_ratio <= 1:
            raise ValueError(f"length_ratio must be in (0, 1], got {self.length_ratio}")
        if not 0 <= self.branch_angle < 90:
            raise ValueError(f"branch_angle must be in [0, 90), got {self.branch_angle}")
        if self.trachea_length <= 0:
            raise ValueError(f"trachea_length must be positive, got {self.trachea_length}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


@dataclass
class BranchSegment:
    start: Triple
    end: Triple
    radius: float
    generation: int

    def __post_init__(self):
        self.start = tuple(float(v) for v in self.start)
        self.end = tuple(float(v) for v in self.end)
        if self.radius <= 0:
            raise ValueError("segment radius must be positive")
        if self.start == self.end:
            raise ValueError("segment must have nonzero length")


def _perp_basis(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    helper = np.zeros(3)
    helper[int(np.argmin(np.abs(d)))] = 1.0
    u = np.cross(d, helper)
    u /= np.linalg.norm(u)
    return u, np.cross(d, u)


def tree_skeleton(spec: PhantomSpec) -> list[BranchSegment]:
    """Build the branch list: 2^(depth+1) - 1 segments, breadth-first order.

    The trachea points straight down (-z) from just below the grid top;
    child azimuths come in opposite pairs with the pair angle drawn from the
    seeded generator, one draw per parent in creation order.
    """
    rng = np.random.default_rng([spec.rng_seed, 0])
    extent = [(n - 1) * s for n, s in zip(spec.grid_dims, spec.spacing)]
    start = np.array([extent[0] / 2.0, extent[1] / 2.0, extent[2] - spec.trachea_radius])
    direction = np.array([0.0, 0.0, -1.0])
    angle = math.radians(spec.branch_angle)

    segments: list[BranchSegment] = []
    queue: list[tuple[np.ndarray, np.ndarray, float, int]] = [
        (start, direction, spec.trachea_length, 0)
    ]
    while queue:
        origin, d, length, gen = queue.pop(0)
        end = origin + d * length
        radius = spec.trachea_radius * spec.radius_ratio**gen
        segments.append(BranchSegment(tuple(origin), tuple(end), radius, gen))
        if gen >= spec.depth:
            continue
        phi = rng.uniform(0.0, 2.0 * math.pi)
        u, v = _perp_basis(d)
        for offset in (0.0, math.pi):
            side = math.cos(phi + offset) * u + math.sin(phi + offset) * v
            child_dir = math.cos(angle) * d + math.sin(angle) * side
            child_dir /= np.linalg.norm(child_dir)
            queue.append((end, child_dir, length * spec.length_ratio, gen + 1))
    return segments


def _check_bounds(segments, grid_dims, spacing):
    extent = [(n - 1) * s for n, s in zip(grid_dims, spacing)]
    for seg in segments:
        for axis in range(3):
            lo = min(seg.start[axis], seg.end[axis]) - seg.radius
            hi = max(seg.start[axis], seg.end[axis]) + seg.radius
            if lo < -1e-9 or hi > extent[axis] + 1e-9:
                raise PhantomBoundsError(
                    f"generation-{seg.generation} segment {seg.start} -> {seg.end} "
                    f"(radius {seg.radius:.2f}) leaves the grid on axis {axis}"
                )


def _paint_capsule(lumen: np.ndarray, seg: BranchSegment, spacing) -> None:
    a = np.array(seg.start) / np.array(spacing)
    b = np.array(seg.end) / np.array(spacing)
    r_vox = np.array([seg.radius / s for s in spacing])
    lo = np.maximum(np.floor(np.minimum(a, b) - r_vox).astype(int), 0)
    hi = np.minimum(np.ceil(np.maximum(a, b) + r_vox).astype(int) + 1, lumen.shape)
    if np.any(lo >= hi):
        return
    xs = np.arange(lo[0], hi[0])[:, None, None] * spacing[0]
    ys = np.arange(lo[1], hi[1])[None, :, None] * spacing[1]
    zs = np.arange(lo[2], hi[2])[None, None, :] * spacing[2]
    ax, ay, az = seg.start
    dx, dy, dz = (np.array(seg.end) - np.array(seg.start)).tolist()
    seg_len2 = dx * dx + dy * dy + dz * dz
    t = ((xs - ax) * dx + (ys - ay) * dy + (zs - az) * dz) / seg_len2
    t = np.clip(t, 0.0, 1.0)
    d2 = (xs - (ax + t * dx)) ** 2 + (ys - (ay + t * dy)) ** 2 + (zs - (az + t * dz)) ** 2
    inside = d2 <= seg.radius**2
    lumen[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] |= inside


# Lung ellipsoid placement as fractions of the grid extent.
_LUNG_CENTER_FRAC = (0.5, 0.5, 0.5)
_LUNG_SEMI_FRAC = (0.46, 0.46, 0.48)


def rasterize(
    segments: list[BranchSegment], grid_dims, spacing, spec: PhantomSpec
) -> tuple[Volume, Mask]:
    """Voxelize segments into an HU image and its ground-truth lumen mask.

    A voxel is lumen iff its center lies within ``radius`` of some segment
    axis (capsule test, no antialiasing). The image layers body, lung
    ellipsoid, one-voxel wall shell, and lumen HU values, then adds seeded
    Gaussian noise of sd ``noise_sigma``.
    """
    grid_dims = tuple(int(d) for d in grid_dims)
    spacing = tuple(float(s) for s in spacing)
    _check_bounds(segments, grid_dims, spacing)

    lumen = np.zeros(grid_dims, dtype=bool)
    for seg in segments:
        _paint_capsule(lumen, seg, spacing)

    wall = ndimage.binary_dilation(lumen, structure=np.ones((3, 3, 3))) & ~lumen

    extent = np.array([(n - 1) * s for n, s in zip(grid_dims, spacing)])
    center = extent * np.array(_LUNG_CENTER_FRAC)
    semi = np.maximum(extent * np.array(_LUNG_SEMI_FRAC), 1e-6)
    xs = (np.arange(grid_dims[0])[:, None, None] * spacing[0] - center[0]) / semi[0]
    ys = (np.arange(grid_dims[1])[None, :, None] * spacing[1] - center[1]) / semi[1]
    zs = (np.arange(grid_dims[2])[None, None, :] * spacing[2] - center[2]) / semi[2]
    lung = xs**2 + ys**2 + zs**2 <= 1.0

    image = np.full(grid_dims, spec.body_hu, dtype=np.float32)
    image[lung] = spec.lung_hu
    image[wall] = spec.wall_hu
    image[lumen] = spec.lumen_hu
    if spec.noise_sigma > 0:
        noise_rng = np.random.default_rng([spec.rng_seed, 1])
        image += noise_rng.normal(0.0, spec.noise_sigma, size=grid_dims).astype(np.float32)

    volume = Volume(image, spacing)
    mask = Mask(lumen.astype(np.uint8), spacing)
    return volume, mask


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, Mask]:
    """Skeleton plus rasterization; bitwise deterministic per seed."""
    segments = tree_skeleton(spec)
    return rasterize(segments, spec.grid_dims, spec.spacing, spec)
