"""The two-stage coarse-to-fine segmentation pipeline.

A fast low-resolution pass localizes the airway, its mask is grown into an
extended region of interest, and a sliding-window pass at native resolution
segments inside that ROI with Gaussian-weighted overlap blending. The final
mask is thresholded after blending, pasted back onto the full grid, and
optionally reduced to its largest connected component.

Every numeric knob lives in :class:`CascadeConfig`; the backends for both
stages are injected, so any model that satisfies the backend contract runs
unchanged.
"""
from __future__ import annotations

import math
import time
from contextlib import contextmanager
from dataclasses import dataclass
from itertools import product

import numpy as np

from airseg.backend import BackendDescriptor, segment
from airseg.postprocess import VALID_CONNECTIVITY, largest_component
from airseg.volume import (
    BBox,
    Mask,
    ProbMap,
    Volume,
    crop,
    paste,
    resample,
    resample_to_geometry,
)

ROI_PAD_HU = -1024.0  # air; neutral background when the ROI underfills a patch


class CascadeError(Exception):
    """Pipeline failure, annotated with the stage that raised it."""


class EmptyCoarseMaskError(CascadeError):
    """Coarse stage produced no voxels above threshold; ROI is undefined."""


@dataclass
class CascadeConfig:
    coarse_spacing: tuple[float, float, float] = (3.0, 3.0, 3.0)
    prob_threshold: float = 0.5
    margin_mm: float = 8.0
    patch_dims: tuple[int, int, int] = (64, 64, 64)
    stride: tuple[int, int, int] = (32, 32, 32)
    blend_sigma_frac: float = 0.125
    connectivity: int = 26
    keep_lcc: bool = True

    def __post_init__(self):
        self.coarse_spacing = tuple(float(s) for s in self.coarse_spacing)
        self.patch_dims = tuple(int(d) for d in self.patch_dims)
        self.stride = tuple(int(s) for s in self.stride)
        if min(self.coarse_spacing) <= 0:
            raise ValueError(f"coarse_spacing must be positive, got {self.coarse_spacing}")
        if not 0 < self.prob_threshold < 1:
            raise ValueError(f"prob_threshold must be in (0, 1), got {self.prob_threshold}")
        if self.margin_mm < 0:
            raise ValueError(f"margin_mm must be >= 0, got {self.margin_mm}")
        if min(self.stride) < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if any(s > p for s, p in zip(self.stride, self.patch_dims)):
            raise ValueError(
                f"stride {self.stride} must not exceed patch_dims {self.patch_dims}"
            )
        if self.blend_sigma_frac <= 0:
            raise ValueError(f"blend_sigma_frac must be positive, got {self.blend_sigma_frac}")
        if self.connectivity not in VALID_CONNECTIVITY:
            raise ValueError(f"connectivity must be one of {VALID_CONNECTIVITY}")


def threshold_probs(p: ProbMap, threshold: float) -> Mask:
    """Binarize at ``value >= threshold``."""
    return Mask((p.data >= threshold).astype(np.uint8), p.spacing, p.origin)


def coarse_pass(v: Volume, cfg: CascadeConfig, backend: BackendDescriptor) -> Mask:
    """Low-resolution localization pass; result lives on ``v``'s grid.

    Resamples the image (linear) to ``coarse_spacing``, segments, thresholds,
    and maps the mask back with nearest sampling. An empty coarse mask is an
    error: the downstream ROI would be undefined.
    """
    coarse_img = resample(v, cfg.coarse_spacing, mode="linear")
    probs = segment(backend, coarse_img)
    coarse_mask = threshold_probs(probs, cfg.prob_threshold)
    if coarse_mask.num_foreground == 0:
        raise EmptyCoarseMaskError(
            f"no voxel reached threshold {cfg.prob_threshold} on the coarse grid"
        )
    full = resample_to_geometry(coarse_mask, v.dims, v.spacing, v.origin, "nearest")
    return Mask(full.data, v.spacing, v.origin)


def extended_bbox(m: Mask, margin_mm: float) -> BBox:
    """Tight box of the nonzero voxels, padded by the margin, clamped to grid."""
    coords = np.argwhere(m.data)
    if coords.size == 0:
        raise ValueError("cannot take the bounding box of an empty mask")
    lo = coords.min(axis=0)
    hi = coords.max(axis=0) + 1
    pad = [math.ceil(margin_mm / s) for s in m.spacing]
    lo = np.maximum(lo - pad, 0)
    hi = np.minimum(hi + pad, m.dims)
    return BBox(tuple(lo), tuple(hi))


def plan_tiles(roi_dims, patch_dims, stride) -> list[tuple[int, int, int]]:
    """Tile origins covering the ROI; the last origin per axis clamps flush.

    Raises when the patch exceeds the ROI (callers pad the ROI first).
    """
    roi_dims = tuple(int(d) for d in roi_dims)
    patch_dims = tuple(int(d) for d in patch_dims)
    stride = tuple(int(s) for s in stride)
    per_axis = []
    for size, patch, step in zip(roi_dims, patch_dims, stride):
        if patch > size:
            raise ValueError(f"patch dim {patch} exceeds ROI dim {size}")
        last = size - patch
        positions = list(range(0, last + 1, step))
        if positions[-1] != last:
            positions.append(last)
        per_axis.append(positions)
    return [origin for origin in product(*per_axis)]


def blend_weights(patch_dims, sigma_frac: float) -> np.ndarray:
    """Separable Gaussian tile weight, peak 1 at the patch center.

    The center sits at ``(dim - 1) / 2`` per axis with sigma
    ``sigma_frac * dim``; weights are floored at 1e-8 so every voxel keeps a
    positive vote.
    """
    axes = []
    for dim in patch_dims:
        coords = np.arange(int(dim), dtype=np.float64)
        center = (dim - 1) / 2.0
        sigma = sigma_frac * dim
        axes.append(np.exp(-0.5 * ((coords - center) / sigma) ** 2))
    w = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    return np.maximum(w, 1e-8)


def blend_tiles(roi_dims, tiles, weights: np.ndarray) -> np.ndarray:
    """Weighted-average accumulation of per-tile probability patches.

    ``tiles`` is an iterable of ``(origin, probs)`` pairs. Accumulation runs
    in float64, which keeps the result independent of tile order to well
    under 1e-6 per voxel.
    """
    num = np.zeros(roi_dims, dtype=np.float64)
    den = np.zeros(roi_dims, dtype=np.float64)
    pd = weights.shape
    for origin, probs in tiles:
        sl = tuple(slice(o, o + d) for o, d in zip(origin, pd))
        num[sl] += probs.astype(np.float64) * weights
        den[sl] += weights
    out = num / den
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def fine_pass(roi: Volume, cfg: CascadeConfig, backend: BackendDescriptor) -> ProbMap:
    """Sliding-window segmentation of the ROI with Gaussian blending."""
    plan = plan_tiles(roi.dims, cfg.patch_dims, cfg.stride)
    weights = blend_weights(cfg.patch_dims, cfg.blend_sigma_frac)
    tiles = []
    for origin in plan:
        box = BBox(origin, tuple(o + d for o, d in zip(origin, cfg.patch_dims)))
        tile = crop(roi, box)
        try:
            probs = segment(backend, tile)
        except Exception as exc:
            raise CascadeError(f"fine tile at origin {origin}: {exc}") from exc
        tiles.append((origin, probs.data))
    blended = blend_tiles(roi.dims, tiles, weights)
    return ProbMap(blended, roi.spacing, roi.origin)


def _pad_to_patch(roi: Volume, patch_dims) -> tuple[Volume, tuple[int, int, int]]:
    """Symmetrically pad with air HU until every axis reaches the patch size."""
    pad_lo, pad_hi = [], []
    for size, patch in zip(roi.dims, patch_dims):
        short = max(0, patch - size)
        pad_lo.append(short // 2)
        pad_hi.append(short - short // 2)
    if not any(pad_lo) and not any(pad_hi):
        return roi, (0, 0, 0)
    data = roi.data
    if data.dtype == np.uint8:  # cannot hold air HU
        data = data.astype(np.int16)
    padded = np.pad(
        data,
        tuple(zip(pad_lo, pad_hi)),
        mode="constant",
        constant_values=np.asarray(ROI_PAD_HU, dtype=data.dtype),
    )
    origin = tuple(o - p * s for o, p, s in zip(roi.origin, pad_lo, roi.spacing))
    return Volume(padded, roi.spacing, origin), tuple(pad_lo)


@contextmanager
def _stage(name: str, timings: dict | None):
    start = time.perf_counter()
    try:
        yield
    except CascadeError:
        raise
    except Exception as exc:
        raise CascadeError(f"{name} stage: {exc}") from exc
    finally:
        if timings is not None:
            timings[name] = timings.get(name, 0.0) + time.perf_counter() - start


def run_cascade(
    v: Volume,
    cfg: CascadeConfig,
    coarse_backend: BackendDescriptor,
    fine_backend: BackendDescriptor,
    timings: dict | None = None,
) -> Mask:
    """Full pipeline: coarse localize, crop extended ROI, fine segment, paste.

    When ``timings`` is a dict it receives per-stage wall seconds under the
    keys ``coarse``, ``crop``, ``fine``, and ``post``.
    """
    with _stage("coarse", timings):
        coarse_mask = coarse_pass(v, cfg, coarse_backend)

    with _stage("crop", timings):
        box = extended_bbox(coarse_mask, cfg.margin_mm)
        roi = crop(v, box)
        roi, pad_lo = _pad_to_patch(roi, cfg.patch_dims)

    with _stage("fine", timings):
        probs = fine_pass(roi, cfg, fine_backend)

    with _stage("post", timings):
        roi_mask = threshold_probs(probs, cfg.prob_threshold)
        if pad_lo != (0, 0, 0) or roi_mask.dims != box.dims:
            unpad = BBox(pad_lo, tuple(p + d for p, d in zip(pad_lo, box.dims)))
            roi_mask = crop(roi_mask, unpad)
        full = Mask(np.zeros(v.dims, dtype=np.uint8), v.spacing, v.origin)
        paste(full, roi_mask, box.lo)
        if cfg.keep_lcc:
            full = largest_component(full, cfg.connectivity)
    return full
