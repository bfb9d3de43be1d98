"""Segmentation evaluation: confusion counts, derived metrics, aggregates,
and slice overlays for visual error inspection.

Six per-case metrics are reported: dice, jaccard, recall, precision, and the
two error rates fne = 1 - recall (fraction of ground truth missed) and
fpe = 1 - precision (fraction of the prediction that is wrong). Aggregates
use the population standard deviation and are formatted "0.914±0.040".
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from airseg.volume import Grid3D, Mask, Volume, geometry_equal

METRIC_NAMES = ("dice", "jaccard", "recall", "precision", "fne", "fpe")

# Display window for overlay backgrounds, in HU.
OVERLAY_WINDOW = (-1000.0, 400.0)

COLOR_TRUE_POSITIVE = (0, 255, 0)
COLOR_FALSE_NEGATIVE = (255, 255, 0)  # yellow: missed airway
COLOR_FALSE_POSITIVE = (0, 255, 255)  # cyan: spurious prediction


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class MetricValues:
    dice: float
    jaccard: float
    recall: float
    precision: float
    fne: float
    fpe: float

    def as_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_NAMES}


@dataclass(frozen=True)
class CaseReport:
    case_id: str
    counts: ConfusionCounts
    dice: float
    jaccard: float
    recall: float
    precision: float
    fne: float
    fpe: float

    def metric(self, name: str) -> float:
        return getattr(self, name)


@dataclass(frozen=True)
class AggregateReport:
    n_cases: int
    mean: dict[str, float]
    std: dict[str, float]

    def formatted(self) -> dict[str, str]:
        return {
            name: format_mean_std(self.mean[name], self.std[name])
            for name in METRIC_NAMES
        }


def format_mean_std(mean: float, std: float) -> str:
    return f"{mean:.3f}±{std:.3f}"


def confusion(pred: Mask, gt: Mask) -> ConfusionCounts:
    """Voxel confusion counts; the grids must share geometry."""
    if not geometry_equal(pred, gt):
        raise ValueError(
            f"geometry mismatch: pred {pred.dims}/{pred.spacing} "
            f"vs gt {gt.dims}/{gt.spacing}"
        )
    p = pred.data.astype(bool)
    g = gt.data.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = p.size - tp - fp - fn
    return ConfusionCounts(tp, fp, fn, tn)


def derive_metrics(c: ConfusionCounts) -> MetricValues:
    """The six metrics from confusion counts.

    Zero-denominator conventions: both masks empty scores every metric 1;
    with exactly one side empty the undefined ratios score 0 and the error
    rates fne/fpe score 1.
    """
    if c.tp == 0 and c.fp == 0 and c.fn == 0:
        return MetricValues(1.0, 1.0, 1.0, 1.0, 1.0, 1.0)

    def ratio(num: int, den: int, empty_value: float) -> float:
        return num / den if den else empty_value

    dice = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, 0.0)
    jaccard = ratio(c.tp, c.tp + c.fp + c.fn, 0.0)
    recall = ratio(c.tp, c.tp + c.fn, 0.0)
    precision = ratio(c.tp, c.tp + c.fp, 0.0)
    fne = ratio(c.fn, c.tp + c.fn, 1.0)
    fpe = ratio(c.fp, c.tp + c.fp, 1.0)
    return MetricValues(dice, jaccard, recall, precision, fne, fpe)


def dice_from_recall_precision(recall: float, precision: float) -> float:
    """Dice as the harmonic mean of recall and precision."""
    if recall + precision == 0:
        return 0.0
    return 2.0 * recall * precision / (recall + precision)


def evaluate_case(pred: Mask, gt: Mask, case_id: str) -> CaseReport:
    counts = confusion(pred, gt)
    m = derive_metrics(counts)
    return CaseReport(case_id, counts, m.dice, m.jaccard, m.recall, m.precision, m.fne, m.fpe)


def aggregate(reports: list[CaseReport]) -> AggregateReport:
    """Per-metric mean and population (n-divisor) standard deviation."""
    if not reports:
        raise ValueError("cannot aggregate an empty report list")
    mean: dict[str, float] = {}
    std: dict[str, float] = {}
    for name in METRIC_NAMES:
        values = np.array([r.metric(name) for r in reports], dtype=np.float64)
        mean[name] = float(values.mean())
        std[name] = float(values.std())  # ddof=0: population convention
    return AggregateReport(len(reports), mean, std)


def _window_to_gray(values: np.ndarray) -> np.ndarray:
    lo, hi = OVERLAY_WINDOW
    scaled = np.clip((values.astype(np.float64) - lo) / (hi - lo), 0.0, 1.0)
    return np.round(scaled * 255.0).astype(np.uint8)


def _extract_slice(g: Grid3D, axis: int, index: int) -> np.ndarray:
    if axis not in (0, 1, 2):
        raise ValueError(f"slice_axis must be 0, 1, or 2, got {axis}")
    if not 0 <= index < g.dims[axis]:
        raise ValueError(f"slice index {index} out of range for axis {axis} ({g.dims[axis]})")
    sl = [slice(None)] * 3
    sl[axis] = index
    return g.data[tuple(sl)]


def render_overlay(
    v: Volume, pred: Mask, gt: Mask, slice_axis: int, slice_index: int, out_path
) -> None:
    """Write one slice as a binary PPM (P6) error overlay.

    Background is the windowed CT in grayscale; true positives are green,
    missed airway (false negatives) yellow, spurious prediction (false
    positives) cyan. Image columns follow the lower remaining axis and rows
    the higher one, with row 0 at index 0.
    """
    if not (geometry_equal(v, pred) and geometry_equal(v, gt)):
        raise ValueError("overlay inputs must share geometry")
    img = _extract_slice(v, slice_axis, slice_index)
    p = _extract_slice(pred, slice_axis, slice_index).astype(bool)
    g = _extract_slice(gt, slice_axis, slice_index).astype(bool)

    gray = _window_to_gray(img)
    rgb = np.stack([gray, gray, gray], axis=-1)
    rgb[p & g] = COLOR_TRUE_POSITIVE
    rgb[~p & g] = COLOR_FALSE_NEGATIVE
    rgb[p & ~g] = COLOR_FALSE_POSITIVE

    # slice array axes are (cols, rows); PPM rasters row by row
    cols, rows = rgb.shape[0], rgb.shape[1]
    raster = np.transpose(rgb, (1, 0, 2))
    header = f"P6\n{cols} {rows}\n255\n".encode("ascii")
    Path(out_path).write_bytes(header + raster.tobytes())
