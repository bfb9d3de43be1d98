"""Coarse-to-fine 3D airway segmentation pipeline with phantom verification."""

from airseg.backend import (
    BackendDescriptor,
    GrowParams,
    detect_seed,
    external_segment,
    region_grow,
    segment,
)
from airseg.cascade import (
    CascadeConfig,
    blend_weights,
    coarse_pass,
    extended_bbox,
    fine_pass,
    plan_tiles,
    run_cascade,
    threshold_probs,
)
from airseg.metrics import (
    AggregateReport,
    CaseReport,
    ConfusionCounts,
    aggregate,
    confusion,
    derive_metrics,
    evaluate_case,
    render_overlay,
)
from airseg.phantom import PhantomSpec, generate_phantom, rasterize, tree_skeleton
from airseg.postprocess import LabeledVolume, label_components, largest_component
from airseg.volume import (
    BBox,
    Mask,
    ProbMap,
    Volume,
    crop,
    geometry_equal,
    paste,
    read_mask,
    read_volume,
    resample,
    resample_to_geometry,
    voxel_to_world,
    write_volume,
)

__version__ = "0.1.0"

__all__ = [
    "AggregateReport",
    "BBox",
    "BackendDescriptor",
    "CascadeConfig",
    "CaseReport",
    "ConfusionCounts",
    "GrowParams",
    "LabeledVolume",
    "Mask",
    "PhantomSpec",
    "ProbMap",
    "Volume",
    "aggregate",
    "blend_weights",
    "coarse_pass",
    "confusion",
    "crop",
    "derive_metrics",
    "detect_seed",
    "evaluate_case",
    "extended_bbox",
    "external_segment",
    "fine_pass",
    "generate_phantom",
    "geometry_equal",
    "label_components",
    "largest_component",
    "paste",
    "plan_tiles",
    "rasterize",
    "read_mask",
    "read_volume",
    "region_grow",
    "render_overlay",
    "resample",
    "resample_to_geometry",
    "run_cascade",
    "segment",
    "threshold_probs",
    "tree_skeleton",
    "voxel_to_world",
    "write_volume",
    "__version__",
]
