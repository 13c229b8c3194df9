"""Closed-loop active illumination engine.

Optimizes a per-pixel headlight intensity field for a nighttime scene,
under an energy budget, to maximize downstream perception scores.
"""

__version__ = "0.1.0"

from .datasets import Dataset, SceneRecord, read_manifest, write_manifest
from .experiment import ExperimentConfig, ExperimentReport, MethodSpec, MetricsReport, run_experiment
from .external import ExternalScorerClient, external_score
from .images import (
    Annotation,
    Image,
    LightField,
    ScenePair,
    darken_only,
    relight,
    relight_gradient,
)
from .metrics import detection_metrics, distance_banded, power_of, segmentation_metrics
from .photometry import (
    AngularIntensityTable,
    CameraModel,
    HeadlightModel,
    WarpMap,
    build_warp,
    default_rig,
    field_to_headlight,
    high_beam_table,
    low_beam_table,
    project_beam,
)
from .policy import (
    BaselineContext,
    BudgetSchedule,
    GradientStepPolicy,
    OptimizeResult,
    Policy,
    PolicyInput,
    RefinementConfig,
    baseline_field,
    init_field,
    normalize_budget,
    optimize_blackbox,
    optimize_gradient,
    refine,
    residual_update,
    scheduled_eta,
)
from .scoring import Detection, ScoreReport, ScorerSpec, ScorerStack, aggregate, contrast_score, exposure_score
from .toygen import ToyParams, generate_toy_corpus

__all__ = [
    "Annotation",
    "Image",
    "LightField",
    "ScenePair",
    "relight",
    "relight_gradient",
    "darken_only",
    "CameraModel",
    "HeadlightModel",
    "AngularIntensityTable",
    "WarpMap",
    "project_beam",
    "build_warp",
    "field_to_headlight",
    "low_beam_table",
    "high_beam_table",
    "default_rig",
    "Policy",
    "PolicyInput",
    "BudgetSchedule",
    "RefinementConfig",
    "BaselineContext",
    "GradientStepPolicy",
    "OptimizeResult",
    "init_field",
    "residual_update",
    "normalize_budget",
    "scheduled_eta",
    "refine",
    "optimize_gradient",
    "optimize_blackbox",
    "baseline_field",
    "Detection",
    "ScoreReport",
    "ScorerSpec",
    "ScorerStack",
    "aggregate",
    "contrast_score",
    "exposure_score",
    "ExternalScorerClient",
    "external_score",
    "Dataset",
    "SceneRecord",
    "read_manifest",
    "write_manifest",
    "ToyParams",
    "generate_toy_corpus",
    "detection_metrics",
    "distance_banded",
    "segmentation_metrics",
    "power_of",
    "MethodSpec",
    "MetricsReport",
    "ExperimentConfig",
    "ExperimentReport",
    "run_experiment",
]
