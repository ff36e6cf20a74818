"""Occlusion-based modality contribution analysis for black-box predictors.

Given a multimodal dataset and any predictor (in-process callable, built-in
reference model, subprocess or HTTP service speaking the line protocol), the
toolkit occludes one patch of one modality at a time, accumulates the output
differences, and reports how the model's attention splits across modalities
and patches.  Works with any performance level; labels never enter.
"""

__version__ = "0.1.0"

from .engine import (
    AnalysisError,
    ContributionReport,
    DEFAULT_COLLAPSE_THRESHOLD,
    DistanceTable,
    KahanSum,
    NondeterministicModelError,
    detect_collapse,
    modality_contribution,
    output_distance,
    patch_importance,
    per_class_scores,
    per_sample_patch_importance,
    reduce_class_scores,
    run_analysis,
    summarize,
    weighted_patch_importance,
)
from .manifest import (
    ArrayDataset,
    EncodingError,
    FieldRule,
    Manifest,
    ManifestError,
    ModalitySpec,
    SampleError,
    SampleRecord,
    encode_tabular,
    load_manifest,
    load_sample,
)
from .masking import (
    DEFAULT_MASK_TOKEN,
    Fill,
    OcclusionPlan,
    PatchGrid,
    PlanError,
    apply_mask,
    build_planners,
    compute_fill,
    parse_fill,
    plan_image,
    plan_tabular,
    plan_text,
    resolve_fills,
    validate_partition,
)
from .models import (
    BatchError,
    BuiltinModel,
    CallableModel,
    HttpModel,
    Model,
    ModelError,
    NonFiniteOutputError,
    OutputShapeError,
    PredictionError,
    ProtocolError,
    SubprocessModel,
    TransportError,
    encode_inputs,
    open_model,
    parse_builtin,
)
from .report import (
    ReportError,
    load_report,
    ratio_string,
    render_artifacts,
    render_document,
    render_patch_heatmap,
    round_sig,
    write_pgm,
    write_report,
    write_token_scores,
)
from .tensors import TensorFormatError, read_tensor, write_tensor

__all__ = [name for name in dir() if not name.startswith("_")]
