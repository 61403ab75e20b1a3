"""Typicality-based OOD scoring for text embeddings, plus a streaming
guardrail scheduler that batches evaluations over generating requests."""

from .errors import (
    AlignmentError,
    BatchTooSmallError,
    ContractError,
    DegenerateVectorError,
    DimensionError,
    FormatError,
    InsufficientDataError,
    MetricError,
    ParameterError,
    PayloadLengthError,
    ProtocolError,
    T3GuardError,
    TraceParseError,
    ValidationError,
)
from .embedding_store import (
    EmbeddingView,
    MultiViewDataset,
    align_views,
    load_embedding_file,
    normalize_rows,
    read_sample_ids,
    save_embedding_file,
    write_sample_ids,
)
from .neighborhood import (
    ReferenceIndex,
    ReferenceSplit,
    build_index,
    load_index,
    pairwise_sq_dists,
    save_index,
    split_reference,
    test_set_radii,
)
from .prdc import (
    FeatureSubset,
    PrdcVector,
    assemble_features,
    brute_force_prdc,
    check_coupling,
    compute_prdc_batch,
    exact_null_coverage,
    feature_matrix,
    null_expectations,
    subset_length,
    write_feature_dump,
)
from .detectors import (
    DetectorBundle,
    DetectorEntry,
    GmmModel,
    OcsvmModel,
    ScoreCalibration,
    anomaly_score,
    calibrate,
    default_gamma,
    fit_gmm_em,
    fit_ocsvm,
    load_bundle,
    normalize_score,
    predict_label,
    save_bundle,
    select_gmm_bic,
    select_ocsvm_nu,
)
from .evalkit import (
    EvalReport,
    LabeledScores,
    auprc,
    auroc,
    evaluate,
    fpr_at_95_tpr,
    max_f1,
    write_report,
)
from .theory import (
    NullExpectationReport,
    TwoSampleStat,
    knn_label_agreement,
    knn_min_agreement,
    mc_density_ratio_coverage,
    mc_null_expectations,
    mc_support_mismatch,
    recall_agreement_check,
    two_sample_stats,
    verify_suite,
)
from .stream_guard import (
    BatchDecision,
    FallbackPolicy,
    FinalRecord,
    GuardrailScheduler,
    MarkerScorer,
    PipelineScorer,
    RequestSnapshot,
    RequestState,
    RequestStatus,
    SchedulerConfig,
    SegmentOutput,
    SimulationResult,
    TraceEvent,
    parse_trace,
    run_simulation,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
