"""Few-shot object detection with knowledge-inheriting novel-class initialization."""

from kifsod._detector import (
    Detections,
    Detector,
    ForwardOutput,
    LossTerms,
    TrainConfig,
    center_embeddings,
    compute_loss,
    describe_architecture,
    detect,
    extract_instance_features,
    forward,
    load_checkpoint,
    pretrain_base,
    save_checkpoint,
)
from kifsod._efficiency import (
    ArchDescriptor,
    ConvergenceMonitor,
    ConvLayer,
    FlopsReport,
    LinearLayer,
    RoIStage,
    SpeedProtocol,
    SpeedReport,
    detect_convergence,
    estimate_flops,
    measure_adaptation_speed,
    transfer_launcher,
)
from kifsod._errors import (
    ConfigurationError,
    DataError,
    DegenerateGeometryError,
    KifsodError,
    NumericalError,
    ShapeError,
)
from kifsod._evalkit import (
    DetectionEvaluator,
    DetectionRecord,
    MetricReport,
    average_recall,
    compute_ap,
    compute_ap_sweep,
    evaluate_detector,
    match_iou,
    proposal_recall,
)
from kifsod._experiment import (
    ExperimentManifest,
    ExperimentReport,
    PoolSizes,
    RunRecord,
    build_report,
    generate_benchmark,
    run_experiment,
)
from kifsod._ki_init import (
    CentroidSet,
    LengthStats,
    aggregate_centroids,
    dump_embeddings,
    estimate_alr_ratio,
    hypersphere_stats,
    inherit_centroids,
    install_centroids,
    make_novel_centroids,
    read_embeddings,
)
from kifsod._presets import (
    get_preset,
    preset_configs,
    register_transfer_presets,
    registered_preset_keys,
)
from kifsod._synthgen import (
    AnnotatedImage,
    Augmentation,
    ClassSplit,
    DatasetManifest,
    DatasetSpec,
    FewShotSet,
    build_fewshot_set,
    generate_dataset,
    load_dataset,
    load_fewshot,
    load_pool,
    sample_batch,
    save_dataset,
    save_fewshot,
)
from kifsod._transfer import (
    CurvePoint,
    TransferConfig,
    TransferResult,
    TransferRunner,
    extend_classifier,
    fewshot_transfer,
    read_curve,
    write_curve,
)
from kifsod._utils import BatchMode, ClassifierKind, Component, InitMode, Phase

__all__ = [
    "AnnotatedImage",
    "ArchDescriptor",
    "Augmentation",
    "BatchMode",
    "CentroidSet",
    "ClassSplit",
    "ClassifierKind",
    "Component",
    "ConfigurationError",
    "ConvLayer",
    "ConvergenceMonitor",
    "CurvePoint",
    "DataError",
    "DatasetManifest",
    "DatasetSpec",
    "DegenerateGeometryError",
    "DetectionEvaluator",
    "DetectionRecord",
    "Detections",
    "Detector",
    "ExperimentManifest",
    "ExperimentReport",
    "FewShotSet",
    "FlopsReport",
    "ForwardOutput",
    "InitMode",
    "KifsodError",
    "LengthStats",
    "LinearLayer",
    "LossTerms",
    "MetricReport",
    "NumericalError",
    "Phase",
    "PoolSizes",
    "RoIStage",
    "RunRecord",
    "ShapeError",
    "SpeedProtocol",
    "SpeedReport",
    "TrainConfig",
    "TransferConfig",
    "TransferResult",
    "TransferRunner",
    "aggregate_centroids",
    "average_recall",
    "build_fewshot_set",
    "build_report",
    "center_embeddings",
    "compute_ap",
    "compute_ap_sweep",
    "compute_loss",
    "describe_architecture",
    "detect",
    "detect_convergence",
    "dump_embeddings",
    "estimate_alr_ratio",
    "estimate_flops",
    "evaluate_detector",
    "extend_classifier",
    "extract_instance_features",
    "fewshot_transfer",
    "forward",
    "generate_benchmark",
    "generate_dataset",
    "get_preset",
    "hypersphere_stats",
    "inherit_centroids",
    "install_centroids",
    "load_checkpoint",
    "load_dataset",
    "load_fewshot",
    "load_pool",
    "make_novel_centroids",
    "match_iou",
    "measure_adaptation_speed",
    "preset_configs",
    "pretrain_base",
    "proposal_recall",
    "read_curve",
    "read_embeddings",
    "register_transfer_presets",
    "registered_preset_keys",
    "run_experiment",
    "sample_batch",
    "save_checkpoint",
    "save_dataset",
    "save_fewshot",
    "transfer_launcher",
    "write_curve",
]
