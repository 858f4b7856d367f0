from .defenses import (
    ClusteringResult,
    StripResult,
    activation_clustering,
    channel_activity,
    cluster_scores,
    edge_replacement_defense,
    fine_prune,
    fine_prune_curve,
    gradcam,
    prediction_entropy,
    region_removal_asr,
    region_removal_probe,
    strip_compare,
    strip_probe,
)
from .metrics import (
    QualityReport,
    attack_success,
    evaluate_asr,
    evaluate_cda,
    image_quality,
    predict,
    psnr,
    ssim,
)
from .record import TABLE_COLUMNS, MetricsRecord
from .transforms import KINDS, TransformSpec, apply_transform, defense_suite, robustness_suite

__all__ = [
    "KINDS",
    "TABLE_COLUMNS",
    "ClusteringResult",
    "MetricsRecord",
    "QualityReport",
    "StripResult",
    "TransformSpec",
    "activation_clustering",
    "apply_transform",
    "attack_success",
    "channel_activity",
    "cluster_scores",
    "defense_suite",
    "edge_replacement_defense",
    "evaluate_asr",
    "evaluate_cda",
    "fine_prune",
    "fine_prune_curve",
    "gradcam",
    "image_quality",
    "predict",
    "prediction_entropy",
    "psnr",
    "region_removal_asr",
    "region_removal_probe",
    "robustness_suite",
    "ssim",
    "strip_compare",
    "strip_probe",
]
