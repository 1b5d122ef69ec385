"""Cross-phase mutual learning for embolism segmentation and classification.

Two architecturally identical 3D encoder-decoder pathways are trained in
parallel on registered contrast (CTPA) and non-contrast (NCT) volumes. The
non-contrast pathway additionally aligns its classification distribution
(KL) and its encoder affinity graph (pairwise cosine similarities) to the
contrast pathway, and both pathways sharpen their dense decoder features with
a per-class center loss. Inference uses the non-contrast pathway alone.
"""

from .core_types import (
    CPMNConfig,
    PairedCase,
    Phase,
    Prediction,
    SegMask,
    Volume3D,
    minmax_normalize,
    validate_case,
)
from .synth_phantom import PhantomSpec, generate_case, generate_dataset
from .dataset_io import DatasetManifest, load_dataset, save_dataset
from .nets import PathwayNetwork, PathwayOutputs, build_pathway
from .losses import (
    ClassCenters,
    LossBreakdown,
    bce_class_loss,
    dense_center_loss,
    focal_loss,
    kl_mutual_loss,
    total_loss,
    update_centers,
    zero_centers,
)
from .affinity import AffinityGraph, alignment_loss, build_graph
from .trainer import TrainState, augment, fit, load_checkpoint, save_checkpoint, train_step
from .inference import (
    binarize_probmap,
    classify_center_patch,
    compute_cam,
    predict_case,
    sliding_window_segment,
)
from .metrics_report import (
    CaseEval,
    delong_test,
    dice,
    evaluate,
    permutation_test,
    roc_auc,
    sens_spec,
)

__version__ = "0.1.0"

__all__ = [
    "CPMNConfig",
    "PairedCase",
    "Phase",
    "Prediction",
    "SegMask",
    "Volume3D",
    "minmax_normalize",
    "validate_case",
    "PhantomSpec",
    "generate_case",
    "generate_dataset",
    "DatasetManifest",
    "load_dataset",
    "save_dataset",
    "PathwayNetwork",
    "PathwayOutputs",
    "build_pathway",
    "ClassCenters",
    "LossBreakdown",
    "bce_class_loss",
    "dense_center_loss",
    "focal_loss",
    "kl_mutual_loss",
    "total_loss",
    "update_centers",
    "zero_centers",
    "AffinityGraph",
    "alignment_loss",
    "build_graph",
    "TrainState",
    "augment",
    "fit",
    "load_checkpoint",
    "save_checkpoint",
    "train_step",
    "binarize_probmap",
    "classify_center_patch",
    "compute_cam",
    "predict_case",
    "sliding_window_segment",
    "CaseEval",
    "delong_test",
    "dice",
    "evaluate",
    "permutation_test",
    "roc_auc",
    "sens_spec",
]
