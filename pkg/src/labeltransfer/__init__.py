"""labeltransfer: re-express object-detection annotations from datasets with
heterogeneous label spaces in a single target space, via privileged
proposals and confidence-weighted attention fusion."""

from .annotations import (
    Box,
    Detection,
    ImageRecord,
    Origin,
    filter_by_score,
    iou,
    load_corpus,
    nms,
    save_corpus,
)
from .benchmark import (
    BenchConfig,
    BenchmarkData,
    evaluate_ap,
    generate_benchmark,
    granularity_preset,
    mapping_recovery,
    size_disparity_preset,
)
from .detectors import (
    DetectorConfig,
    NoiseModel,
    ToyDetector,
    generate_pseudo_labels,
    oracle_pseudo_labels,
    train_toy_detector,
)
from .features import FeatureModel, roi_pool
from .fusion import SffConfig, SffParams, attention_matrix, fuse
from .labelspace import GlobalIndex, LabelSpace, build_global_index, masked_softmax
from .model import (
    LatModel,
    TrainConfig,
    train_lat,
    transfer_annotations,
    training_loss,
)
from .proposals import AugConfig, ProposalBatch, build_batch, confidence_vector, jitter_box

__all__ = [
    "AugConfig",
    "BenchConfig",
    "BenchmarkData",
    "Box",
    "Detection",
    "DetectorConfig",
    "FeatureModel",
    "GlobalIndex",
    "ImageRecord",
    "LabelSpace",
    "LatModel",
    "NoiseModel",
    "Origin",
    "ProposalBatch",
    "SffConfig",
    "SffParams",
    "ToyDetector",
    "TrainConfig",
    "attention_matrix",
    "build_batch",
    "build_global_index",
    "confidence_vector",
    "evaluate_ap",
    "filter_by_score",
    "fuse",
    "generate_benchmark",
    "generate_pseudo_labels",
    "granularity_preset",
    "iou",
    "jitter_box",
    "load_corpus",
    "mapping_recovery",
    "masked_softmax",
    "nms",
    "oracle_pseudo_labels",
    "roi_pool",
    "save_corpus",
    "size_disparity_preset",
    "train_lat",
    "train_toy_detector",
    "training_loss",
    "transfer_annotations",
]

__version__ = "0.1.0"
