"""Few-shot segmentation with image, mask, box, and text guidance.

The library builds multi-scale 4D cosine correlation volumes between a query
image and its support material, corrects the deep volumes, injects a text
correlation channel, aggregates everything with center-pivot 4D convolutions,
and decodes a binary mask cross-modally. Seven guidance patterns share one
architecture; see :mod:`fewseg.patterns`.
"""

from .aggregation import CenterPivotConv4d, CorrelationAggregator, broadcast_vt, inject
from .checkpoint import Checkpoint, load_tensors, save_tensors
from .config import EncoderConfig, ModelConfig, RunConfig, TrainConfig
from .correction import SpatialCorrectionUnit, from_pseudo_feature, to_pseudo_feature
from .correlation import Correlation4D, build_correlation_pyramid, vt_correlation, vv_layer_correlation
from .decoder import CrossModalDecoder, EmbeddingInteraction, predict_mask
from .encoder import (
    EmbeddingSource,
    FeaturePyramid,
    StubEncoder,
    TextEmbedding,
    VisionLanguageEncoder,
    masked_mean,
)
from .episodes import DatasetManifest, Episode, ManifestRecord, sample_episode, split_folds, synth_generate
from .errors import (
    ContractError,
    DegenerateMaskError,
    FewsegError,
    SamplingError,
    ShapeError,
    TrainingDivergedError,
    ValidationError,
)
from .model import FewShotSegmenter, stage_dims
from .patterns import GuidanceSet, PatternTag, RawSupport, box_to_mask, kshot_vote, normalize_guidance, tight_box
from .training import (
    EvalResult,
    FoldMetrics,
    evaluate,
    load_model,
    segmentation_loss,
    train,
    write_metrics_report,
)

__version__ = "0.1.0"

__all__ = [
    "CenterPivotConv4d",
    "Checkpoint",
    "ContractError",
    "Correlation4D",
    "CorrelationAggregator",
    "CrossModalDecoder",
    "DatasetManifest",
    "DegenerateMaskError",
    "EmbeddingInteraction",
    "EmbeddingSource",
    "EncoderConfig",
    "Episode",
    "EvalResult",
    "FeaturePyramid",
    "FewShotSegmenter",
    "FewsegError",
    "FoldMetrics",
    "GuidanceSet",
    "ManifestRecord",
    "ModelConfig",
    "PatternTag",
    "RawSupport",
    "RunConfig",
    "SamplingError",
    "ShapeError",
    "SpatialCorrectionUnit",
    "StubEncoder",
    "TextEmbedding",
    "TrainConfig",
    "TrainingDivergedError",
    "ValidationError",
    "VisionLanguageEncoder",
    "box_to_mask",
    "broadcast_vt",
    "build_correlation_pyramid",
    "evaluate",
    "from_pseudo_feature",
    "inject",
    "kshot_vote",
    "load_model",
    "load_tensors",
    "masked_mean",
    "normalize_guidance",
    "predict_mask",
    "sample_episode",
    "save_tensors",
    "segmentation_loss",
    "split_folds",
    "stage_dims",
    "synth_generate",
    "tight_box",
    "to_pseudo_feature",
    "train",
    "vt_correlation",
    "vv_layer_correlation",
    "write_metrics_report",
]
