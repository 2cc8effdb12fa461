"""Micro-gesture classification from 2D skeleton sequences.

Pipeline: skeleton clips -> subject-centered pseudo-3D heatmap volumes
(joint or limb modality) -> 3D-CNN with a classification head and a
300-d semantic label-embedding head -> cross-entropy + alpha * embedding
loss -> Top-k evaluation and weighted two-modality score fusion.
"""

from .config import (ConfigError, DataConfig, FusionConfig, NetworkSection,
                     ObjectiveConfig, OptimizerConfig, RunConfig,
                     load_run_config, run_config_from_dict, run_config_to_dict)
from .embeddings import (EmbeddingTable, build_label_matrix, embed_label,
                         load_embedding_table, make_synthetic_table)
from .engine import (EvalReport, TrainResult, ablate_alpha, cosine_lr,
                     derive_seed, evaluate, fuse_scores, read_scores,
                     topk_accuracy, train, write_scores)
from .heatmaps import (HeatmapVolume, VolumeConfig, build_volume,
                       channel_count, read_volume, subject_centered_crop,
                       uniform_sample_indices, write_volume)
from .network import (Checkpoint, ForwardOutput, MicroGestureNet,
                      NetworkConfig, init_params, load_checkpoint,
                      predict_scores, save_checkpoint)
from .objective import (LossBreakdown, cross_entropy, embedding_loss,
                        total_loss)
from .pose_io import (DatasetManifest, KeypointLayout, LabelVocabulary,
                      SkeletonClip, ValidationError, get_layout,
                      load_manifest, synthesize_dataset, write_manifest)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataConfig", "FusionConfig", "NetworkSection",
    "ObjectiveConfig", "OptimizerConfig", "RunConfig", "load_run_config",
    "run_config_from_dict", "run_config_to_dict",
    "EmbeddingTable", "build_label_matrix", "embed_label",
    "load_embedding_table", "make_synthetic_table",
    "EvalReport", "TrainResult", "ablate_alpha", "cosine_lr", "derive_seed",
    "evaluate", "fuse_scores", "read_scores", "topk_accuracy", "train",
    "write_scores",
    "HeatmapVolume", "VolumeConfig", "build_volume", "channel_count",
    "read_volume", "subject_centered_crop", "uniform_sample_indices",
    "write_volume",
    "Checkpoint", "ForwardOutput", "MicroGestureNet", "NetworkConfig",
    "init_params", "load_checkpoint", "predict_scores", "save_checkpoint",
    "LossBreakdown", "cross_entropy", "embedding_loss", "total_loss",
    "DatasetManifest", "KeypointLayout", "LabelVocabulary", "SkeletonClip",
    "ValidationError", "get_layout", "load_manifest", "synthesize_dataset",
    "write_manifest",
    "__version__",
]
