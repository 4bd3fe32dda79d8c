"""Language-queried moment localization over pre-extracted frame features.

A small numpy autodiff engine drives a multi-scale cross-modal transformer
that predicts the start and end frame of the moment a text query describes.
"""

from .augmentation import AugmentConfig, combined_augment, sliding_window_sample, video_splice
from .dataset import GeneratorConfig, generate_dataset, read_dataset, seconds_to_frames, write_dataset
from .evaluation import (PredictionSet, decode_topk, ensemble_merge, metric_grid, random_baseline,
                         recall_at_k, temporal_iou)
from .losses import frame_nce_loss, npm_loss, qgh_loss, saliency_loss, span_loss
from .model import (ModelConfig, forward_batch, forward_clip, init_weights, load_checkpoint,
                    multi_scale_forward, save_checkpoint)
from .rng import RngTree
from .tensor import Tensor, grad_check
from .training import TrainConfig, train
from .types import ClipSample, MomentSpan

__all__ = [
    "AugmentConfig", "ClipSample", "GeneratorConfig", "ModelConfig", "MomentSpan", "PredictionSet",
    "RngTree", "Tensor", "TrainConfig", "combined_augment", "decode_topk", "ensemble_merge",
    "forward_batch", "forward_clip", "frame_nce_loss", "generate_dataset", "grad_check", "init_weights",
    "load_checkpoint", "metric_grid", "multi_scale_forward", "npm_loss", "qgh_loss", "random_baseline",
    "read_dataset", "recall_at_k", "saliency_loss", "save_checkpoint", "seconds_to_frames",
    "sliding_window_sample", "span_loss", "temporal_iou", "train", "video_splice", "write_dataset",
]
