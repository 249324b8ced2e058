"""Scribble-supervised segmentation with a promptable guided segmenter.

The package trains a cross-level encoder-decoder from sparse scribbles while
a promptable segmenter, driven by boxes grown out of the scribbles, supplies
full auxiliary masks. Masks that disagree with the scribbles are dropped from
the loss. See the README for the training loop and the CLI.
"""

from .backbone import (FULL_CHANNELS, TINY_CHANNELS, BackboneSpec, FeaturePyramid,
                       TinyBackbone, extract_features, make_tiny_backbone)
from .data import (CropSpec, Sample, SampleRecord, load_image, load_manifest,
                   load_sample, load_scribble, make_synthetic_dataset,
                   synthesize_sample, train_transform, write_manifest)
from .decoder import CrossLevelDecoder, PredictionSet, build_decoder
from .errors import (AnnotationError, CollabsegError, DataError, PromptError,
                     SegmenterError, SizingError)
from .losses import (GuidedMaskBatch, LossWeights, boundary_weight_map,
                     combine_components, partial_ce, structure_consistency,
                     total_loss, weighted_seg_loss)
from .metrics import (MetricReport, dice_iou, e_measure_max, evaluate_dataset,
                      evaluate_pair, mae, s_measure, weighted_f)
from .prompting import (Box, augment_box, build_indicator, make_prompt_box,
                        mask_scribble_agreement, prediction_to_box, scaled_margin,
                        scribble_to_box)
from .segmenter import (GuidedSegmenter, SegmenterConfig, StubSegmenter,
                        TrainableSegmenter, register_segmenter,
                        registered_segmenters, resolve_segmenter)
from .trainer import (TrainConfig, TrainModels, build_models, fit, load_checkpoint,
                      lr_at, models_from_checkpoint, predict, save_checkpoint,
                      scaled_input_size)

__version__ = "0.1.0"

__all__ = [
    "AnnotationError", "BackboneSpec", "Box", "CollabsegError", "CropSpec",
    "CrossLevelDecoder", "DataError", "FULL_CHANNELS", "FeaturePyramid",
    "GuidedMaskBatch", "GuidedSegmenter", "LossWeights", "MetricReport",
    "PredictionSet", "PromptError", "Sample", "SampleRecord", "SegmenterConfig",
    "SegmenterError", "SizingError", "StubSegmenter", "TINY_CHANNELS",
    "TinyBackbone", "TrainConfig", "TrainModels", "TrainableSegmenter",
    "augment_box", "boundary_weight_map", "build_decoder", "build_indicator",
    "build_models", "combine_components", "dice_iou", "e_measure_max",
    "evaluate_dataset", "evaluate_pair", "extract_features", "fit",
    "load_checkpoint", "load_image", "load_manifest", "load_sample",
    "load_scribble", "lr_at", "mae", "make_prompt_box", "make_synthetic_dataset",
    "make_tiny_backbone", "mask_scribble_agreement", "models_from_checkpoint",
    "partial_ce", "predict", "prediction_to_box", "register_segmenter",
    "registered_segmenters", "resolve_segmenter", "s_measure", "save_checkpoint",
    "scaled_input_size", "scaled_margin", "scribble_to_box",
    "structure_consistency", "synthesize_sample", "total_loss", "train_transform",
    "weighted_f", "weighted_seg_loss", "write_manifest",
]
