"""Siamese instance-search tracking with a small numpy network.

The first-frame appearance of the target is matched against candidate boxes
in every later frame; the matching function is a two-stream, weight-tied
network trained with a margin contrastive loss on synthetic video.
"""
from .boxes import Box, iou
from .datagen import PairSamplerConfig, Sequence, generate_sequence, sample_pairs
from .evaluation import EvalCurve, precision_curve, run_robustness, success_curve
from .siamese import (DEFAULT_ARCH, Architecture, FeatureSet, FeatureVector, SiameseModel, build_model,
                      extract_features, load_model, match, save_model)
from .tracker import SamplerConfig, SINTTracker, TrackerConfig
from .training import TrainingConfig, contrastive_loss, train

__version__ = "0.1.0"
