"""Source-free domain adaptation by matching stored batch-normalization
statistics, plus information maximization.

A small pretrained network is split into a feature encoder and a fixed
classifier whose leading batchnorm layer holds running statistics of the
source features. Adaptation fine-tunes the encoder on unlabeled target data
so the target feature statistics match those stored statistics (per-channel
Gaussian KL) while the classifier's outputs stay confident and diverse.
"""

from .adaptation import (
    AdaptConfig,
    AdaptResult,
    MetricsRecord,
    PretrainConfig,
    adapt,
    evaluate,
    pretrain,
    split_and_freeze,
)
from .data import LabeledDataset, ShiftSpec, apply_shift, load_csv, make_blobs
from .losses import LossValue, bnm_loss, ce_smooth_loss, im_loss, joint_loss
from .nn import Adam, BatchNormLayer, DenseLayer, Model, SoftmaxLayer, TanhLayer, build_mlp
from .numerics import Tensor, channel_moments, gaussian_sample, make_rng, matmul

__version__ = "0.1.0"

__all__ = [
    "AdaptConfig",
    "AdaptResult",
    "Adam",
    "BatchNormLayer",
    "DenseLayer",
    "LabeledDataset",
    "LossValue",
    "MetricsRecord",
    "Model",
    "PretrainConfig",
    "ShiftSpec",
    "SoftmaxLayer",
    "TanhLayer",
    "Tensor",
    "adapt",
    "apply_shift",
    "bnm_loss",
    "build_mlp",
    "ce_smooth_loss",
    "channel_moments",
    "evaluate",
    "gaussian_sample",
    "im_loss",
    "joint_loss",
    "load_csv",
    "make_blobs",
    "make_rng",
    "matmul",
    "pretrain",
    "split_and_freeze",
]
