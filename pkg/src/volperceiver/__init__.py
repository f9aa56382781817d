"""Perceiver segmentation of stacked multimodal rasters with volumetric preprocessing.

Everything runs on a small numpy autodiff core (:mod:`volperceiver.tensor`).
"""
from .data import MultimodalScene, SplitSpec, TileSample, stack_modalities, synth_dataset, tile_scene
from .metrics import MetricsReport, confusion_matrix
from .model import SegmentationModel
from .objectives import dice_loss, joint_loss, soft_ce_loss
from .perceiver import Perceiver, PerceiverConfig
from .preprocess import PreprocessorKind
from .tensor import Tensor, backward, gradcheck
from .train import RunRecord, TrainConfig, compare_preprocessors, evaluate, train

__version__ = "0.1.0"
