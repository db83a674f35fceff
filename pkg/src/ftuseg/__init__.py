"""Tiny from-scratch segmentation stack for auxiliary-loss scheduling studies."""

from .config import RunConfig, load_config
from .data import Domain, Organ, Sample, generate_dataset, generate_synthetic_sample
from .harness import Trainer, compare_regimes, eval_run, infer_run, train_run
from .inference import ThresholdTable, rle_decode, rle_encode, threshold_mask, tta_predict
from .losses import LossBreakdown, bce_with_logits, composite_loss, dice_score
from .model import EncoderConfig, SegModel, load_checkpoint, save_checkpoint
from .schedule import OptState, Regime, adam_step, aux_stage_for_epoch, plateau_step
from .tensor import Tensor, finite_diff_grad

__version__ = "0.1.0"

__all__ = [
    "Domain",
    "EncoderConfig",
    "LossBreakdown",
    "OptState",
    "Organ",
    "Regime",
    "RunConfig",
    "Sample",
    "SegModel",
    "Tensor",
    "ThresholdTable",
    "Trainer",
    "adam_step",
    "aux_stage_for_epoch",
    "bce_with_logits",
    "compare_regimes",
    "composite_loss",
    "dice_score",
    "eval_run",
    "finite_diff_grad",
    "generate_dataset",
    "generate_synthetic_sample",
    "infer_run",
    "load_checkpoint",
    "load_config",
    "plateau_step",
    "rle_decode",
    "rle_encode",
    "save_checkpoint",
    "threshold_mask",
    "train_run",
    "tta_predict",
]
