"""Keypoint-to-pose transformer: tokens, network, loss, training and checkpoints."""
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ABLATION_CONFIGS, ModelConfig
from .loss import composite_loss, loss, loss_and_grad, make_targets
from .network import backward, forward, init_params, param_shapes
from .tokens import tokenize, tokenize_arrays, tokenize_records
from .train import Adam, TrainHyper, TrainResult, decode_poses, evaluate_mpvpe, predict, train

__all__ = [
    "ABLATION_CONFIGS", "Adam", "ModelConfig", "TrainHyper", "TrainResult", "backward",
    "composite_loss", "decode_poses", "evaluate_mpvpe", "forward", "init_params", "load_checkpoint",
    "loss", "loss_and_grad", "make_targets", "param_shapes", "predict", "save_checkpoint",
    "tokenize", "tokenize_arrays", "tokenize_records", "train",
]
