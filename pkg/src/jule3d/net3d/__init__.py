"""3D patch network: layers, parameters, training and checkpoints."""

from .checkpoint import load_checkpoint, save_checkpoint
from .network import (FEATURE_DIM, PATCH_SIZE, NetParams, TrainConfig, TrainState,
                      forward_features, init_params, sgd_step, train_epochs)

__all__ = ["FEATURE_DIM", "PATCH_SIZE", "NetParams", "TrainConfig", "TrainState",
           "forward_features", "init_params", "load_checkpoint", "save_checkpoint",
           "sgd_step", "train_epochs"]
