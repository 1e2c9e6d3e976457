"""Patch-based 3D convolutional classifier, built directly on numpy.

Submodules:

* arch        descriptor grammar, layer specs, shape inference
* model       parameter init, forward, backward
* loss        masked cross-entropy over the predicted-or-true foreground
* optim       Adam
* train       epoch loop, validation, best-checkpoint selection
* checkpoint  versioned binary serialization
"""

from .arch import (
    Conv3D,
    Dense,
    Dropout,
    Flatten,
    MaxPool2x2,
    NetSpec,
    OutputDense,
    infer_shapes,
    parse_arch,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .loss import loss_masked_ce, masked_ce_logit_grad
from .model import backward, forward, init_params
from .optim import AdamState, adam_step, init_adam
from .train import TrainConfig, train, write_trace_csv

__all__ = [
    "Conv3D", "Dense", "Dropout", "Flatten", "MaxPool2x2", "NetSpec",
    "OutputDense", "infer_shapes", "parse_arch",
    "init_params", "forward", "backward",
    "loss_masked_ce", "masked_ce_logit_grad",
    "AdamState", "adam_step", "init_adam",
    "TrainConfig", "train", "write_trace_csv",
    "save_checkpoint", "load_checkpoint",
]
