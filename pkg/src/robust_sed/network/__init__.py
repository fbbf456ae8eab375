"""Context-adaptive convolutional detector with hand-written backpropagation."""

from .model import (
    DESK_GEOMETRY, FULL_GEOMETRY, GEOMETRIES, DetectorParams, Formulation, Geometry,
    accuracy, bce_loss, equivalent_threshold, forward, forward_aux, forward_main,
    init_params, loss_and_grads, merge_at, merge_aw, merge_moe, merge_static, moe_gates,
    predict, sigmoid, tensor_shapes,
)
from .optim import AdamState, adam_step
from .training import (
    ClipDataset, TrainConfig, TrainingHistory, evaluate, normalize_inputs, train,
)

__all__ = [
    "DESK_GEOMETRY", "FULL_GEOMETRY", "GEOMETRIES", "DetectorParams", "Formulation",
    "Geometry", "accuracy", "bce_loss", "equivalent_threshold", "forward", "forward_aux",
    "forward_main", "init_params", "loss_and_grads", "merge_at", "merge_aw", "merge_moe",
    "merge_static", "moe_gates", "predict", "sigmoid", "tensor_shapes", "AdamState",
    "adam_step", "ClipDataset", "TrainConfig", "TrainingHistory", "evaluate",
    "normalize_inputs", "train",
]
