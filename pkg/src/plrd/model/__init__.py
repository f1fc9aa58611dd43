from ..graph import LayerSpec, ModelGraph, ModuleKind, desk_graph, toy_graph
from .checkpoint import FORMAT_VERSION, Checkpoint, file_digest, load, save
from .surgery import apply_plan_step, count_params, densify, factor_slots
from .transformer import (
    forward,
    init_checkpoint,
    loss_and_grads,
    token_nll,
    zero_checkpoint,
)

__all__ = [
    "FORMAT_VERSION",
    "Checkpoint",
    "LayerSpec",
    "ModelGraph",
    "ModuleKind",
    "apply_plan_step",
    "count_params",
    "densify",
    "desk_graph",
    "factor_slots",
    "file_digest",
    "forward",
    "init_checkpoint",
    "load",
    "loss_and_grads",
    "save",
    "toy_graph",
    "token_nll",
    "zero_checkpoint",
]
