from .tensor import (
    Graph,
    Tensor,
    backward,
    checked,
    checked_mode,
    set_checked,
    zero_grads,
)
from . import ops
from .optim import AdamW
from .checkpoint import load_into, load_params, save_params

__all__ = [
    "AdamW",
    "Graph",
    "Tensor",
    "backward",
    "checked",
    "checked_mode",
    "load_into",
    "load_params",
    "ops",
    "save_params",
    "set_checked",
    "zero_grads",
]
