from . import tensor
from .gradcheck import grad_check
from .layers import (
    attention_block,
    causal_mask,
    dense,
    forward_mlp,
    init_attention,
    init_dense,
    init_layernorm,
    init_mlp,
    init_transformer,
    init_transformer_block,
    layernorm,
    transformer,
    transformer_block,
)
from .optim import AdamState, adam_step, polyak_update
from .params import (
    CheckpointError,
    ParamSet,
    load_arrays,
    save_arrays,
)
from .tensor import (
    ContractError,
    DimensionError,
    NumericError,
    Tensor,
    no_grad,
)

__all__ = [
    "AdamState",
    "CheckpointError",
    "ContractError",
    "DimensionError",
    "NumericError",
    "ParamSet",
    "Tensor",
    "adam_step",
    "attention_block",
    "causal_mask",
    "dense",
    "forward_mlp",
    "grad_check",
    "init_attention",
    "init_dense",
    "init_layernorm",
    "init_mlp",
    "init_transformer",
    "init_transformer_block",
    "layernorm",
    "load_arrays",
    "no_grad",
    "polyak_update",
    "save_arrays",
    "tensor",
    "transformer",
    "transformer_block",
]
