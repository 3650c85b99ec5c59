from .mlp import (
    MlpParams,
    init_default,
    init_gaussian,
    load_params,
    mlp_backward,
    mlp_forward,
    mlp_forward_cache,
    mlp_grad,
    n_params,
    save_params,
    sigmoid,
)
from .optim import Adam, clip_grad_norm, global_norm
from .scaler import Scaler, scaler_fit

__all__ = [
    "Adam",
    "MlpParams",
    "Scaler",
    "clip_grad_norm",
    "global_norm",
    "init_default",
    "init_gaussian",
    "load_params",
    "mlp_backward",
    "mlp_forward",
    "mlp_forward_cache",
    "mlp_grad",
    "n_params",
    "save_params",
    "scaler_fit",
    "sigmoid",
]
