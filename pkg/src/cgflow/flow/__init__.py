import numpy as np

from .affine import CondAffineFlow
from .base import ConditionalFlow, std_normal_log_prob
from .spline import SplineCouplingFlow, rq_spline
from .training import (
    FlowLeftSupportError,
    TrainResult,
    energy_step,
    evaluate_energy_loss,
    nll_and_grads,
    select_kept,
    train_by_energy,
    train_by_example,
)


def load_flow(path) -> ConditionalFlow:
    with np.load(path) as st:
        st = dict(st)
    kind = str(st["kind"])
    if kind == "affine":
        return CondAffineFlow.from_state(st)
    if kind == "spline":
        return SplineCouplingFlow.from_state(st)
    raise ValueError(f"unknown flow kind {kind!r}")


__all__ = [
    "CondAffineFlow",
    "ConditionalFlow",
    "FlowLeftSupportError",
    "SplineCouplingFlow",
    "TrainResult",
    "energy_step",
    "evaluate_energy_loss",
    "load_flow",
    "nll_and_grads",
    "rq_spline",
    "select_kept",
    "std_normal_log_prob",
    "train_by_energy",
    "train_by_example",
]
