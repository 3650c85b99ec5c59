"""Training conditional flows by example (forward KLD) and by energy (reverse KLD)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..nnkernel import Adam, clip_grad_norm, tape
from .base import LOG_2PI, ConditionalFlow, as_rows, std_normal_log_prob

logger = logging.getLogger(__name__)


class FlowLeftSupportError(RuntimeError):
    pass


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    dropped: int = 0
    grad_norm: float = 0.0
    iteration: int | None = None

    def to_dict(self):
        return {
            "iteration": self.iteration,
            "epoch": self.epoch,
            "mean_loss": self.mean_loss,
            "dropped": self.dropped,
            "grad_norm": self.grad_norm,
        }


@dataclass
class TrainResult:
    epochs: list = field(default_factory=list)
    n_energy: int = 0

    @property
    def losses(self):
        return [e.mean_loss for e in self.epochs]


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def nll_and_grads(flow: ConditionalFlow, x_fg, s):
    """Mean negative log-likelihood of a batch and its parameter gradients."""
    pv = flow.param_vars()
    z, ld = flow._normalize(tape.Var(x_fg), flow.scale_cond(s), pv)
    d = z.shape[-1]
    logp = -0.5 * tape.sum_(tape.square(z), axis=-1) - 0.5 * d * LOG_2PI + ld
    loss = -tape.sum_(logp) / float(x_fg.shape[0])
    tape.backward(loss)
    return float(loss.value), [v.grad if v.grad is not None else np.zeros_like(v.value) for v in pv]


def train_by_example(
    flow: ConditionalFlow,
    x_fg,
    s,
    *,
    epochs,
    lr,
    batch_size,
    rng,
    clip_norm=None,
    optimizer=None,
    iteration=None,
) -> TrainResult:
    """Minimize ``-mean log q(x_fg | s)`` over samples from the target."""
    x_fg = as_rows(x_fg, flow.dim_fg)
    s = as_rows(s, flow.dim_cg)
    if x_fg.shape[0] == 0:
        raise ValueError("no samples to train on")
    opt = optimizer or Adam(flow.parameters(), lr=lr)
    result = TrainResult()
    for epoch in range(epochs):
        total, count, norm = 0.0, 0, 0.0
        for idx in _batches(x_fg.shape[0], batch_size, rng):
            loss, grads = nll_and_grads(flow, x_fg[idx], s[idx])
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite training loss {loss} in epoch {epoch}")
            if clip_norm is not None:
                norm = clip_grad_norm(grads, clip_norm)
            opt.step(grads)
            total += loss * len(idx)
            count += len(idx)
        result.epochs.append(EpochLog(epoch, total / count, 0, norm, iteration))
    return result


def select_kept(losses, n_drop):
    """Mask of samples kept after removing +inf/NaN and the ``n_drop`` largest losses."""
    keep = np.isfinite(losses)
    n_finite = int(keep.sum())
    n_remove = min(n_drop, max(n_finite - 1, 0))
    if n_remove > 0:
        finite_idx = np.flatnonzero(keep)
        worst = finite_idx[np.argsort(losses[finite_idx], kind="stable")[-n_remove:]]
        keep[worst] = False
    return keep


def energy_step(flow: ConditionalFlow, system, s, z, n_drop):
    """One reverse-KLD gradient evaluation on a batch.

    Per sample ``loss_i = beta E(x(g(z_i; s_i), s_i)) - log|det dg/dz|``. Samples
    with non-finite loss and the ``n_drop`` highest losses are dropped before
    averaging. Returns ``(mean kept loss, grads, energies, log_q, n_dropped)``.
    """
    pv = flow.param_vars()
    x, ld = flow._generate(tape.Var(z), flow.scale_cond(s), pv)
    energy, grad_e = system.energy_and_grad_fg(x.value, s)
    energy = np.asarray(energy, dtype=float)
    beta = system.beta
    with np.errstate(invalid="ignore"):
        losses = beta * energy - ld.value
    keep = select_kept(losses, n_drop)
    n_kept = int(keep.sum())
    log_q = std_normal_log_prob(z) - ld.value
    if n_kept == 0:
        raise FlowLeftSupportError("flow left support: every sample in the batch has infinite energy")
    w = keep / n_kept
    e_val = np.where(keep, beta * energy, 0.0)
    ge = np.where(keep[:, None], beta * grad_e, 0.0)
    e_var = tape.custom(e_val, (x,), lambda g: (g[:, None] * ge,))
    loss = tape.sum_(tape.Var(w) * (e_var - ld))
    tape.backward(loss)
    grads = [v.grad if v.grad is not None else np.zeros_like(v.value) for v in pv]
    return float(loss.value), grads, energy, log_q, len(z) - n_kept


def train_by_energy(
    flow: ConditionalFlow,
    system,
    conditions,
    *,
    epochs,
    lr,
    batch_size,
    rng,
    n_drop=0,
    clip_norm=None,
    ids=None,
    replay=None,
    record=None,
    optimizer=None,
    iteration=None,
    lr_schedule=None,
) -> TrainResult:
    """Reverse-KLD training conditioned on ``conditions`` (one row per sample slot).

    ``replay(epoch)`` may return extra ``(conditions, ids)`` appended for that
    epoch. ``record(ids, energies, log_q)`` receives the latest evaluation of
    every slot visited. ``lr_schedule(epoch)`` overrides the learning rate.
    """
    conditions = as_rows(conditions, flow.dim_cg)
    if conditions.shape[0] == 0:
        raise ValueError("no conditions to train on")
    if n_drop >= batch_size:
        raise ValueError("n_drop must be smaller than the batch size")
    ids = np.arange(conditions.shape[0]) if ids is None else np.asarray(ids)
    opt = optimizer or Adam(flow.parameters(), lr=lr)
    result = TrainResult()
    for epoch in range(epochs):
        if lr_schedule is not None:
            opt.lr = lr_schedule(epoch)
        conds, eids = conditions, ids
        if replay is not None:
            extra_c, extra_ids = replay(epoch)
            if len(extra_ids):
                conds = np.concatenate([conds, as_rows(extra_c, flow.dim_cg)])
                eids = np.concatenate([eids, np.asarray(extra_ids)])
        total, count, dropped, norm = 0.0, 0, 0, 0.0
        for idx in _batches(conds.shape[0], batch_size, rng):
            s = conds[idx]
            z = rng.standard_normal((len(idx), flow.dim_fg))
            loss, grads, energy, log_q, n_dropped = energy_step(flow, system, s, z, n_drop)
            result.n_energy += len(idx)
            if record is not None:
                record(eids[idx], energy, log_q)
            if clip_norm is not None:
                norm = clip_grad_norm(grads, clip_norm)
            opt.step(grads)
            total += loss * (len(idx) - n_dropped)
            count += len(idx) - n_dropped
            dropped += n_dropped
        result.epochs.append(EpochLog(epoch, total / max(count, 1), dropped, norm, iteration))
        logger.debug("energy epoch %d loss %.4f dropped %d", epoch, total / max(count, 1), dropped)
    return result


def evaluate_energy_loss(flow: ConditionalFlow, system, conditions, rng, batch_size=4096):
    """Sample once per condition; returns ``(losses, energies, log_q)`` without training."""
    conditions = as_rows(conditions, flow.dim_cg)
    out_l, out_e, out_q = [], [], []
    for i in range(0, conditions.shape[0], batch_size):
        s = conditions[i : i + batch_size]
        x, log_q, z = flow.sample(s, rng)
        e = np.asarray(system.energy_fg(x, s), dtype=float)
        with np.errstate(invalid="ignore"):
            out_l.append(system.beta * e + log_q - std_normal_log_prob(z))
        out_e.append(e)
        out_q.append(log_q)
    if not out_l:
        return np.zeros(0), np.zeros(0), np.zeros(0)
    return np.concatenate(out_l), np.concatenate(out_e), np.concatenate(out_q)
