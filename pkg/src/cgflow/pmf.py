"""PMF estimation from conditional flow samples and the uncertainty ensemble."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .nnkernel import (
    Adam,
    MlpParams,
    Scaler,
    init_default,
    init_gaussian,
    mlp_backward,
    mlp_forward,
    mlp_forward_cache,
    scaler_fit,
)


class NoSupportError(ValueError):
    pass


@dataclass
class PmfPointEstimate:
    value: float
    n_samples: int
    n_clipped: int


def _usable(energies, log_q):
    energies = np.asarray(energies, dtype=float).reshape(-1)
    log_q = np.asarray(log_q, dtype=float).reshape(-1)
    if energies.shape != log_q.shape:
        raise ValueError("energies and log_q must have the same length")
    # NaN marks an unvisited slot; +inf energy is a legal zero-weight sample
    ok = ~np.isnan(energies) & np.isfinite(log_q)
    return energies[ok], log_q[ok]


def log_weights(energies, log_q, beta):
    """``l_i = -beta E_i - log q_i``, the log of the importance ratio per sample."""
    e, q = _usable(energies, log_q)
    with np.errstate(invalid="ignore"):
        return -beta * e - q


def clip_top(l, n_clip):
    """Clip the ``n_clip`` largest entries down to the smallest value among them."""
    l = np.array(l, dtype=float)
    if n_clip <= 0 or l.size == 0:
        return l, 0
    n_clip = min(n_clip, l.size)
    order = np.argsort(l, kind="stable")
    top = order[-n_clip:]
    l[top] = l[top].min()
    return l, n_clip


def pmf_estimate(energies, log_q, beta, n_clip=0) -> PmfPointEstimate:
    """``U(s) = -(1/beta) ln mean_i exp(-beta E_i) / q_i`` over samples at one ``s``."""
    l = log_weights(energies, log_q, beta)
    if l.size == 0 or not np.any(np.isfinite(l)):
        raise NoSupportError("no support at s: no finite samples")
    l, n_clipped = clip_top(l, n_clip)
    value = -(logsumexp(l) - np.log(l.size)) / beta
    return PmfPointEstimate(float(value), int(l.size), n_clipped)


def pmf_estimate_alt(energies, log_q, beta) -> PmfPointEstimate:
    """``U(s) = mean_i [E_i + (1/beta) log q_i]`` (energy plus entropy form)."""
    e, q = _usable(energies, log_q)
    g = e + q / beta
    g = g[np.isfinite(g)]
    if g.size == 0:
        raise NoSupportError("no support at s: no finite samples")
    return PmfPointEstimate(float(g.mean()), int(g.size), 0)


def pmf_targets(energies, log_q, beta, n_clip=0, mask=None):
    """Per-configuration PMF values from copy records of shape ``(n_cfg, k)``.

    ``mask`` selects which copies contribute. Rows without support yield NaN.
    """
    energies = np.asarray(energies, dtype=float)
    log_q = np.asarray(log_q, dtype=float)
    out = np.full(energies.shape[0], np.nan)
    for i in range(energies.shape[0]):
        sel = slice(None) if mask is None else mask[i]
        try:
            out[i] = pmf_estimate(energies[i, sel], log_q[i, sel], beta, n_clip).value
        except NoSupportError:
            pass
    return out


class PmfEnsemble:
    """Independently initialized MLP regressors evaluated as one stacked network.

    Models are trained on targets divided by ``unit`` (use ``kT = 1/beta`` so
    the networks see values in kT); ``predict`` returns energies.
    """

    def __init__(self, params: MlpParams, scaler: Scaler, unit=1.0, nus=None):
        self.params = params
        self.scaler = scaler
        self.unit = float(unit)
        self.nus = None if nus is None else np.asarray(nus, dtype=float)

    @property
    def n_models(self):
        return self.params.batch_shape[0]

    def predict_all(self, s):
        s = np.asarray(s, dtype=float)
        if s.ndim <= 1:
            s = s.reshape(-1, self.params.dims[0])
        out = mlp_forward(self.params, self.scaler.apply(s)[None, :, :])
        return out[..., 0] * self.unit  # (n_models, n_points)

    def predict(self, s):
        """Ensemble mean and population standard deviation at each point."""
        vals = self.predict_all(s)
        return vals.mean(axis=0), vals.std(axis=0)

    def save(self, path):
        np.savez(
            path,
            dims=np.asarray(self.params.dims),
            flat=self.params.flat,
            scaler_mean=self.scaler.mean,
            scaler_std=self.scaler.std,
            unit=np.array(self.unit),
            nus=np.zeros(0) if self.nus is None else self.nus,
        )

    @classmethod
    def load(cls, path):
        with np.load(path) as d:
            params = MlpParams(tuple(int(v) for v in d["dims"]), d["flat"].copy())
            scaler = Scaler(d["scaler_mean"].copy(), d["scaler_std"].copy())
            nus = d["nus"].copy()
            return cls(params, scaler, float(d["unit"]), nus if nus.size else None)


@dataclass
class EnsembleConfig:
    n_models: int = 10
    hidden: tuple = (64, 64)
    nu_range: tuple = (0.1, 3.0)
    lr: float = 1e-3
    batch_size: int = 5
    epochs: int = 1000
    bootstrap: str = "bagging"  # or "split" for a per-model 80/20 split
    split_frac: float = 0.8


def _draw_member_indices(n, cfg: EnsembleConfig, rng):
    if cfg.bootstrap == "bagging":
        return rng.integers(0, n, size=(cfg.n_models, n))
    if cfg.bootstrap == "split":
        n_train = max(1, int(round(cfg.split_frac * n)))
        return np.stack([rng.permutation(n)[:n_train] for _ in range(cfg.n_models)])
    raise ValueError(f"unknown bootstrap mode {cfg.bootstrap!r}")


def ensemble_train(s, targets, cfg: EnsembleConfig, rng, unit=1.0) -> PmfEnsemble:
    """Train a fresh ensemble with MSE on bootstrap resamples of ``(s, targets)``.

    All models advance in lock-step, one mini-batch per model per step, which
    keeps the arithmetic vectorized over the ensemble.
    """
    s = np.asarray(s, dtype=float)
    if s.ndim <= 1:
        s = s.reshape(-1, 1)
    y = np.asarray(targets, dtype=float).reshape(-1) / unit
    if s.shape[0] != y.shape[0]:
        raise ValueError("s and targets must have the same length")
    if s.shape[0] < 2 or np.unique(s, axis=0).shape[0] < 2:
        raise ValueError("need at least two distinct training points")
    if not np.all(np.isfinite(y)):
        raise ValueError("targets must be finite")

    scaler = scaler_fit(s)
    xs = scaler.apply(s)
    dims = (s.shape[1], *cfg.hidden, 1)
    nus = rng.uniform(cfg.nu_range[0], cfg.nu_range[1], size=cfg.n_models)
    params = init_gaussian(dims, nus, rng, batch_shape=(cfg.n_models,))
    members = _draw_member_indices(s.shape[0], cfg, rng)
    n_per = members.shape[1]
    opt = Adam([params.flat], lr=cfg.lr)
    grads = params.zeros_like()
    model_ax = np.arange(cfg.n_models)[:, None]

    for _ in range(cfg.epochs):
        perm = rng.permuted(np.broadcast_to(np.arange(n_per), members.shape), axis=1)
        order = members[model_ax, perm]
        for start in range(0, n_per, cfg.batch_size):
            idx = order[:, start : start + cfg.batch_size]
            xb = xs[idx]
            yb = y[idx]
            out, acts = mlp_forward_cache(params, xb)
            resid = out[..., 0] - yb
            up = (2.0 / idx.shape[1]) * resid[..., None]
            mlp_backward(params, acts, up, grads)
            opt.step([grads.flat])
    return PmfEnsemble(params, scaler, unit, nus)


def ensemble_mse(ensemble: PmfEnsemble, s, targets):
    vals = ensemble.predict_all(s)
    return ((vals - np.asarray(targets)[None, :]) ** 2).mean(axis=1)


def surrogate_fit(s, g_values, rng, hidden=(32, 32), epochs=200, lr=1e-2, batch_size=256, params=None):
    """Fit ``H(s)`` by MSE directly on per-sample values ``G(s, z)`` (no contraction over z).

    Returns ``(params, scaler)``; evaluate with ``mlp_forward(params, scaler.apply(s))``.
    """
    s = np.asarray(s, dtype=float)
    if s.ndim <= 1:
        s = s.reshape(-1, 1)
    g = np.asarray(g_values, dtype=float).reshape(-1)
    if not np.all(np.isfinite(g)):
        raise ValueError("surrogate targets must be finite")
    scaler = scaler_fit(s)
    xs = scaler.apply(s)
    if params is None:
        params = init_default((s.shape[1], *hidden, 1), rng)
    opt = Adam([params.flat], lr=lr)
    grads = params.zeros_like()
    n = s.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            out, acts = mlp_forward_cache(params, xs[idx])
            up = (2.0 / len(idx)) * (out[:, 0] - g[idx])[:, None]
            mlp_backward(params, acts, up, grads)
            opt.step([grads.flat])
    return params, scaler


def surrogate_decomposition(g, h, g_expect):
    """Split the MSE ``<(G - H)^2>`` into noise, expectation and mixed terms.

    ``g`` are per-sample values ``G(s, z)``, ``h`` the model prediction at each
    sample's ``s`` and ``g_expect`` the conditional expectation ``<G>_z`` at
    that ``s``. The three terms sum to the total exactly.
    """
    g = np.asarray(g, dtype=float)
    h = np.asarray(h, dtype=float)
    gbar = np.asarray(g_expect, dtype=float)
    noise = np.mean((g - gbar) ** 2)
    expectation = np.mean((gbar - h) ** 2)
    mixed = 2.0 * np.mean((g - gbar) * (gbar - h))
    total = np.mean((g - h) ** 2)
    return {"total": total, "noise": noise, "expectation": expectation, "mixed": mixed}
