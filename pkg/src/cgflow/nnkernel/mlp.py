"""Dense feed-forward networks with sigmoid hidden layers and exact backprop.

Parameters live in one contiguous buffer (``MlpParams.flat``) and the weight
and bias arrays are views into it, so optimizers and gradient clipping can act
on a single vector. A leading batch shape on the buffer stacks independent
networks (used by the PMF ensemble); all routines broadcast over it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def sigmoid(a):
    # tanh form: no overflow, and saturates to exact 0/1 instead of denormals
    out = np.tanh(0.5 * a)
    out *= 0.5
    out += 0.5
    return out


def _layout(dims):
    offsets = []
    off = 0
    for n_in, n_out in zip(dims[:-1], dims[1:]):
        offsets.append((off, off + n_in * n_out, off + n_in * n_out + n_out))
        off += n_in * n_out + n_out
    return offsets, off


def n_params(dims) -> int:
    return _layout(tuple(dims))[1]


@dataclass
class MlpParams:
    """Weights and biases of an MLP, stored as views into ``flat``.

    ``flat`` has shape ``batch_shape + (n_params,)``; ``weights[i]`` has shape
    ``batch_shape + (dims[i], dims[i+1])``.
    """

    dims: tuple
    flat: np.ndarray
    weights: list = field(init=False, repr=False)
    biases: list = field(init=False, repr=False)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) < 2:
            raise ValueError("an MLP needs at least input and output dims")
        offsets, total = _layout(self.dims)
        if self.flat.shape[-1] != total:
            raise ValueError(f"flat buffer has {self.flat.shape[-1]} entries, dims {self.dims} need {total}")
        bs = self.flat.shape[:-1]
        self.weights, self.biases = [], []
        for (a, b, c), n_in, n_out in zip(offsets, self.dims[:-1], self.dims[1:]):
            w = self.flat[..., a:b].reshape(bs + (n_in, n_out))
            bias = self.flat[..., b:c]
            self.weights.append(w)
            self.biases.append(bias)

    @classmethod
    def zeros(cls, dims, batch_shape=()) -> "MlpParams":
        return cls(tuple(dims), np.zeros(tuple(batch_shape) + (n_params(dims),)))

    @property
    def batch_shape(self):
        return self.flat.shape[:-1]

    def copy(self) -> "MlpParams":
        return MlpParams(self.dims, self.flat.copy())

    def zeros_like(self) -> "MlpParams":
        return MlpParams(self.dims, np.zeros_like(self.flat))


def init_gaussian(dims, nu, rng, batch_shape=()) -> MlpParams:
    """Draw every weight and bias from Normal(0, nu**2).

    ``nu`` may be an array broadcastable to ``batch_shape`` to give each
    stacked network its own scale.
    """
    params = MlpParams.zeros(dims, batch_shape)
    nu = np.asarray(nu, dtype=float)
    if np.any(nu < 0):
        raise ValueError("nu must be non-negative")
    noise = rng.standard_normal(params.flat.shape)
    params.flat[...] = noise * nu[..., None]
    return params


def init_default(dims, rng, batch_shape=(), zero_last=False) -> MlpParams:
    """Gaussian init with per-layer std 1/sqrt(fan_in); biases start at zero."""
    params = MlpParams.zeros(dims, batch_shape)
    for i, w in enumerate(params.weights):
        if zero_last and i == len(params.weights) - 1:
            continue
        w[...] = rng.standard_normal(w.shape) / np.sqrt(w.shape[-2])
    return params


def _check_input(params, x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[-1] != params.dims[0]:
        raise ValueError(f"input has {x.shape[-1]} features, network expects {params.dims[0]}")
    return x


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    """Evaluate the network on ``x`` of shape ``(..., batch, dims[0])``."""
    return mlp_forward_cache(params, x)[0]


def mlp_forward_cache(params: MlpParams, x):
    x = _check_input(params, x)
    acts = [x]
    h = x
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        a = h @ w + b[..., None, :]
        h = a if i == n_layers - 1 else sigmoid(a)
        acts.append(h)
    return h, acts


def mlp_backward(params: MlpParams, acts, upstream, grads: MlpParams | None = None):
    """Backpropagate ``upstream`` = dL/d(output) through a cached forward pass.

    Returns ``(param_grads, input_grad)``. If ``grads`` is given the parameter
    gradients are written into it (overwriting).
    """
    g = np.asarray(upstream, dtype=float)
    if g.shape != acts[-1].shape:
        raise ValueError(f"upstream shape {g.shape} does not match output shape {acts[-1].shape}")
    if grads is None:
        grads = MlpParams(params.dims, np.zeros(params.batch_shape + (params.flat.shape[-1],)))
    n_layers = len(params.weights)
    for i in range(n_layers - 1, -1, -1):
        if i < n_layers - 1:
            h = acts[i + 1]
            g = g * h * (1.0 - h)
        h_in = acts[i]
        gw = np.swapaxes(h_in, -1, -2) @ g
        gb = g.sum(axis=-2)
        # input gradient may carry extra leading batch dims; reduce onto param shape
        grads.weights[i][...] = _reduce_to(gw, grads.weights[i].shape)
        grads.biases[i][...] = _reduce_to(gb, grads.biases[i].shape)
        g = g @ np.swapaxes(params.weights[i], -1, -2)
    return grads, g


def _reduce_to(a, shape):
    while a.ndim > len(shape):
        a = a.sum(axis=0)
    return a


def mlp_grad(params: MlpParams, x, upstream):
    """Gradients of ``sum(upstream * mlp_forward(params, x))`` wrt params and input."""
    _, acts = mlp_forward_cache(params, x)
    up = np.asarray(upstream, dtype=float)
    if up.ndim == 1:
        up = up[None, :]
    return mlp_backward(params, acts, up)


def save_params(path, params: MlpParams):
    np.savez(path, dims=np.asarray(params.dims), flat=params.flat)


def load_params(path) -> MlpParams:
    with np.load(path) as data:
        return MlpParams(tuple(int(d) for d in data["dims"]), data["flat"].copy())
