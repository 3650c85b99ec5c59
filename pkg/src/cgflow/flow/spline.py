"""Monotone rational-quadratic spline coupling flow with linear tails.

Each coupling layer leaves the masked-out coordinates unchanged and pushes the
others through an elementwise RQ spline on ``[-B, B]`` (identity outside),
whose bin widths, heights and knot derivatives come from an MLP applied to the
unchanged coordinates concatenated with the scaled condition.
"""

from __future__ import annotations

import numpy as np

from ..nnkernel import MlpParams, Scaler, init_default, tape
from .base import ConditionalFlow

MIN_BIN_WIDTH = 1e-3
MIN_BIN_HEIGHT = 1e-3
MIN_DERIVATIVE = 1e-3
# softplus(0 + shift) + MIN_DERIVATIVE == 1, so zero parameters give the identity
_DERIV_SHIFT = float(np.log(np.expm1(1.0 - MIN_DERIVATIVE)))


def _knots(unnormalized, bound, min_size):
    k = unnormalized.shape[-1]
    sizes = min_size + (1.0 - min_size * k) * tape.softmax(unnormalized)
    cum = tape.cumsum(sizes)
    cum = tape.pad_last(tape.getitem(cum, (Ellipsis, slice(0, k - 1))), 0.0, 1.0)
    knots = 2.0 * bound * cum - bound
    sizes = tape.getitem(knots, (Ellipsis, slice(1, None))) - tape.getitem(knots, (Ellipsis, slice(0, k)))
    return knots, sizes


def _bin_index(knots, v):
    inner = knots[..., 1:-1]
    return np.sum(v[..., None] >= inner, axis=-1)


def rq_spline(x, uw, uh, ud, bound, inverse=False):
    """Elementwise RQ spline. ``x`` is a tape Var of shape ``(...)``; ``uw``/``uh``
    have a trailing axis of K bins and ``ud`` of K - 1 interior derivatives.

    Returns ``(y, logdet)`` with ``logdet`` elementwise for the direction taken.
    """
    x = tape.const(x)
    xv = x.value
    inside = np.abs(xv) < bound
    x_in = tape.where(inside, x, 0.0)

    knots_x, widths = _knots(uw, bound, MIN_BIN_WIDTH)
    knots_y, heights = _knots(uh, bound, MIN_BIN_HEIGHT)
    derivs = tape.pad_last(MIN_DERIVATIVE + tape.softplus(ud + _DERIV_SHIFT), 1.0, 1.0)

    search = knots_y.value if inverse else knots_x.value
    idx = _bin_index(search, np.where(inside, xv, 0.0))

    xk = tape.gather(knots_x, idx)
    yk = tape.gather(knots_y, idx)
    wk = tape.gather(widths, idx)
    hk = tape.gather(heights, idx)
    dk = tape.gather(derivs, idx)
    dk1 = tape.gather(derivs, idx + 1)
    sk = hk / wk
    curv = dk1 + dk - 2.0 * sk

    if inverse:
        dy = x_in - yk
        a = dy * curv + hk * (sk - dk)
        b = hk * dk - dy * curv
        c = -sk * dy
        disc = tape.square(b) - 4.0 * a * c
        xi = 2.0 * c / (-b - tape.sqrt(disc))
        out = xi * wk + xk
    else:
        xi = (x_in - xk) / wk

    xi1 = xi - tape.square(xi)  # xi * (1 - xi)
    den = sk + curv * xi1
    dnum = tape.square(sk) * (dk1 * tape.square(xi) + 2.0 * sk * xi1 + dk * tape.square(1.0 - xi))
    log_deriv = tape.log(dnum) - 2.0 * tape.log(den)

    if inverse:
        logdet = -log_deriv
    else:
        out = yk + hk * (sk * tape.square(xi) + dk * xi1) / den
        logdet = log_deriv
    y = tape.where(inside, out, x)
    logdet = tape.where(inside, logdet, 0.0)
    return y, logdet


class SplineCouplingFlow(ConditionalFlow):
    def __init__(self, nets, masks, scaler: Scaler, dim_cg, n_bins=8, bound=5.0):
        self.nets = list(nets)
        self.masks = [np.asarray(m, dtype=bool) for m in masks]
        self.scaler = scaler
        self.dim_cg = int(dim_cg)
        self.dim_fg = self.masks[0].size
        self.n_bins = int(n_bins)
        self.bound = float(bound)
        for net, m in zip(self.nets, self.masks):
            n_tr = int(m.sum())
            if net.dims[0] != m.size - n_tr + self.dim_cg or net.dims[-1] != n_tr * (3 * self.n_bins - 1):
                raise ValueError("parameter network dims do not match mask and bin count")

    @classmethod
    def create(cls, rng, dim_fg, dim_cg=1, n_layers=6, n_bins=8, bound=5.0, hidden=(128, 128), scaler=None):
        if dim_fg < 2:
            raise ValueError("coupling layers need at least two fine-grained dimensions")
        masks = []
        for i in range(n_layers):
            if i % 2 == 0:
                m = np.zeros(dim_fg, dtype=bool)
                m[rng.permutation(dim_fg)[: dim_fg // 2]] = True
            else:
                m = ~masks[-1]
            masks.append(m)
        nets = []
        for m in masks:
            n_tr = int(m.sum())
            dims = (dim_fg - n_tr + dim_cg, *hidden, n_tr * (3 * n_bins - 1))
            nets.append(init_default(dims, rng, zero_last=True))
        if scaler is None:
            scaler = Scaler(np.zeros(dim_cg), np.ones(dim_cg))
        return cls(nets, masks, scaler, dim_cg, n_bins, bound)

    def parameters(self):
        return [n.flat for n in self.nets]

    def _coupling(self, x, s_scaled, i, pvar, inverse):
        m = self.masks[i]
        tr = np.flatnonzero(m)
        keep = np.flatnonzero(~m)
        perm = np.argsort(np.concatenate([keep, tr]))
        x_keep = tape.getitem(x, (slice(None), keep))
        x_tr = tape.getitem(x, (slice(None), tr))
        h = tape.concat([x_keep, tape.Var(s_scaled)], axis=-1)
        raw = tape.mlp(self.nets[i], pvar, h)
        k = self.n_bins
        raw = tape.reshape(raw, (raw.shape[0], tr.size, 3 * k - 1))
        uw = tape.getitem(raw, (Ellipsis, slice(0, k)))
        uh = tape.getitem(raw, (Ellipsis, slice(k, 2 * k)))
        ud = tape.getitem(raw, (Ellipsis, slice(2 * k, None)))
        y_tr, ld = rq_spline(x_tr, uw, uh, ud, self.bound, inverse=inverse)
        y = tape.getitem(tape.concat([x_keep, y_tr], axis=-1), (slice(None), perm))
        return y, tape.sum_(ld, axis=-1)

    def _generate(self, z, s_scaled, pvars):
        x, total = z, None
        for i in range(len(self.nets)):
            x, ld = self._coupling(x, s_scaled, i, pvars[i], inverse=False)
            total = ld if total is None else total + ld
        return x, total

    def _normalize(self, x, s_scaled, pvars):
        z, total = x, None
        for i in reversed(range(len(self.nets))):
            z, ld = self._coupling(z, s_scaled, i, pvars[i], inverse=True)
            total = ld if total is None else total + ld
        return z, total

    def state(self):
        st = {
            "kind": np.array("spline"),
            "n_layers": np.array(len(self.nets)),
            "n_bins": np.array(self.n_bins),
            "bound": np.array(self.bound),
            "dim_cg": np.array(self.dim_cg),
            "scaler_mean": self.scaler.mean,
            "scaler_std": self.scaler.std,
        }
        for i, (n, m) in enumerate(zip(self.nets, self.masks)):
            st[f"net{i}_dims"] = np.asarray(n.dims)
            st[f"net{i}_flat"] = n.flat
            st[f"mask{i}"] = m
        return st

    @classmethod
    def from_state(cls, st):
        n = int(st["n_layers"])
        nets = [MlpParams(tuple(st[f"net{i}_dims"]), np.array(st[f"net{i}_flat"], dtype=float)) for i in range(n)]
        masks = [np.array(st[f"mask{i}"]) for i in range(n)]
        scaler = Scaler(np.array(st["scaler_mean"], dtype=float), np.array(st["scaler_std"], dtype=float))
        return cls(nets, masks, scaler, int(st["dim_cg"]), int(st["n_bins"]), float(st["bound"]))
