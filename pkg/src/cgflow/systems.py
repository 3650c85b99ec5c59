"""Target systems: unnormalized Boltzmann densities with a CG split.

A system maps full coordinates ``x`` to a coarse-grained coordinate ``s`` and
fine-grained remainder ``x_fg`` and back. The split Jacobian of every system
here is constant, so it is absorbed into additive PMF constants.
"""

from __future__ import annotations

import numpy as np
from scipy.integrate import simpson

MB_A = np.array([-200.0, -100.0, -170.0, 15.0])
MB_a = np.array([-1.0, -1.0, -6.5, 0.7])
MB_b = np.array([0.0, 0.0, 11.0, 0.6])
MB_c = np.array([-10.0, -10.0, -6.5, 0.7])
MB_XBAR = np.array([1.0, 0.0, -0.5, -1.0])
MB_YBAR = np.array([0.0, 0.5, 1.5, 1.0])

MB_BETA = 0.1
MB_GLOBAL_MIN = np.array([-0.55822364, 1.44172584])
MB_START = np.array([-0.25, 1.5])
MB_METRIC_GRID = (-2.5, 1.1, 100)


def _mb_terms(x):
    x = np.asarray(x, dtype=float)
    dx = x[..., 0, None] - MB_XBAR
    dy = x[..., 1, None] - MB_YBAR
    with np.errstate(over="ignore"):
        t = MB_A * np.exp(MB_a * dx * dx + MB_b * dx * dy + MB_c * dy * dy)
    return t, dx, dy


def mb_energy(x):
    """Müller-Brown energy for ``x`` of shape ``(..., 2)``.

    Returns ``+inf`` (never NaN) where the repulsive term overflows; the three
    attractive terms have negative-definite exponents and vanish instead.
    """
    t, _, _ = _mb_terms(x)
    return t.sum(axis=-1)


def mb_gradient(x):
    t, dx, dy = _mb_terms(x)
    with np.errstate(invalid="ignore", over="ignore"):
        g1 = (t * (2 * MB_a * dx + MB_b * dy)).sum(axis=-1)
        g2 = (t * (MB_b * dx + 2 * MB_c * dy)).sum(axis=-1)
    return np.stack([g1, g2], axis=-1)


def rotate_split(x):
    """``s = x1 - x2`` and ``s_perp = x1 + x2``, returned as ``(s, x_fg)`` arrays of width 1."""
    x = np.asarray(x, dtype=float)
    s = x[..., 0:1] - x[..., 1:2]
    sp = x[..., 0:1] + x[..., 1:2]
    return s, sp


def rotate_reconstruct(x_fg, s):
    x_fg = np.asarray(x_fg, dtype=float)
    s = np.asarray(s, dtype=float)
    x1 = 0.5 * (s[..., 0] + x_fg[..., 0])
    x2 = 0.5 * (x_fg[..., 0] - s[..., 0])
    return np.stack([x1, x2], axis=-1)


class TargetSystem:
    """Base class. Subclasses define ``energy``, ``energy_grad``, ``split``, ``reconstruct``."""

    name = "system"
    beta = 1.0
    dim_cg = 1
    dim_fg = 1

    def energy(self, x):
        raise NotImplementedError

    def energy_grad(self, x):
        raise NotImplementedError

    def split(self, x):
        raise NotImplementedError

    def reconstruct(self, x_fg, s):
        raise NotImplementedError

    def energy_fg(self, x_fg, s):
        return self.energy(self.reconstruct(x_fg, s))

    def energy_grad_fg(self, x_fg, s):
        """Gradient of the energy with respect to ``x_fg`` at fixed ``s``."""
        raise NotImplementedError

    def energy_and_grad_fg(self, x_fg, s):
        return self.energy_fg(x_fg, s), self.energy_grad_fg(x_fg, s)

    def log_density(self, x):
        return -self.beta * self.energy(x)


class MullerBrown(TargetSystem):
    name = "muller_brown"
    dim_cg = 1
    dim_fg = 1

    def __init__(self, beta=MB_BETA):
        if beta <= 0:
            raise ValueError("beta must be positive")
        self.beta = float(beta)

    def energy(self, x):
        return mb_energy(x)

    def energy_grad(self, x):
        return mb_gradient(x)

    def split(self, x):
        return rotate_split(x)

    def reconstruct(self, x_fg, s):
        return rotate_reconstruct(x_fg, s)

    def energy_grad_fg(self, x_fg, s):
        g = mb_gradient(self.reconstruct(x_fg, s))
        return 0.5 * (g[..., 0:1] + g[..., 1:2])

    def minimum(self):
        return MB_GLOBAL_MIN.copy()


class GaussianSystem(TargetSystem):
    """Joint Gaussian over ``v = (s, x_fg)`` with ``E(v) = v^T P v / 2``.

    The Boltzmann density exp(-beta E) has covariance ``cov / beta``, so the
    PMF is ``s^T (cov_ss)^-1 s / 2`` up to a constant, independent of beta.
    """

    name = "gaussian"

    def __init__(self, cov, dim_cg=1, beta=1.0, mean=None):
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        if cov.shape[0] != cov.shape[1] or not np.allclose(cov, cov.T):
            raise ValueError("covariance must be a symmetric square matrix")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ValueError("covariance is not positive definite") from None
        if not 0 < dim_cg < cov.shape[0]:
            raise ValueError("need at least one CG and one fine-grained coordinate")
        if beta <= 0:
            raise ValueError("beta must be positive")
        self.cov = cov
        self.precision = np.linalg.inv(cov)
        self.mean = np.zeros(cov.shape[0]) if mean is None else np.asarray(mean, dtype=float)
        self.dim_cg = int(dim_cg)
        self.dim_fg = cov.shape[0] - self.dim_cg
        self.beta = float(beta)

    def energy(self, x):
        d = np.asarray(x, dtype=float) - self.mean
        return 0.5 * np.einsum("...i,ij,...j->...", d, self.precision, d)

    def energy_grad(self, x):
        d = np.asarray(x, dtype=float) - self.mean
        return d @ self.precision

    def split(self, x):
        x = np.asarray(x, dtype=float)
        return x[..., : self.dim_cg], x[..., self.dim_cg :]

    def reconstruct(self, x_fg, s):
        return np.concatenate([np.asarray(s, dtype=float), np.asarray(x_fg, dtype=float)], axis=-1)

    def energy_grad_fg(self, x_fg, s):
        return self.energy_grad(self.reconstruct(x_fg, s))[..., self.dim_cg :]

    def _as_cg(self, s):
        s = np.asarray(s, dtype=float)
        if s.ndim <= 1:
            s = s.reshape(-1, self.dim_cg)
        return s

    def exact_pmf(self, s):
        s = self._as_cg(s) - self.mean[: self.dim_cg]
        p_ss = np.linalg.inv(self.cov[: self.dim_cg, : self.dim_cg])
        return 0.5 * np.einsum("...i,ij,...j->...", s, p_ss, s)

    def conditional(self, s):
        """Mean (n, dim_fg) and covariance (dim_fg, dim_fg) of x_fg | s under exp(-beta E)."""
        s = self._as_cg(s)
        m = self.dim_cg
        c = self.cov / self.beta
        c_ss, c_sf, c_ff = c[:m, :m], c[:m, m:], c[m:, m:]
        gain = np.linalg.solve(c_ss, c_sf)
        mean = self.mean[m:] + (s - self.mean[:m]) @ gain
        cov = c_ff - c_sf.T @ gain
        return mean, cov

    def conditional_log_prob(self, x_fg, s):
        mean, cov = self.conditional(s)
        d = np.asarray(x_fg, dtype=float) - mean
        prec = np.linalg.inv(cov)
        _, logdet = np.linalg.slogdet(cov)
        k = cov.shape[0]
        return -0.5 * (np.einsum("...i,ij,...j->...", d, prec, d) + logdet + k * np.log(2 * np.pi))

    def sample_conditional(self, s, rng):
        mean, cov = self.conditional(s)
        chol = np.linalg.cholesky(cov)
        return mean + rng.standard_normal(mean.shape) @ chol.T


def gaussian_test_system(dim_fg=1, coupling=None, beta=1.0, dim_cg=1):
    """Gaussian system over (s, x_fg); ``coupling`` is the full covariance (default identity)."""
    n = dim_cg + dim_fg
    cov = np.eye(n) if coupling is None else np.asarray(coupling, dtype=float)
    if cov.shape != (n, n):
        raise ValueError(f"covariance must have shape {(n, n)}")
    return GaussianSystem(cov, dim_cg=dim_cg, beta=beta)


def metric_grid(lo=MB_METRIC_GRID[0], hi=MB_METRIC_GRID[1], n=MB_METRIC_GRID[2]):
    return np.linspace(lo, hi, n)


def ground_truth_pmf(s_grid, beta=MB_BETA, window=(-4.0, 6.0), n_nodes=2001, tail_tol=1e-12):
    """Müller-Brown PMF along ``s = x1 - x2`` by Simpson quadrature over ``s_perp``.

    Values carry an arbitrary shared additive constant; subtract the minimum
    before comparing. Raises if the integrand is not negligible at the window
    edges or the result is not finite.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    s_grid = np.atleast_1d(np.asarray(s_grid, dtype=float)).reshape(-1)
    if s_grid.size == 0:
        raise ValueError("empty grid")
    sp = np.linspace(window[0], window[1], n_nodes)
    x = rotate_reconstruct(sp[None, :, None], s_grid[:, None, None])
    logw = -beta * mb_energy(x)
    peak = logw.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(peak)):
        raise ValueError("quadrature integrand is not finite; widen or shift the window")
    edge = np.maximum(logw[:, 0], logw[:, -1]) - peak[:, 0]
    if np.any(edge > np.log(tail_tol)):
        raise ValueError("integration window too small: integrand not negligible at the edges")
    integral = simpson(np.exp(logw - peak), x=sp, axis=1)
    u = -(np.log(integral) + peak[:, 0]) / beta
    if not np.all(np.isfinite(u)):
        raise ValueError("quadrature produced non-finite PMF values")
    return u


class CountingSystem(TargetSystem):
    """Wraps a system and counts energy evaluations (one per configuration)."""

    def __init__(self, inner: TargetSystem):
        self.inner = inner
        self.name = inner.name
        self.beta = inner.beta
        self.dim_cg = inner.dim_cg
        self.dim_fg = inner.dim_fg
        self.n_energy = 0

    def _count(self, x):
        self.n_energy += int(np.prod(np.shape(x)[:-1]))

    def energy(self, x):
        self._count(x)
        return self.inner.energy(x)

    def energy_grad(self, x):
        return self.inner.energy_grad(x)

    def energy_and_grad_fg(self, x_fg, s):
        x = self.reconstruct(x_fg, s)
        self._count(x)
        return self.inner.energy(x), self.inner.energy_grad_fg(x_fg, s)

    def energy_grad_fg(self, x_fg, s):
        return self.inner.energy_grad_fg(x_fg, s)

    def split(self, x):
        return self.inner.split(x)

    def reconstruct(self, x_fg, s):
        return self.inner.reconstruct(x_fg, s)

    def __getattr__(self, item):
        return getattr(self.inner, item)


def make_system(name, beta=None):
    if name in ("muller_brown", "mb"):
        return MullerBrown(MB_BETA if beta is None else beta)
    if name == "gaussian":
        return gaussian_test_system(beta=1.0 if beta is None else beta)
    raise ValueError(f"unknown system {name!r}")
