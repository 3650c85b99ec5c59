from __future__ import annotations

import numpy as np

from ..nnkernel import tape
from ..nnkernel.scaler import Scaler

LOG_2PI = np.log(2.0 * np.pi)


def std_normal_log_prob(z):
    z = np.asarray(z, dtype=float)
    return -0.5 * np.sum(z * z, axis=-1) - 0.5 * z.shape[-1] * LOG_2PI


def as_rows(a, width):
    a = np.asarray(a, dtype=float)
    if a.ndim <= 1:
        a = a.reshape(-1, width)
    return a


class ConditionalFlow:
    """Invertible map ``g(z; s)`` from a standard-normal latent to ``x_fg``.

    Subclasses implement ``_generate`` (z -> x_fg) and ``_normalize``
    (x_fg -> z) on tape variables, each returning the per-sample log
    Jacobian determinant of the direction taken.
    """

    dim_fg: int
    dim_cg: int
    scaler: Scaler

    def parameters(self) -> list:
        raise NotImplementedError

    def _generate(self, z, s_scaled, pvars):
        raise NotImplementedError

    def _normalize(self, x, s_scaled, pvars):
        raise NotImplementedError

    def param_vars(self):
        return [tape.Var(p) for p in self.parameters()]

    def scale_cond(self, s):
        return self.scaler.apply(as_rows(s, self.dim_cg))

    def forward(self, z, s):
        """``(x_fg, log|det dx_fg/dz|)``."""
        z = as_rows(z, self.dim_fg)
        x, ld = self._generate(tape.Var(z), self.scale_cond(s), self.param_vars())
        return x.value, ld.value

    def inverse(self, x_fg, s):
        """``(z, log|det dz/dx_fg|)``."""
        x_fg = as_rows(x_fg, self.dim_fg)
        z, ld = self._normalize(tape.Var(x_fg), self.scale_cond(s), self.param_vars())
        return z.value, ld.value

    def log_prob(self, x_fg, s):
        z, ld = self.inverse(x_fg, s)
        return std_normal_log_prob(z) + ld

    def sample(self, s, rng, z=None):
        """Draw one ``x_fg`` per row of ``s``; returns ``(x_fg, log_q, z)``."""
        s = as_rows(s, self.dim_cg)
        if z is None:
            z = rng.standard_normal((s.shape[0], self.dim_fg))
        x, ld = self.forward(z, s)
        return x, std_normal_log_prob(z) - ld, z

    def state(self) -> dict:
        raise NotImplementedError

    def save(self, path):
        st = self.state()
        np.savez(path, **st)
