import numpy as np

from ..nnkernel import MlpParams, Scaler, init_default, tape
from .base import ConditionalFlow


class CondAffineFlow(ConditionalFlow):
    """``x_fg = z * scale(s) + mean(s)`` with two MLPs on the scaled condition.

    The scale network predicts ``log scale``, which keeps the scale positive
    and makes the log-determinant the raw network output.
    """

    def __init__(self, nn_scale: MlpParams, nn_mean: MlpParams, scaler: Scaler):
        if nn_scale.dims[0] != nn_mean.dims[0] or nn_scale.dims[-1] != nn_mean.dims[-1]:
            raise ValueError("scale and mean networks must share input and output sizes")
        self.nn_scale = nn_scale
        self.nn_mean = nn_mean
        self.scaler = scaler
        self.dim_cg = nn_scale.dims[0]
        self.dim_fg = nn_scale.dims[-1]

    @classmethod
    def create(cls, rng, dim_cg=1, dim_fg=1, hidden=(64, 64), scaler=None):
        dims = (dim_cg, *hidden, dim_fg)
        if scaler is None:
            scaler = Scaler(np.zeros(dim_cg), np.ones(dim_cg))
        return cls(init_default(dims, rng), init_default(dims, rng), scaler)

    def parameters(self):
        return [self.nn_scale.flat, self.nn_mean.flat]

    def _nets(self, s_scaled, pvars):
        log_scale = tape.mlp(self.nn_scale, pvars[0], s_scaled)
        mean = tape.mlp(self.nn_mean, pvars[1], s_scaled)
        return log_scale, mean

    def _generate(self, z, s_scaled, pvars):
        log_scale, mean = self._nets(s_scaled, pvars)
        x = z * tape.exp(log_scale) + mean
        return x, tape.sum_(log_scale, axis=-1)

    def _normalize(self, x, s_scaled, pvars):
        log_scale, mean = self._nets(s_scaled, pvars)
        z = (x - mean) * tape.exp(-log_scale)
        return z, -tape.sum_(log_scale, axis=-1)

    def state(self):
        return {
            "kind": np.array("affine"),
            "scale_dims": np.asarray(self.nn_scale.dims),
            "scale_flat": self.nn_scale.flat,
            "mean_dims": np.asarray(self.nn_mean.dims),
            "mean_flat": self.nn_mean.flat,
            "scaler_mean": self.scaler.mean,
            "scaler_std": self.scaler.std,
        }

    @classmethod
    def from_state(cls, st):
        return cls(
            MlpParams(tuple(st["scale_dims"]), np.array(st["scale_flat"], dtype=float)),
            MlpParams(tuple(st["mean_dims"]), np.array(st["mean_flat"], dtype=float)),
            Scaler(np.array(st["scaler_mean"], dtype=float), np.array(st["scaler_std"], dtype=float)),
        )
