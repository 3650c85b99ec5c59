from dataclasses import dataclass

import numpy as np

STD_FLOOR = 1e-8


@dataclass
class Scaler:
    """Standard scaler ``(v - mean) / std`` with population std."""

    mean: np.ndarray
    std: np.ndarray

    def apply(self, v):
        return (np.asarray(v, dtype=float) - self.mean) / self.std

    def inverse(self, v):
        return np.asarray(v, dtype=float) * self.std + self.mean

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


def scaler_fit(data) -> Scaler:
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    if data.shape[0] == 0:
        raise ValueError("cannot fit a scaler on empty data")
    mean = data.mean(axis=0)
    std = np.maximum(data.std(axis=0), STD_FLOOR)
    return Scaler(mean, std)
