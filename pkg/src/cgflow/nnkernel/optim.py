import numpy as np


class Adam:
    """Bias-corrected Adam acting in place on a list of parameter arrays.

    ``lr`` may be changed between steps (used for warm-up schedules).
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self._buf = [np.zeros_like(p) for p in self.params]

    def step(self, grads):
        if len(grads) != len(self.params):
            raise ValueError("number of gradients does not match number of parameters")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v, buf in zip(self.params, grads, self.m, self.v, self._buf):
            # m += (1 - b1) (g - m);  v += (1 - b2) (g^2 - v)
            np.subtract(g, m, out=buf)
            buf *= 1.0 - b1
            m += buf
            np.multiply(g, g, out=buf)
            buf -= v
            buf *= 1.0 - b2
            v += buf
            # p -= lr * (m / c1) / (sqrt(v / c2) + eps)
            np.sqrt(v, out=buf)
            buf *= 1.0 / np.sqrt(c2)
            buf += self.eps
            np.divide(m, buf, out=buf)
            buf *= self.lr / c1
            p -= buf

    def state_dict(self):
        return {"t": self.t, "lr": self.lr, "m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v]}

    def load_state_dict(self, state):
        self.t = int(state["t"])
        self.lr = float(state["lr"])
        for dst, src in zip(self.m, state["m"]):
            dst[...] = src
        for dst, src in zip(self.v, state["v"]):
            dst[...] = src


def global_norm(grads):
    return float(np.sqrt(sum(np.sum(g * g) for g in grads)))


def clip_grad_norm(grads, max_norm):
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm
