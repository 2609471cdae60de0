"""Adam with bias correction, applied only to trainable parameters."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Adam:
    """Standard Adam. Moment buffers are created lazily per parameter.

    A parameter is updated only when it is marked trainable (requires_grad)
    and actually received a gradient this step; a frozen parameter stays
    bit-identical even if a stale gradient is sitting on it.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
            v = self.v.get(name)
            if v is None:
                v = self.v[name] = np.zeros_like(p.data)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
        return self.m, self.v

    def load_state(self, m: dict, v: dict, t: int) -> None:
        self.m = {k: np.asarray(a, dtype=np.float64) for k, a in m.items()}
        self.v = {k: np.asarray(a, dtype=np.float64) for k, a in v.items()}
        self.t = int(t)
