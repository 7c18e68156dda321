"""Adam optimizer over named parameter tensors."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Adam:
    """Bias-corrected adaptive-moment updates applied in place.

    A step with any non-finite gradient is rejected: parameters and moment
    state are left untouched and ``step`` returns False so the caller can
    abort or skip.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> bool:
        grads = {}
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                return False
            grads[k] = g
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            m_hat = self.m[k] / c1
            v_hat = self.v[k] / c2
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)
        return True

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_tensors(self, prefix: str = "opt") -> dict[str, np.ndarray]:
        """Moment buffers plus step counter, for exact-resume checkpoints."""
        out = {}
        for k in self.params:
            out[f"{prefix}/m/{k}"] = self.m[k]
            out[f"{prefix}/v/{k}"] = self.v[k]
        out[f"{prefix}/t"] = np.asarray([self.t], dtype=np.float32)
        return out

    def load_state_tensors(self, named: dict[str, np.ndarray], prefix: str = "opt") -> None:
        for k in self.params:
            if f"{prefix}/m/{k}" in named:
                self.m[k] = named[f"{prefix}/m/{k}"].astype(np.float32).reshape(self.m[k].shape)
                self.v[k] = named[f"{prefix}/v/{k}"].astype(np.float32).reshape(self.v[k].shape)
        if f"{prefix}/t" in named:
            self.t = int(named[f"{prefix}/t"][0])


def adam_step(params: dict[str, Tensor], opt: Adam) -> bool:
    """Functional wrapper: apply one update of ``opt`` over ``params``."""
    assert opt.params is params
    return opt.step()
