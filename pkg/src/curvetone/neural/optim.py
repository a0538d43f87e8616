"""Adam optimizer over autodiff tensors."""

from __future__ import annotations

import numpy as np

from ._fused import adam_step


class Adam:
    def __init__(self, params, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            grad = p.grad
            if grad.dtype != p.data.dtype or not grad.flags.c_contiguous:
                grad = np.ascontiguousarray(grad, dtype=p.data.dtype)
            adam_step(p.data.reshape(-1), grad.reshape(-1), m.reshape(-1), v.reshape(-1),
                      self.beta1, self.beta2, self.lr / bias1, 1.0 / bias2, self.eps)
