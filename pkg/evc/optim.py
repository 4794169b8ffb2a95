"""Adam with decoupled weight decay over named tensors."""

from __future__ import annotations

import re
from typing import Dict, List, Sequence, Tuple

import numpy as np

from evc.errors import ValidationError
from evc.tensor import Tensor


class AdamW:
    """Adam moments plus ``p <- p * (1 - lr * weight_decay)`` applied outside the gradient.

    Parameters whose name matches ``exclude`` (biases and quantisation steps
    by default) get no weight decay.
    """

    def __init__(
        self,
        params: Sequence[Tuple[str, Tensor]],
        lr: float = 2e-4,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        exclude: str = r".*\.bias$|^quant\.|^prior\.",
    ) -> None:
        if not lr > 0:
            raise ValidationError(f"learning rate must be positive, got {lr}")
        if not (0.0 <= betas[0] < 1.0 and 0.0 <= betas[1] < 1.0):
            raise ValidationError(f"betas must lie in [0, 1), got {betas}")
        if weight_decay < 0:
            raise ValidationError(f"weight_decay must be non-negative, got {weight_decay}")
        self.params: List[Tuple[str, Tensor]] = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.pat = re.compile(exclude)
        self.steps = 0
        self._m: Dict[int, np.ndarray] = {}
        self._v: Dict[int, np.ndarray] = {}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.steps += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.steps
        c2 = 1.0 - b2**self.steps
        for name, p in self.params:
            if p.grad is None:
                continue
            key = id(p)
            g = p.grad.astype(np.float64)
            m = self._m.get(key, np.zeros_like(g))
            v = self._v.get(key, np.zeros_like(g))
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            self._m[key], self._v[key] = m, v
            data = p.data.astype(np.float64)
            if self.weight_decay > 0 and not self.pat.match(name):
                data = data * (1.0 - self.lr * self.weight_decay)
            data = data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = data.astype(p.dtype)
