"""AdamW with decoupled weight decay and a linear warmup/decay schedule."""

import math
from typing import Dict

import numpy as np


def linear_schedule(step: int, total: int, warmup_ratio: float, peak: float) -> float:
    """Learning rate at 1-based ``step`` of ``total``.

    Ramps as ``peak * step / W`` for ``step <= W = ceil(warmup_ratio * total)``,
    then decays linearly to 0 at ``step == total``.
    """
    warmup = math.ceil(warmup_ratio * total)
    if step <= warmup:
        return peak * step / warmup
    return peak * (total - step) / (total - warmup)


class AdamW:
    def __init__(self, params: Dict[str, np.ndarray], betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0):
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: float):
        """In-place update of every entry of ``params`` that has a gradient."""
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, g in grads.items():
            p = params[name]
            if self.weight_decay:
                p *= 1.0 - lr * self.weight_decay
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_global_norm(grads: Dict[str, np.ndarray], max_norm) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for g in grads.values():
            g *= scale
    return norm
