"""AdamW over named :class:`~adaptive_length.autodiff.Value` parameters."""

from __future__ import annotations

import numpy as np


def warmup_linear(step, total_steps, warmup_frac=0.06):
    """Multiplier rising linearly over the warmup then decaying linearly to zero."""
    warmup = max(1, int(round(total_steps * warmup_frac)))
    if step < warmup:
        return (step + 1) / warmup
    return max(0.0, (total_steps - step) / max(1, total_steps - warmup))


class AdamW:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, clip_norm=None):
        self.params = dict(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in self.params.items()}

    def grad_norm(self):
        return float(np.sqrt(sum(float((p.grad**2).sum()) for p in self.params.values())))

    def step(self, lr_scale=1.0):
        self.t += 1
        lr = self.lr * lr_scale
        clip = 1.0
        if self.clip_norm is not None:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                clip = self.clip_norm / (norm + 1e-12)
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            g = p.grad * clip
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            if self.weight_decay and p.data.ndim >= 2:
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * update

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()
