"""Adaptive-moment optimizer with decoupled weight decay and global norm clipping."""

from __future__ import annotations

import numpy as np

__all__ = ["AdamW", "global_grad_norm"]


def global_grad_norm(params: dict) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


class AdamW:
    """Dense updates on every parameter; decay applies uniformly (no sparse
    shortcut), which keeps repeated runs bit-for-bit reproducible."""

    def __init__(self, params: dict, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0, clip_norm=None):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr=None):
        if lr is not None:
            self.lr = lr
        self.step_count += 1
        scale = 1.0
        if self.clip_norm is not None:
            norm = global_grad_norm(self.params)
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        b1c = 1.0 - self.beta1 ** self.step_count
        b2c = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            g = np.zeros_like(p.data) if p.grad is None else p.grad * scale
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            p.data -= self.lr * update + self.lr * self.weight_decay * p.data

    def state_blobs(self, prefix="opt") -> dict:
        blobs = {}
        for name in self.params:
            blobs[f"{prefix}.m.{name}"] = self.m[name]
            blobs[f"{prefix}.v.{name}"] = self.v[name]
        return blobs

    def load_state_blobs(self, blobs: dict, step_count: int, prefix="opt"):
        for name in self.params:
            self.m[name] = np.array(blobs[f"{prefix}.m.{name}"])
            self.v[name] = np.array(blobs[f"{prefix}.v.{name}"])
        self.step_count = int(step_count)
