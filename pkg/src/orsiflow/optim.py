from __future__ import annotations

import numpy as np

from .errors import MissingGrad


class AdamW:
    """Adam with decoupled weight decay.

    Holds the parameter collection by name together with first/second moment
    buffers. Decay is applied to the parameter before the adaptive update.
    Parameters whose ``requires_grad`` is False (frozen) are skipped.
    """

    def __init__(self, params: dict, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, allow_missing: bool = False):
        active = {n: p for n, p in self.params.items() if p.requires_grad}
        if not allow_missing:
            missing = [n for n, p in active.items() if p.grad is None]
            if missing:
                raise MissingGrad(f"no gradient for: {missing[:5]}{'...' if len(missing) > 5 else ''}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for n, p in active.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                p.data = p.data * (1.0 - self.lr * self.weight_decay)
            m = self.m[n] = self.beta1 * self.m[n] + (1.0 - self.beta1) * g
            v = self.v[n] = self.beta2 * self.v[n] + (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict:
        out = {}
        for n in self.params:
            out[f"adam.m.{n}"] = self.m[n]
            out[f"adam.v.{n}"] = self.v[n]
        return out

    def load_state_arrays(self, arrays: dict, step_count: int):
        for n in self.params:
            self.m[n] = np.array(arrays[f"adam.m.{n}"])
            self.v[n] = np.array(arrays[f"adam.v.{n}"])
        self.step_count = step_count
