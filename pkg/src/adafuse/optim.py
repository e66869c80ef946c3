"""Adam with decoupled weight decay."""

import numpy as np


class AdamW:
    """Bias-corrected Adam; weight decay is applied directly to the
    parameters, not mixed into the gradient moments."""

    def __init__(self, params, lr=2e-4, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0):
        if isinstance(params, dict):
            self.named = dict(params)
        else:
            self.named = {str(i): p for i, p in enumerate(params)}
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.named.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.named.items()}

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for k, p in self.named.items():
            if p.grad is None:
                raise ValueError(f"optimizer_step: parameter {k} has no gradient")
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            mhat = self.m[k] / bc1
            vhat = self.v[k] / bc2
            if self.weight_decay:
                p.data = p.data - self.lr * self.weight_decay * p.data
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.named.values():
            p.grad = None

    def state_arrays(self):
        """Moment estimates and step counter as named arrays (checkpointing)."""
        out = {"step_count": np.array([self.step_count], dtype=np.float64)}
        for k in self.named:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays):
        self.step_count = int(arrays["step_count"][0])
        for k, p in self.named.items():
            self.m[k] = np.asarray(arrays[f"m.{k}"], dtype=p.data.dtype).reshape(p.data.shape)
            self.v[k] = np.asarray(arrays[f"v.{k}"], dtype=p.data.dtype).reshape(p.data.shape)
