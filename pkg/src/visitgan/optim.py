"""Adam optimizer with bias correction (epsilon 1e-8)."""

from __future__ import annotations

import numpy as np

from .autodiff import Node


class Adam:
    """Standard first/second-moment update over a named parameter set.

    Parameter values are updated in place; gradients are looked up by node,
    so a step consumes the mapping returned by ``autodiff.backward`` directly.
    Parameters missing from the mapping are left untouched.
    """

    def __init__(self, params: dict[str, Node], lr: float, beta1: float,
                 beta2: float, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {name: np.zeros_like(p.value) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.value) for name, p in self.params.items()}

    def step(self, grads: dict[Node, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads.get(p)
            if g is None:
                continue
            if g.shape != p.value.shape:
                raise ValueError(f"adam: gradient shape {g.shape} does not match "
                                 f"parameter {name} of shape {p.value.shape}")
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            p.value -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_tensors(self, prefix: str) -> dict[str, np.ndarray]:
        """Moment and step-count tensors for checkpointing."""
        out: dict[str, np.ndarray] = {f"{prefix}.t": np.array(float(self.t))}
        for name in self.params:
            out[f"{prefix}.{name}.m"] = self.m[name]
            out[f"{prefix}.{name}.v"] = self.v[name]
        return out
