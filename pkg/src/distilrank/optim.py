"""Adam (L2 penalty folded into the gradient) and AdamW (decoupled decay)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, UsageError


@dataclass
class OptimizerState:
    kind: str = "adamw"
    lr: float = 2e-5
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in ("adam", "adamw"):
            raise ParameterError(f"unknown optimizer kind {self.kind!r}")


class Optimizer:
    """Updates a named set of parameter tensors in place.

    Gradients are never cleared here; call :meth:`zero_grad` before each
    backward pass.
    """

    def __init__(self, params: dict, kind="adamw", lr=2e-5, weight_decay=0.01,
                 beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.params = dict(params)
        self.state = OptimizerState(kind, lr, weight_decay, beta1, beta2, epsilon)
        for name, p in self.params.items():
            self.state.first_moment[name] = np.zeros_like(p.data)
            self.state.second_moment[name] = np.zeros_like(p.data)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        st = self.state
        for name, p in self.params.items():
            if p.grad is None:
                raise UsageError(f"parameter {name} has no gradient; run backward() first")
        st.step_count += 1
        t = st.step_count
        c1 = 1.0 - st.beta1 ** t
        c2 = 1.0 - st.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if st.kind == "adam" and st.weight_decay:
                g = g + st.weight_decay * p.data
            m = st.first_moment[name]
            v = st.second_moment[name]
            m *= st.beta1
            m += (1.0 - st.beta1) * g
            v *= st.beta2
            v += (1.0 - st.beta2) * (g * g)
            if st.kind == "adamw" and st.weight_decay:
                p.data *= 1.0 - st.lr * st.weight_decay
            p.data -= st.lr * (m / c1) / (np.sqrt(v / c2) + st.epsilon)


def adam(params, lr=2e-5, weight_decay=0.01, **kw) -> Optimizer:
    return Optimizer(params, "adam", lr, weight_decay, **kw)


def adamw(params, lr=2e-5, weight_decay=0.01, **kw) -> Optimizer:
    return Optimizer(params, "adamw", lr, weight_decay, **kw)
