from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from ..errors import ArgumentError, NumericError, StateError
from .tensor import Tensor


@dataclass
class AdamState:
    """Moment estimates and step counter for one parameter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param: Tensor, **hyper) -> "AdamState":
        return cls(np.zeros(param.size), np.zeros(param.size), **hyper)


def adam_step(params: List[Tensor], grads: List[Optional[np.ndarray]], states: List[AdamState]) -> None:
    """Apply one bias-corrected Adam update to ``params`` in place."""
    for p, g, st in zip(params, grads, states):
        label = p.name or f"parameter of shape {p.shape}"
        if p.frozen:
            raise StateError(f"{label} belongs to a frozen model")
        if st.m.size != p.size or st.v.size != p.size:
            raise ArgumentError(f"optimizer state for {label} does not match its size")
        g = np.zeros(p.size) if g is None else np.asarray(g, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {label}")
    for p, g, st in zip(params, grads, states):
        g = np.zeros(p.size) if g is None else np.asarray(g, dtype=np.float64).reshape(-1)
        st.t += 1
        st.m = st.beta1 * st.m + (1 - st.beta1) * g
        st.v = st.beta2 * st.v + (1 - st.beta2) * g * g
        m_hat = st.m / (1 - st.beta1 ** st.t)
        v_hat = st.v / (1 - st.beta2 ** st.t)
        update = st.lr * m_hat / (np.sqrt(v_hat) + st.eps)
        new = p.data.astype(np.float64).reshape(-1) - update
        if not np.all(np.isfinite(new)):
            raise NumericError(f"non-finite value in {p.name or 'parameter'} after Adam step")
        p.data = new.reshape(p.shape).astype(p.dtype)


@dataclass
class Adam:
    params: List[Tensor]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: List[AdamState] = field(default_factory=list)

    def __post_init__(self):
        self.params = list(self.params)
        if self.lr <= 0:
            raise ArgumentError(f"learning rate must be positive, got {self.lr}")
        hyper = dict(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)
        self.states = [AdamState.zeros_like(p, **hyper) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.states)
