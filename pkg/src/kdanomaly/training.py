"""Minibatch Adam loop shared by pre-training, distillation and probing."""

from __future__ import annotations

from typing import Callable, List, Sequence

import numpy as np

from .autodiff import Adam, Tape, Tensor
from .errors import ArgumentError, StateError


def fit(params: Sequence[Tensor], batch_loss: Callable[[np.ndarray], Tensor], n: int, epochs: int,
        batch_size: int, lr: float, rng: np.random.Generator, evaluate: Callable[[], float],
        min_batch: int = 1) -> List[float]:
    """Train ``params`` for ``epochs`` shuffled passes over ``n`` samples.

    ``batch_loss(indices)`` builds the scalar loss of a minibatch and
    ``evaluate()`` the loss over the whole training set.  The returned history
    holds ``evaluate()`` before training followed by one value per epoch.
    Batches smaller than ``min_batch`` are skipped.
    """
    params = list(params)
    if any(p.frozen for p in params):
        raise StateError("cannot train frozen parameters")
    if batch_size < 1:
        raise ArgumentError("batch_size must be positive")
    if epochs < 0:
        raise ArgumentError("epochs must be non-negative")
    history = [float(evaluate())]
    if epochs == 0:
        return history
    opt = Adam(params, lr=lr)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            if len(idx) < min_batch:
                continue
            opt.zero_grad()
            with Tape() as tape:
                loss = batch_loss(idx)
            tape.backward(loss)
            opt.step()
        history.append(float(evaluate()))
    opt.zero_grad()
    return history
