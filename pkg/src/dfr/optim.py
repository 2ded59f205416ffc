"""SGD with momentum and L2 weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError, Tensor


@dataclass
class SgdState:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 5e-4
    velocity: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")


def sgd_step(params: list[Tensor], state: SgdState) -> None:
    """In-place update: ``v = m*v + (g + wd*p)``, ``p -= lr*v``.

    Gradients are read from ``p.grad``.  Velocity buffers are keyed by the
    parameter's position in ``params`` so the same list must be passed every step.
    """
    for i, p in enumerate(params):
        g = p.grad
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {p.name or i}")
        d = g + state.weight_decay * p.data if state.weight_decay else g
        v = state.velocity.get(i)
        if v is None:
            v = np.array(d, dtype=p.data.dtype, copy=True)
        else:
            v *= state.momentum
            v += d
        state.velocity[i] = v
        p.data -= state.learning_rate * v


class SGD:
    """Thin stateful wrapper used by the training loop."""

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 5e-4):
        self.params = list(params)
        self.state = SgdState(lr, momentum, weight_decay)

    @property
    def lr(self) -> float:
        return self.state.learning_rate

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.learning_rate = value

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        sgd_step(self.params, self.state)
