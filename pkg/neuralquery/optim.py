import logging
from typing import List, Sequence

import numpy as np

from .exceptions import ValidationError
from .graph import Parameter
from .models import OptimizerSpec

logger = logging.getLogger(__name__)


class Optimizer:
    def __init__(self, params: Sequence[Parameter], lr: float):
        if lr < 0:
            raise ValidationError(f"learning rate must be >= 0, got {lr}")
        self.params: List[Parameter] = list(params)
        self.lr = lr
        self.steps = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    """Plain or heavy-ball momentum gradient descent."""

    def __init__(self, params: Sequence[Parameter], lr: float = 0.1, momentum: float = 0.0):
        super().__init__(params, lr)
        if not 0.0 <= momentum < 1.0:
            raise ValidationError(f"momentum must be in [0, 1), got {momentum}")
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.values) for p in self.params]

    def step(self) -> None:
        self.steps += 1
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v += p.grad
            p.values -= self.lr * v


class Adam(Optimizer):
    def __init__(self, params: Sequence[Parameter], lr: float = 0.01, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        super().__init__(params, lr)
        for name, beta in (("beta1", beta1), ("beta2", beta2)):
            if not 0.0 <= beta < 1.0:
                raise ValidationError(f"{name} must be in [0, 1), got {beta}")
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]

    def step(self) -> None:
        self.steps += 1
        t = self.steps
        for p, m, v in zip(self.params, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(p.grad)
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            p.values -= self.lr * m_hat / (np.sqrt(v_hat) + self.epsilon)


def make_optimizer(spec: OptimizerSpec, params: Sequence[Parameter]) -> Optimizer:
    logger.debug("%s optimizer over %d parameters (lr=%g)", spec.kind, len(params), spec.lr)
    if spec.kind == "sgd":
        return SGD(params, lr=spec.lr, momentum=spec.momentum)
    if spec.kind == "adam":
        return Adam(params, lr=spec.lr, beta1=spec.beta1, beta2=spec.beta2,
                    epsilon=spec.epsilon)
    raise ValidationError(f"unknown optimizer {spec.kind!r}; expected 'sgd' or 'adam'")
