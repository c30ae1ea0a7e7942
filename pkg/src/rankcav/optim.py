# optim.py

import math
from collections.abc import Sequence
from enum import StrEnum
from typing import Protocol, final, override

import numpy as np

from rankcav.exceptions import ConfigError


class OptimizerKind(StrEnum):
    SGD = "sgd"
    ADAM = "adam"


class Optimizer(Protocol):
    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float) -> None:
        """Update `params` in place."""
        ...


@final
class Sgd:
    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float) -> None:
        for param, grad in zip(params, grads, strict=True):
            param -= lr * grad

    @override
    def __repr__(self) -> str:
        return "Sgd()"


@final
class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: list[np.ndarray] = []
        self.v: list[np.ndarray] = []

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float) -> None:
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        correction1 = 1.0 - self.beta1**self.t
        correction2 = 1.0 - self.beta2**self.t
        for param, grad, m, v in zip(params, grads, self.m, self.v, strict=True):
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            param -= lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)

    @override
    def __repr__(self) -> str:
        return f"Adam(beta1={self.beta1}, beta2={self.beta2}, eps={self.eps})"


def make_optimizer(kind: OptimizerKind | str) -> Optimizer:
    try:
        kind = OptimizerKind(kind)
    except ValueError:
        raise ConfigError("Unknown optimizer", context={"optimizer": kind}) from None
    match kind:
        case OptimizerKind.SGD:
            return Sgd()
        case OptimizerKind.ADAM:
            return Adam()


def cosine_lr(base: float, step: int, total: int, floor: float = 0.0) -> float:
    """Cosine annealing from `base` at step 0 towards `floor` at step `total`."""
    if total <= 0:
        return base
    progress = step / total
    return floor + 0.5 * (base - floor) * (1.0 + math.cos(math.pi * progress))


def exponential_lr(base: float, epoch: int, gamma: float) -> float:
    return base * gamma**epoch
