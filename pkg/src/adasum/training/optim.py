"""Optimizers and learning-rate schedules operating on flat parameter vectors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..combiner import LayerLayout
from ..errors import NumericError, ShapeError

TRUST_RATIO_CLAMP = (0.01, 10.0)


@dataclass(frozen=True)
class ConstantLR:
    lr: float

    def __call__(self, step: int) -> float:
        return self.lr


@dataclass(frozen=True)
class LinearWarmupDecay:
    """Linear ramp from zero up to ``max_lr``, then linearly back to zero.

    ``step`` counts optimizer steps from 0; the ramp covers the first
    ``warmup_frac`` of ``total_steps``.
    """

    max_lr: float
    warmup_frac: float
    total_steps: int

    def __call__(self, step: int) -> float:
        total = max(self.total_steps, 1)
        warm = max(1, int(round(self.warmup_frac * total)))
        if step < warm:
            return self.max_lr * (step + 1) / warm
        if total == warm:
            return self.max_lr
        return self.max_lr * max(total - step, 0) / (total - warm)


Schedule = Callable[[int], float]


class Optimizer:
    """Base class. ``step`` returns the new parameter vector."""

    def __init__(self, schedule: Schedule | float):
        self.schedule = ConstantLR(schedule) if isinstance(schedule, (int, float)) else schedule
        self.t = 0
        self.last_lr = float("nan")

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        params = np.asarray(params, dtype=np.float64)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != params.shape:
            raise ShapeError(f"gradient shape {grad.shape} != parameter shape {params.shape}")
        if not np.isfinite(grad).all():
            raise NumericError("non-finite gradient")
        lr = self.schedule(self.t)
        self.last_lr = lr
        new = self._update(params, grad, lr)
        self.t += 1
        return new

    def _update(self, params, grad, lr):
        raise NotImplementedError


class SGD(Optimizer):
    def _update(self, params, grad, lr):
        return params - lr * grad


class Momentum(Optimizer):
    """Heavy ball: ``v = mu*v + g``; ``w -= lr*v``."""

    def __init__(self, schedule, momentum: float = 0.9):
        super().__init__(schedule)
        self.momentum = momentum
        self.velocity = None

    def _update(self, params, grad, lr):
        if self.velocity is None:
            self.velocity = np.zeros_like(params)
        self.velocity = self.momentum * self.velocity + grad
        return params - lr * self.velocity


class Adam(Optimizer):
    def __init__(self, schedule, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(schedule)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = None
        self.v = None

    def _direction(self, grad):
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        k = self.t + 1
        m_hat = self.m / (1 - self.beta1 ** k)
        v_hat = self.v / (1 - self.beta2 ** k)
        return m_hat / (np.sqrt(v_hat) + self.eps)

    def _update(self, params, grad, lr):
        return params - lr * self._direction(grad)


def trust_ratio(w_layer, update_layer, clamp=TRUST_RATIO_CLAMP) -> float:
    """``|w| / |update|`` clamped; 1 when either norm is zero."""
    wn = float(np.linalg.norm(w_layer))
    un = float(np.linalg.norm(update_layer))
    if wn == 0.0 or un == 0.0:
        return 1.0
    return float(np.clip(wn / un, *clamp))


class LAMB(Adam):
    """Adam direction rescaled per layer by the trust ratio."""

    def __init__(self, schedule, layout: LayerLayout, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-6, weight_decay: float = 0.0):
        super().__init__(schedule, beta1, beta2, eps)
        self.layout = layout
        self.weight_decay = weight_decay

    def _update(self, params, grad, lr):
        update = self._direction(grad) + self.weight_decay * params
        new = params.copy()
        for off, n in self.layout.boundaries:
            sl = slice(off, off + n)
            new[sl] -= lr * trust_ratio(params[sl], update[sl]) * update[sl]
        return new


def make_optimizer(kind: str, schedule, layout: LayerLayout | None = None, **kw) -> Optimizer:
    if kind == "sgd":
        return SGD(schedule)
    if kind == "momentum":
        return Momentum(schedule, **kw)
    if kind == "adam":
        return Adam(schedule, **kw)
    if kind == "lamb":
        if layout is None:
            raise ValueError("LAMB needs the parameter layout")
        return LAMB(schedule, layout, **kw)
    raise ValueError(f"unknown optimizer {kind!r}")
