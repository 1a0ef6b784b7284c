"""Adam with an exponential learning-rate decay over the training run."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ParamStore


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class OptimizerState:
    size: int
    base_lr: float = 5e-4
    decay_rate: float = 0.1
    total_epochs: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.size)
        if self.v is None:
            self.v = np.zeros(self.size)
        if self.m.shape != (self.size,) or self.v.shape != (self.size,):
            raise ValueError("moment accumulators must match the parameter count")

    def lr(self, epoch: float) -> float:
        """``base_lr * decay_rate ** (epoch / total_epochs)``."""
        return self.base_lr * self.decay_rate ** (epoch / max(self.total_epochs, 1))


def optimizer_step(opt: OptimizerState, params: ParamStore, epoch: float = 0.0) -> float:
    """One bias-corrected Adam update using ``params.grad``; returns the learning rate used.

    A non-finite gradient leaves parameters and moments untouched and raises.
    Gradients are zeroed after a successful step.
    """
    g = params.grad
    if len(params) != opt.size:
        raise ValueError("optimizer state does not match the parameter store")
    if not np.all(np.isfinite(g)):
        bad = np.flatnonzero(~np.isfinite(g))
        names = sorted({s.name for s in params.segments.values() for i in bad[:32] if s.start <= i < s.stop})
        raise NonFiniteGradientError(f"non-finite gradient in {len(bad)} entries (first in: {', '.join(names)})")
    lr = opt.lr(epoch)
    opt.step += 1
    opt.m *= opt.beta1
    opt.m += (1.0 - opt.beta1) * g
    opt.v *= opt.beta2
    opt.v += (1.0 - opt.beta2) * (g * g)
    m_hat = opt.m / (1.0 - opt.beta1**opt.step)
    v_hat = opt.v / (1.0 - opt.beta2**opt.step)
    params.data -= lr * m_hat / (np.sqrt(v_hat) + opt.epsilon)
    params.zero_grad()
    return lr
