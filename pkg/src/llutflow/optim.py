"""Adam with decoupled weight decay, driven by a cosine warm-restart schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Parameter


@dataclass
class CosineWarmRestarts:
    """eta(t) = eta_min + (eta_max - eta_min) * (1 + cos(pi * t_cur / T_i)) / 2.

    ``t`` is measured in epochs (fractional within an epoch). The first period
    lasts ``t0`` epochs and each following one is ``t_mult`` times longer.
    """

    eta_max: float
    t0: float
    t_mult: float = 2.0
    eta_min: float = 0.0

    def period(self, t: float) -> tuple[float, float]:
        """Return ``(t_cur, T_i)`` for absolute time ``t``."""
        t_i, start = float(self.t0), 0.0
        while t >= start + t_i:
            start += t_i
            t_i *= self.t_mult
        return t - start, t_i

    def lr(self, t: float) -> float:
        t_cur, t_i = self.period(t)
        return self.eta_min + 0.5 * (self.eta_max - self.eta_min) * (1 + math.cos(math.pi * t_cur / t_i))


class AdamW:
    def __init__(self, params: list[Parameter], weight_decay: float = 1e-4,
                 betas: tuple = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if p.requires_decay and self.weight_decay:
                p.data *= p.data.dtype.type(1 - lr * self.weight_decay)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (lr * update).astype(p.data.dtype)


def optimizer_step(opt: AdamW, schedule: CosineWarmRestarts, epoch_time: float) -> float:
    """Apply one update at learning rate ``schedule.lr(epoch_time)``; returns that rate."""
    lr = schedule.lr(epoch_time)
    opt.step(lr)
    return lr
