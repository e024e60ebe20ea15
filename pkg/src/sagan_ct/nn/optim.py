from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when a gradient or loss stops being finite."""


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0 <= b < 1:
                raise ValueError(f"{name} must lie in [0, 1), got {b}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")


def adam_step(params, cfg: AdamConfig):
    """Apply one bias-corrected Adam update to every parameter with a gradient.

    Parameters without a gradient are left untouched, including their step
    counters, so frozen networks stay bit-identical.
    """
    for p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            name = p.name or f"parameter of shape {p.shape}"
            raise NonFiniteError(f"non-finite gradient in {name}")
    for p in params:
        g = p.grad
        if g is None:
            continue
        p.step += 1
        p.m *= cfg.beta1
        p.m += (1 - cfg.beta1) * g
        p.v *= cfg.beta2
        p.v += (1 - cfg.beta2) * (g * g)
        m_hat = p.m / (1 - cfg.beta1**p.step)
        v_hat = p.v / (1 - cfg.beta2**p.step)
        p.data -= (cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.epsilon)).astype(p.data.dtype)
