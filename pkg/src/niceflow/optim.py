"""AdaM with bias correction, in the early parametrization the model was trained with."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np


@dataclass
class AdamSettings:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.01
    # "paper": second-moment decay is 1 - beta2; "decay": beta2 is the decay itself
    beta2_convention: str = "paper"
    epsilon: float = 1e-4
    # beta1 at step t is beta1 * lam**(t-1); lam = 1 keeps it constant
    lam: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.beta2_convention not in ("paper", "decay"):
            raise ValueError("beta2_convention must be 'paper' or 'decay'")
        if not 0 < self.lam <= 1:
            raise ValueError("lam must lie in (0, 1]")

    @property
    def second_moment_decay(self) -> float:
        return 1.0 - self.beta2 if self.beta2_convention == "paper" else self.beta2


@dataclass
class OptimizerState:
    first: List[np.ndarray]
    second: List[np.ndarray]
    step: int = 0
    # running product of the per-step beta1 values, for bias correction
    beta1_prod: float = 1.0

    @classmethod
    def zeros_like(cls, params) -> "OptimizerState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(state: OptimizerState, params, grads, settings: AdamSettings,
              beta1_hook=None) -> None:
    """Update ``params`` and ``state`` in place.

    ``beta1_hook(step, beta1)`` may override the first-moment decay per step.
    """
    if len(params) != len(grads) or len(params) != len(state.first):
        raise ValueError("parameter, gradient and state lists differ in length")
    state.step += 1
    t = state.step
    beta1 = settings.beta1 * settings.lam ** (t - 1)
    if beta1_hook is not None:
        beta1 = beta1_hook(t, beta1)
    beta2 = settings.second_moment_decay
    state.beta1_prod *= beta1
    c1 = 1.0 - state.beta1_prod
    c2 = 1.0 - beta2**t
    lr = settings.learning_rate
    for p, g, m, v in zip(params, grads, state.first, state.second):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + settings.epsilon)


def clip_global_norm(grads, max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if max_norm > 0 and norm > max_norm:
        for g in grads:
            g *= max_norm / norm
    return norm
