"""Domain-loss weighting schedule and scheduled clamping."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import Tensor, clamp_max
from .errors import ContractError


@dataclass(frozen=True)
class ScheduleState:
    """Position in training: step ``n`` out of ``N`` planned steps."""

    n: int = 0
    N: int = 1
    alpha: float = 10.0
    clamp: float = 5000.0

    def __post_init__(self):
        if self.N <= 0:
            raise ContractError(f"total steps N must be positive, got {self.N}")
        if self.n < 0:
            raise ContractError(f"step n must be nonnegative, got {self.n}")
        if not self.alpha > 0:
            raise ContractError(f"alpha must be positive, got {self.alpha}")
        if not self.clamp > 0:
            raise ContractError(f"clamp must be positive, got {self.clamp}")

    def advance(self) -> "ScheduleState":
        return replace(self, n=self.n + 1)

    @property
    def ceiling(self) -> float:
        return self.clamp * factor(self)


def factor(state: ScheduleState) -> float:
    """Weight of the domain loss, rising from 0 towards 1 as training proceeds.

    ``2 / (1 + exp(-alpha * n / N)) - 1``; exactly zero at ``n = 0``.
    """
    if state.n > state.N:
        raise ContractError(f"step {state.n} exceeds the planned {state.N} steps")
    return 2.0 / (1.0 + math.exp(-state.alpha * state.n / state.N)) - 1.0


def clamp_domain_loss(per_sample, state: ScheduleState):
    """Cap each per-sample domain loss at ``clamp * factor(state)``.

    Must be applied to the unreduced losses, before any averaging.  Works on
    tensors (recording onto their tape) as well as on plain arrays.
    """
    values = per_sample.data if isinstance(per_sample, Tensor) else np.asarray(per_sample, dtype=np.float64)
    if np.any(values < 0):
        raise ContractError("domain losses must be nonnegative")
    ceiling = state.ceiling
    if isinstance(per_sample, Tensor):
        return clamp_max(per_sample, ceiling)
    return np.minimum(values, ceiling)


def combine_losses(l_clf, l_dmn, lam):
    """Total objective: classification loss plus the weighted domain loss."""
    return l_clf + lam * l_dmn
