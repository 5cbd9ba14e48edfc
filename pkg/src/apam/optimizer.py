"""Adaptive-moment stochastic gradient state machine.

Implements the master-side update: exponential moving averages of the
gradient and its square, a running component-wise maximum of the second
moment, and a proximal point step that reduces to

    x_new = clamp(x - alpha_k * m / (sqrt(vhat) + eps))

with the freeze rule that coordinates whose denominator is exactly zero
do not move. Each step is transactional: it returns a fresh state and
never mutates its input, so a concurrent reader can only ever observe a
complete quadruple.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .vectormath import BoxConstraint, as_vec, project_box


def _check_step_index(k: int) -> None:
    if k < 1:
        raise ValueError(f"step index must be >= 1, got {k}")


@dataclass(frozen=True)
class ConstOverSqrtK:
    """alpha / sqrt(K) for every step of a fixed horizon K."""

    alpha: float
    K: int

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.K < 1:
            raise ValueError("horizon K must be a positive integer")

    def at(self, k: int) -> float:
        _check_step_index(k)
        return self.alpha / math.sqrt(self.K)


@dataclass(frozen=True)
class InvSqrtK:
    """alpha / sqrt(k), decaying with the step index."""

    alpha: float

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")

    def at(self, k: int) -> float:
        _check_step_index(k)
        return self.alpha / math.sqrt(k)


LrSchedule = Union[ConstOverSqrtK, InvSqrtK]


def alpha_at(schedule: LrSchedule, k: int) -> float:
    """Scheduled step size at step k (1-based); non-increasing in k."""
    return schedule.at(k)


@dataclass(frozen=True)
class HyperParams:
    beta1: float
    beta2: float
    schedule: LrSchedule
    eps: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0):
            raise ValueError(f"beta1 must be in [0,1), got {self.beta1}")
        if not (0.0 <= self.beta2 < 1.0):
            raise ValueError(f"beta2 must be in [0,1), got {self.beta2}")
        if self.eps < 0.0:
            raise ValueError("eps must be nonnegative")

    @property
    def alpha(self) -> float:
        return self.schedule.alpha

    def alpha_at(self, k: int) -> float:
        return self.schedule.at(k)


@dataclass(frozen=True)
class OptimizerState:
    """Iterate, first/second moments, max-corrected second moment, step count.

    k is the index of the *next* update: the initial state has k=1 and a
    step consuming gradient g^(k) produces the state holding x^(k+1).
    """

    x: np.ndarray
    m: np.ndarray
    v: np.ndarray
    vhat: np.ndarray
    k: int = 1

    @classmethod
    def initial(cls, x0) -> "OptimizerState":
        x0 = as_vec(x0).copy()
        z = np.zeros_like(x0)
        return cls(x=x0, m=z, v=z.copy(), vhat=z.copy(), k=1)

    @property
    def dim(self) -> int:
        return self.x.shape[0]


def step(
    state: OptimizerState,
    g,
    alpha_k: float,
    hp: HyperParams,
    box: Optional[BoxConstraint] = None,
) -> OptimizerState:
    """One full moment-and-iterate update; returns the advanced state."""
    g = as_vec(g)
    if g.shape != state.x.shape:
        raise ValueError(f"gradient dimension {g.shape[0]} != state dimension {state.dim}")
    if not np.all(np.isfinite(g)):
        raise ValueError("gradient has non-finite entries")
    if alpha_k <= 0.0:
        raise ValueError("alpha_k must be positive")

    m = hp.beta1 * state.m + (1.0 - hp.beta1) * g
    v = hp.beta2 * state.v + (1.0 - hp.beta2) * g * g
    vhat = np.maximum(state.vhat, v)

    denom = np.sqrt(vhat) + hp.eps
    live = denom > 0.0
    direction = np.zeros_like(m)
    # freeze rule: coordinates with a zero denominator keep their value
    np.divide(m, denom, out=direction, where=live)
    x = state.x - alpha_k * direction
    if box is not None:
        x = project_box(x, box)
    return OptimizerState(x=x, m=m, v=v, vhat=vhat, k=state.k + 1)


def run_serial(
    problem,
    hp: HyperParams,
    steps: int,
    seed: int,
    batch_size: int = 1,
    box: Optional[BoxConstraint] = None,
    x0=None,
    on_step: Optional[Callable] = None,
) -> list[OptimizerState]:
    """Reference no-delay run: every gradient is evaluated at the current x.

    Deterministic given the seed; gradient batch seeds are derived exactly
    as the simulated runtime derives them for worker 0, so a zero-delay
    simulation must reproduce this trajectory bit for bit.

    Returns the visited states x^(1)..x^(steps+1) in order.
    """
    from .problems import derive_batch_seed  # local to keep module layering one-way

    if box is None:
        box = getattr(problem, "box", None)
    if x0 is None:
        x0 = problem.initial_point()
    if box is not None:
        x0 = project_box(as_vec(x0), box)
    state = OptimizerState.initial(x0)
    trajectory = [state]
    for k in range(1, steps + 1):
        bseed = derive_batch_seed(seed, 0, k)
        g = problem.minibatch_grad(state.x, batch_size, bseed)
        a = hp.alpha_at(state.k)
        new = step(state, g, a, hp, box)
        if on_step is not None:
            on_step(state, new, g, a)
        state = new
        trajectory.append(state)
    return trajectory
