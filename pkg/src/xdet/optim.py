"""Learning-rate schedules and first-order optimizers.

Schedules evaluate on epoch granularity; the warm-up factor evaluates on
iteration granularity and multiplies the base schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ScheduleSpec",
    "lr_at",
    "warmup_factor",
    "OptimizerState",
    "sgd_step",
    "momentum_step",
    "adam_step",
    "Optimizer",
    "make_optimizer",
]

SCHEDULE_KINDS = ("constant", "step", "time", "exponential", "cosine")
OPTIMIZER_KINDS = ("sgd", "momentum", "nesterov", "adam")


@dataclass(frozen=True)
class ScheduleSpec:
    """Declarative learning-rate law.

    ``gamma`` is the decay factor for step/time/exponential kinds,
    ``step_width`` the step-decay width in epochs, ``horizon`` the cosine
    horizon in epochs, and ``warmup_steps`` the linear warm-up length in
    iterations (0 disables warm-up).
    """

    kind: str = "constant"
    alpha0: float = 0.01
    gamma: float = 0.5
    step_width: float = 10.0
    horizon: float = 100.0
    warmup_steps: int = 0

    def __post_init__(self) -> None:
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.alpha0 <= 0:
            raise ValueError(f"alpha0 must be positive: {self.alpha0}")
        if self.kind in ("step", "time", "exponential") and not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1] for {self.kind}: {self.gamma}")
        if self.kind == "step" and self.step_width < 1:
            raise ValueError(f"step width must be >= 1: {self.step_width}")
        if self.kind == "cosine" and self.horizon < 1:
            raise ValueError(f"cosine horizon must be >= 1: {self.horizon}")
        if self.warmup_steps < 0:
            raise ValueError(f"warmup_steps must be >= 0: {self.warmup_steps}")


def warmup_factor(spec: ScheduleSpec, step: int) -> float:
    """Linear ramp step/warmup_steps, reaching exactly 1 at warmup_steps."""
    if spec.warmup_steps <= 0 or step >= spec.warmup_steps:
        return 1.0
    return step / spec.warmup_steps


def lr_at(spec: ScheduleSpec, n: float, step: int = 0) -> float:
    """Learning rate at epoch ``n`` and iteration ``step``."""
    if n < 0 or step < 0:
        raise ValueError(f"epoch and step must be >= 0: n={n}, step={step}")
    if spec.kind == "constant":
        base = spec.alpha0
    elif spec.kind == "step":
        base = spec.alpha0 * spec.gamma ** math.floor(n / spec.step_width)
    elif spec.kind == "time":
        base = spec.alpha0 / (1.0 + spec.gamma * n)
    elif spec.kind == "exponential":
        base = spec.alpha0 * spec.gamma ** n
    else:  # cosine
        frac = min(n, spec.horizon) / spec.horizon
        base = 0.5 * (1.0 + math.cos(math.pi * frac)) * spec.alpha0
    return base * warmup_factor(spec, step)


@dataclass
class OptimizerState:
    """Per-parameter accumulators plus optimizer hyper-parameters.

    ``velocity`` holds the momentum buffer (also ADAM's first moment);
    ``second_moment`` holds ADAM's squared-gradient average. Both are
    lazily initialized to zeros shaped like the parameters.
    """

    kind: str = "sgd"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    velocity: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.kind not in OPTIMIZER_KINDS:
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.eps <= 0:
            raise ValueError(f"eps must be positive: {self.eps}")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ValueError(f"betas must lie in [0, 1): {self.beta1}, {self.beta2}")


def _as_list(x) -> tuple[list[np.ndarray], bool]:
    if isinstance(x, (list, tuple)):
        return list(x), True
    return [x], False


def _check_shapes(params: list[np.ndarray], grads: list[np.ndarray]) -> None:
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params vs {len(grads)} grads")
    for p, g in zip(params, grads):
        if np.shape(p) != np.shape(g):
            raise ValueError(f"shape mismatch: {np.shape(p)} vs {np.shape(g)}")


def _ensure_buffers(state: OptimizerState, params: list[np.ndarray], second: bool) -> None:
    if not state.velocity:
        state.velocity = [np.zeros_like(p) for p in params]
    if second and not state.second_moment:
        state.second_moment = [np.zeros_like(p) for p in params]


def sgd_step(params, grads, alpha: float):
    """Plain gradient step W <- W - alpha * g, in place."""
    plist, was_seq = _as_list(params)
    glist, _ = _as_list(grads)
    _check_shapes(plist, glist)
    for p, g in zip(plist, glist):
        p -= alpha * g
    return params if was_seq else plist[0]


def momentum_step(state: OptimizerState, params, grads, alpha: float, nesterov: bool = False):
    """Momentum update v <- mu*v + alpha*g; plain: W -= v, Nesterov: W -= mu*v + alpha*g.

    The Nesterov form is the look-ahead reformulation usable with gradients
    evaluated at the current parameters.
    """
    plist, _ = _as_list(params)
    glist, _ = _as_list(grads)
    _check_shapes(plist, glist)
    _ensure_buffers(state, plist, second=False)
    mu = state.momentum
    for p, g, v in zip(plist, glist, state.velocity):
        v *= mu
        v += alpha * g
        if nesterov:
            p -= mu * v + alpha * g
        else:
            p -= v
    return state, params


def adam_step(state: OptimizerState, params, grads, alpha: float):
    """Bias-corrected ADAM update with the standard recurrences."""
    plist, _ = _as_list(params)
    glist, _ = _as_list(grads)
    _check_shapes(plist, glist)
    _ensure_buffers(state, plist, second=True)
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for p, g, v, s2 in zip(plist, glist, state.velocity, state.second_moment):
        v *= state.beta1
        v += (1.0 - state.beta1) * g
        s2 *= state.beta2
        s2 += (1.0 - state.beta2) * (g * g)
        v_hat = v / bc1
        s_hat = s2 / bc2
        p -= alpha * v_hat / (np.sqrt(s_hat) + state.eps)
    return state, params


class Optimizer:
    """Uniform step interface over the optimizer kinds, for training loops."""

    def __init__(
        self,
        kind: str,
        momentum: float = 0.9,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        max_grad_norm: float | None = None,
    ) -> None:
        self.state = OptimizerState(
            kind=kind, momentum=momentum, beta1=beta1, beta2=beta2, eps=eps
        )
        self.max_grad_norm = max_grad_norm

    @property
    def kind(self) -> str:
        return self.state.kind

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> None:
        if self.max_grad_norm is not None:
            total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
            if total > self.max_grad_norm:
                scale = self.max_grad_norm / total
                grads = [g * scale for g in grads]
        if self.state.kind == "sgd":
            sgd_step(params, grads, lr)
        elif self.state.kind == "momentum":
            momentum_step(self.state, params, grads, lr, nesterov=False)
        elif self.state.kind == "nesterov":
            momentum_step(self.state, params, grads, lr, nesterov=True)
        else:
            adam_step(self.state, params, grads, lr)


def make_optimizer(kind: str, **kwargs) -> Optimizer:
    return Optimizer(kind, **kwargs)
