"""Optimizers (SGD-momentum and decoupled-weight-decay adaptive moments) and
scalar schedules (constant / cosine / linear-warmup-then-cosine).

Parameters are updated in place on their numpy buffers. Weight decay is
decoupled: theta <- theta - lr * wd * theta before the gradient-based step,
and is applied only to parameters flagged in ``OptimState.decay_mask``
(convention: matrices decay, 1-d vectors such as biases and norm gains do
not).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractViolation

MODES = ("sgd-momentum", "adaptive")


@dataclass
class OptimState:
    """Per-parameter buffers for one optimizer instance.

    Buffers are keyed like the parameter dict. ``adaptive`` keeps first/second
    moments plus a step counter; ``sgd-momentum`` keeps one velocity buffer.
    """

    mode: str = "adaptive"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    velocity: dict = field(default_factory=dict)
    moment1: dict = field(default_factory=dict)
    moment2: dict = field(default_factory=dict)
    decay_mask: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown optimizer mode {self.mode!r}, expected one of {MODES}")


def default_decay_mask(params: dict) -> dict:
    """Weight decay on matrices only; vectors (biases, gains, tokens) skip it."""
    return {k: p.data.ndim > 1 for k, p in params.items()}


def optimizer_step(state: OptimState, params: dict, grads: dict, lr: float, mode: str | None = None) -> None:
    """One update over a named parameter dict. `grads` maps the same keys to
    ndarrays (missing/None entries are skipped, e.g. frozen parameters)."""
    if lr < 0:
        raise ConfigError(f"learning rate must be >= 0, got {lr}")
    mode = state.mode if mode is None else mode
    if mode not in MODES:
        raise ConfigError(f"unknown optimizer mode {mode!r}")
    if not state.decay_mask:
        state.decay_mask = default_decay_mask(params)
    state.step_count += 1
    t = state.step_count
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        theta = p.data if hasattr(p, "data") else p
        if g.shape != theta.shape:
            raise ContractViolation(f"gradient shape {g.shape} != parameter shape {theta.shape} for {name!r}")
        if state.weight_decay and state.decay_mask.get(name, True):
            theta -= lr * state.weight_decay * theta
        if mode == "sgd-momentum":
            v = state.velocity.get(name)
            if v is None:
                v = state.velocity[name] = np.zeros_like(theta)
            v *= state.momentum
            v += g
            theta -= lr * v
        else:
            m = state.moment1.get(name)
            if m is None:
                m = state.moment1[name] = np.zeros_like(theta)
                state.moment2[name] = np.zeros_like(theta)
            v = state.moment2[name]
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * (g * g)
            m_hat = m / (1.0 - state.beta1**t)
            v_hat = v / (1.0 - state.beta2**t)
            theta -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


# -- schedules ----------------------------------------------------------------

SCHEDULE_KINDS = ("constant", "cosine", "linear-warmup-then-cosine")


@dataclass(frozen=True)
class Schedule:
    """Scalar-vs-step curve. `base` is the post-warmup peak, `final` the end
    value; warmup ramps linearly from `warmup_start` to `base`."""

    kind: str = "constant"
    base: float = 0.0
    final: float = 0.0
    warmup_steps: int = 0
    total_steps: int = 1
    warmup_start: float = 0.0

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError("warmup_steps must lie in [0, total_steps]")

    def __call__(self, step: int) -> float:
        return schedule_value(self, step)


def schedule_value(s: Schedule, step: int) -> float:
    if not 0 <= step <= s.total_steps:
        raise ContractViolation(f"step {step} outside [0, {s.total_steps}]")
    if s.kind == "constant":
        return s.base
    if s.kind == "linear-warmup-then-cosine" and step < s.warmup_steps:
        return s.warmup_start + (s.base - s.warmup_start) * step / s.warmup_steps
    start = s.warmup_steps if s.kind == "linear-warmup-then-cosine" else 0
    span = max(s.total_steps - start, 1)
    progress = (step - start) / span
    return s.final + 0.5 * (s.base - s.final) * (1.0 + math.cos(math.pi * progress))
