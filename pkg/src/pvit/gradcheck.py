"""Central-difference gradient verification for tape gradients.

The numeric side is (f(theta+eps) - f(theta-eps)) / (2 eps) per element, the
analytic side is one backward pass. Relative error uses the denominator
max(|analytic|, |numeric|, 1e-8). Intended for double precision; float32
inputs are allowed but the defaults assume float64 noise floors.

For large parameter sets an exhaustive sweep is quadratic in cost, so
``elements_per_param`` caps how many elements of each tensor are differenced
(a deterministic pseudo-random subset); None sweeps everything.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolation
from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_err: float = 0.0
    per_param: dict[str, float] = field(default_factory=dict)
    checked_elements: int = 0

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol

    def summary(self) -> str:
        lines = [f"{name}: max rel err {err:.3e}" for name, err in self.per_param.items()]
        lines.append(f"overall: {self.max_rel_err:.3e} over {self.checked_elements} elements")
        return "\n".join(lines)


def grad_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor] | dict[str, Tensor],
    eps: float | Sequence[float] = 1e-5,
    elements_per_param: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of the scalar `fn()` against central differences.

    `fn` must be a deterministic closure over `params`; determinism is
    enforced by comparing two forward evaluations bit-for-bit.

    `eps` may be a sequence of step sizes, in which case an element scores the
    best agreement across them: coordinates whose true derivative is exactly
    zero are noise-limited (want large eps, no truncation error exists there)
    while high-curvature coordinates are truncation-limited (want small eps),
    and no single step size serves both.
    """
    named = params if isinstance(params, dict) else {f"param{i}": p for i, p in enumerate(params)}
    v1 = fn().data.copy()
    v2 = fn().data.copy()
    if not np.array_equal(v1, v2):
        raise ContractViolation("grad_check refused: function is not deterministic across forward passes")

    for p in named.values():
        p.grad = None
    out = fn()
    if out.size != 1:
        raise ContractViolation("grad_check needs a scalar-valued function")
    out.backward()
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in named.items()}

    eps_values = (eps,) if isinstance(eps, (int, float)) else tuple(eps)
    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    for name, p in named.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if elements_per_param is None or elements_per_param >= n:
            idx = np.arange(n)
        else:
            idx = rng.choice(n, size=elements_per_param, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            rel = None
            for e in eps_values:
                flat[i] = orig + e
                f_plus = float(fn().data)
                flat[i] = orig - e
                f_minus = float(fn().data)
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * e)
                a = float(analytic[name].reshape(-1)[i])
                r = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                rel = r if rel is None else min(rel, r)
            worst = max(worst, rel)
        report.per_param[name] = worst
        report.max_rel_err = max(report.max_rel_err, worst)
        report.checked_elements += len(idx)
    return report
