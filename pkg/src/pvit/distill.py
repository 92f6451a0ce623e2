"""Projection heads and the self-distillation objective.

Two head instances sit on top of the backbone: one maps the cls feature and
one maps every patch feature into a shared prototype space of dimension
``out_dim``. Each head is a 3-layer MLP to a bottleneck, l2-normalized, then
a weight-normalized linear layer onto the prototypes (gain fixed at 1 by
default).

The teacher side is pure numpy (it never receives gradients): its logits are
centered and sharpened into target distributions. The student side stays on
the tape. The cls-level loss averages teacher/student view pairs that do not
share crop geometry; the patch-level loss compares geometry-paired global
views position-by-position on masked positions only, normalized by the total
masked count.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractViolation
from .tensor import Tensor


@dataclass(frozen=True)
class HeadConfig:
    in_dim: int = 64
    hidden_dim: int = 256
    bottleneck_dim: int = 64
    out_dim: int = 1024  # prototype count, shared by cls and patch heads
    norm_last_layer: bool = True  # freeze the prototype gain at 1

    def __post_init__(self):
        if min(self.in_dim, self.hidden_dim, self.bottleneck_dim, self.out_dim) < 1:
            raise ConfigError("head dimensions must be positive")


@dataclass
class HeadOutputs:
    y_cls: Tensor  # (B, out_dim)
    y_patches: Tensor | None = None  # (B, n, out_dim)


def init_head_params(cfg: HeadConfig, rng: np.random.Generator, prefix: str, dtype=np.float32) -> dict[str, Tensor]:
    def w(shape):
        return Tensor(T.trunc_normal(rng, shape, std=0.02, dtype=dtype), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    params = {
        f"{prefix}.fc1.w": w((cfg.in_dim, cfg.hidden_dim)),
        f"{prefix}.fc1.b": zeros((cfg.hidden_dim,)),
        f"{prefix}.fc2.w": w((cfg.hidden_dim, cfg.hidden_dim)),
        f"{prefix}.fc2.b": zeros((cfg.hidden_dim,)),
        f"{prefix}.fc3.w": w((cfg.hidden_dim, cfg.bottleneck_dim)),
        f"{prefix}.fc3.b": zeros((cfg.bottleneck_dim,)),
        f"{prefix}.proto.v": w((cfg.out_dim, cfg.bottleneck_dim)),
        f"{prefix}.proto.g": Tensor(np.ones((cfg.out_dim,), dtype=dtype), requires_grad=not cfg.norm_last_layer),
    }
    return params


def apply_head(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    """MLP -> l2 norm -> weight-normalized prototype logits, along last axis."""
    h = T.gelu(T.matmul(x, params[f"{prefix}.fc1.w"]) + params[f"{prefix}.fc1.b"])
    h = T.gelu(T.matmul(h, params[f"{prefix}.fc2.w"]) + params[f"{prefix}.fc2.b"])
    h = T.matmul(h, params[f"{prefix}.fc3.w"]) + params[f"{prefix}.fc3.b"]
    h = T.l2_normalize(h)
    v = params[f"{prefix}.proto.v"]
    inv_norm = T.power(T.tsum(v * v, axis=1, keepdims=True), 0.5) ** -1.0
    w_eff = v * inv_norm * params[f"{prefix}.proto.g"].reshape((-1, 1))
    return T.matmul(h, w_eff.swapaxes(0, 1))


def project(features, params: dict[str, Tensor], with_patches: bool) -> HeadOutputs:
    """Cls head on z_cls; patch head applied position-shared on z_patches."""
    y_cls = apply_head(features.z_cls, params, "head_cls")
    y_patches = apply_head(features.z_patches, params, "head_patch") if with_patches else None
    return HeadOutputs(y_cls=y_cls, y_patches=y_patches)


# -- teacher targets ------------------------------------------------------------


def teacher_distribution(logits: np.ndarray, center: np.ndarray, teacher_temp: float) -> np.ndarray:
    """softmax((logits - center) / temp) along the last axis; no gradient."""
    if teacher_temp <= 0:
        raise ConfigError(f"teacher temperature must be positive, got {teacher_temp}")
    logits = np.asarray(logits)
    center = np.asarray(center)
    if logits.shape[-1] != center.shape[-1]:
        raise ContractViolation(f"center dim {center.shape[-1]} != logit dim {logits.shape[-1]}")
    z = (logits - center) / teacher_temp
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def update_center(center: np.ndarray, teacher_logits: np.ndarray, momentum: float) -> np.ndarray:
    """center' = m * center + (1 - m) * batch mean (all leading axes pooled)."""
    if not 0.0 <= momentum <= 1.0:
        raise ConfigError(f"center momentum must be in [0, 1], got {momentum}")
    logits = np.asarray(teacher_logits).reshape(-1, center.shape[-1])
    if logits.shape[0] == 0:
        raise ContractViolation("cannot update center from an empty batch")
    return momentum * center + (1.0 - momentum) * logits.mean(axis=0)


# -- losses -----------------------------------------------------------------------


def dino_loss(
    teacher_cls: list[np.ndarray],
    student_cls: list[Tensor],
    student_temp: float,
    teacher_temp: float,
    center: np.ndarray,
) -> Tensor:
    """Mean cross-entropy over (teacher global, student view) pairs, skipping
    the student global that shares the teacher view's geometry (same index)."""
    if len(teacher_cls) != 2:
        raise ContractViolation(f"expected 2 teacher globals, got {len(teacher_cls)}")
    if len(student_cls) < 2:
        raise ContractViolation("student needs at least its 2 global views")
    total = None
    n_pairs = 0
    for ti, t_logits in enumerate(teacher_cls):
        p_t = teacher_distribution(t_logits, center, teacher_temp)
        for si, s_logits in enumerate(student_cls):
            if si == ti:
                continue
            log_p_s = T.log_softmax(s_logits, temperature=student_temp)
            term = T.tmean(T.tsum(Tensor(-p_t.astype(log_p_s.dtype)) * log_p_s, axis=-1))
            total = term if total is None else total + term
            n_pairs += 1
    return total * (1.0 / n_pairs)


def mim_loss(
    teacher_patches: list[np.ndarray],
    student_patches: list[Tensor],
    masks: list[np.ndarray],
    student_temp: float,
    teacher_temp: float,
    center: np.ndarray,
) -> Tensor:
    """Per-position cross-entropy on masked positions of geometry-paired
    global views, averaged over the total masked count."""
    if not len(teacher_patches) == len(student_patches) == len(masks):
        raise ContractViolation("teacher views, student views and masks must pair up")
    total = None
    n_masked = 0
    for t_logits, s_logits, mask in zip(teacher_patches, student_patches, masks):
        mask = np.asarray(mask, dtype=bool)
        b, n, k = s_logits.shape
        if np.asarray(t_logits).shape != (b, n, k):
            raise ContractViolation("teacher/student patch logits are not geometry-paired")
        if mask.shape != (b, n):
            raise ContractViolation(f"mask shape {mask.shape} != (batch, n) = {(b, n)}")
        p_t = teacher_distribution(t_logits, center, teacher_temp)
        log_p_s = T.log_softmax(s_logits, temperature=student_temp)
        ce = T.tsum(Tensor(-p_t.astype(log_p_s.dtype)) * log_p_s, axis=-1)  # (B, n)
        term = T.masked_sum(ce, mask)
        total = term if total is None else total + term
        n_masked += int(mask.sum())
    if n_masked == 0:
        warnings.warn("mim_loss: no masked positions in any view, loss is 0", stacklevel=2)
    return total * (1.0 / max(n_masked, 1))


def total_loss(l_dino: Tensor, l_mim: Tensor, lambda1: float = 1.0, lambda2: float = 1.0) -> Tensor:
    if lambda1 < 0 or lambda2 < 0:
        raise ConfigError("loss weights must be >= 0")
    return l_dino * lambda1 + l_mim * lambda2


def ema_update(teacher: dict[str, Tensor], student: dict[str, Tensor], lam: float) -> None:
    """theta_t <- lam * theta_t + (1 - lam) * theta_s, in place, all entries."""
    if not 0.0 <= lam <= 1.0:
        raise ContractViolation(f"EMA coefficient must be in [0, 1], got {lam}")
    if teacher.keys() != student.keys():
        raise ContractViolation("teacher/student parameter sets differ in keys")
    for name, t in teacher.items():
        s = student[name]
        if t.shape != s.shape:
            raise ContractViolation(f"shape mismatch for {name!r}: {t.shape} vs {s.shape}")
        t.data *= lam
        t.data += (1.0 - lam) * s.data
