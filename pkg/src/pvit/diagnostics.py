"""Gradient verification suite: every differentiable primitive, plus the full
combined pre-training loss on the micro backbone, against central
differences in double precision.

The full-loss check differences a deterministic pseudo-random subset of
elements per parameter tensor (exhaustive sweeps over ~4e5 parameters would
blow the runtime budget); primitives are checked exhaustively on small
shapes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import distill, tensor as T
from .augment import CropParams
from .distill import HeadConfig
from .gradcheck import GradCheckReport, grad_check
from .pretrain import PretrainConfig, build_batch, init_state, pretrain_step
from .tensor import Tensor
from .vit import ViTConfig


def _t(rng, shape, dtype, scale=1.0, shift=0.0):
    return Tensor((rng.standard_normal(shape) * scale + shift).astype(dtype), requires_grad=True)


def check_primitives(dtype=np.float64, seed: int = 0) -> dict[str, float]:
    """Max relative error of each primitive's gradient on random small shapes."""
    rng = np.random.default_rng(seed)

    def weight(shape):
        return Tensor(rng.standard_normal(shape).astype(dtype))

    errs: dict[str, float] = {}

    def run(name, fn, params):
        report = grad_check(fn, params)
        errs[name] = report.max_rel_err

    a = _t(rng, (3, 4), dtype)
    b = _t(rng, (4,), dtype)
    r = weight((3, 4))
    run("add", lambda: T.tsum((a + b) * r), {"a": a, "b": b})
    run("sub", lambda: T.tsum((a - b) * r), {"a": a, "b": b})
    run("mul", lambda: T.tsum((a * b) * r), {"a": a, "b": b})
    d = _t(rng, (3, 4), dtype, shift=3.0)
    run("div", lambda: T.tsum((a / d) * r), {"a": a, "d": d})
    p = _t(rng, (3, 4), dtype, shift=2.5, scale=0.3)
    run("power", lambda: T.tsum((p**1.7) * r), {"p": p})
    run("exp", lambda: T.tsum(T.texp(a) * r), {"a": a})
    run("log", lambda: T.tsum(T.tlog(p) * r), {"p": p})
    run("sqrt", lambda: T.tsum(T.tsqrt(p) * r), {"p": p})
    run("relu", lambda: T.tsum(T.relu(a) * r), {"a": a})
    run("gelu", lambda: T.tsum(T.gelu(a) * r), {"a": a})

    m1 = _t(rng, (2, 3, 4), dtype)
    m2 = _t(rng, (4, 5), dtype)
    rm = weight((2, 3, 5))
    run("matmul", lambda: T.tsum(T.matmul(m1, m2) * rm), {"m1": m1, "m2": m2})

    s = _t(rng, (3, 5), dtype)
    rs = weight((3, 5))
    run("softmax", lambda: T.tsum(T.softmax(s, temperature=0.7) * rs), {"s": s})
    run("log_softmax", lambda: T.tsum(T.log_softmax(s, temperature=0.7) * rs), {"s": s})
    run("layer_normalize", lambda: T.tsum(T.layer_normalize(s) * rs), {"s": s})
    run("l2_normalize", lambda: T.tsum(T.l2_normalize(s) * rs), {"s": s})

    e = _t(rng, (6, 4), dtype)
    idx = np.array([0, 2, 2, 5])
    re_ = weight((4, 4))
    r32 = weight((3, 2))
    r64 = weight((6, 4))
    r423 = weight((4, 2, 3))
    r24 = weight((2, 4))
    r234 = weight((2, 3, 4))
    run("embedding_select", lambda: T.tsum(T.take(e, idx) * re_), {"e": e})
    run("slice", lambda: T.tsum(e[1:4, :2] * r32), {"e": e})
    run("concat", lambda: T.tsum(T.concat([a, a * 2.0], axis=0) * r64), {"a": a})
    run("transpose", lambda: T.tsum(m1.transpose((2, 0, 1)) * r423), {"m1": m1})
    run("reshape", lambda: T.tsum(m1.reshape((6, 4)) * r64), {"m1": m1})
    run("sum_axis", lambda: T.tsum(T.tsum(m1, axis=1) * r24), {"m1": m1})
    run("mean", lambda: T.tmean(m1 * r234), {"m1": m1})
    mask = rng.random((3, 4)) < 0.5
    run("masked_sum", lambda: T.masked_sum(a * r, mask), {"a": a})
    return errs


def micro_pretrain_config(out_dim: int = 8, dtype: str = "float64") -> PretrainConfig:
    """Micro backbone (p=8, d=64, depth 4, heads 4) on tiny views, K=8 head."""
    return PretrainConfig(
        vit=ViTConfig(patch_size=8, dim=64, depth=4, heads=4, pos_grid=(4, 2)),
        crops=CropParams(global_size=(32, 16), local_size=(16, 8), n_local=2),
        head=HeadConfig(in_dim=64, hidden_dim=64, bottleneck_dim=32, out_dim=out_dim),
        mask_ratio=0.4,
        batch_size=2,
        epochs=1,
        warmup_epochs=0,
        dtype=dtype,
    )


def micro_loss_fixture(out_dim: int = 8, seed: int = 0):
    """(trainable student params, deterministic total-loss closure) on a fixed
    micro batch; double precision."""
    cfg = micro_pretrain_config(out_dim=out_dim)
    state = init_state(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    images = [rng.random((cfg.crops.global_size[0], cfg.crops.global_size[1], 3)).astype(np.float32) for _ in range(cfg.batch_size)]
    batch = build_batch(images, list(range(len(images))), cfg, seed, epoch=0)

    def loss_fn() -> Tensor:
        t_cls, t_patch = _teacher_logits(state, cfg, batch)
        from .pretrain import _forward_globals, _forward_locals

        s_cls_g, s_patch = _forward_globals(state.student, cfg, batch.student_globals, batch.masks)
        s_cls_l = _forward_locals(state.student, cfg, batch.student_locals)
        l_dino = distill.dino_loss(t_cls, s_cls_g + s_cls_l, cfg.student_temp, 0.04, state.c_cls)
        l_mim = distill.mim_loss(t_patch, s_patch, batch.masks, cfg.student_temp, 0.04, state.c_patch)
        return distill.total_loss(l_dino, l_mim, cfg.lambda1, cfg.lambda2)

    params = {k: p for k, p in state.student.items() if p.requires_grad}
    return params, loss_fn


def _teacher_logits(state, cfg, batch):
    from .pretrain import _forward_globals

    t_cls, t_patch = _forward_globals(state.teacher, cfg, batch.teacher_globals)
    return [t.data for t in t_cls], [t.data for t in t_patch]


@dataclass
class SuiteResult:
    primitive_errs: dict[str, float] = field(default_factory=dict)
    full_loss: GradCheckReport | None = None

    @property
    def max_rel_err(self) -> float:
        worst = max(self.primitive_errs.values(), default=0.0)
        if self.full_loss is not None:
            worst = max(worst, self.full_loss.max_rel_err)
        return worst

    def summary(self) -> str:
        lines = [f"primitive {name}: {err:.3e}" for name, err in sorted(self.primitive_errs.items())]
        if self.full_loss is not None:
            lines.append(f"full combined loss: {self.full_loss.max_rel_err:.3e} over {self.full_loss.checked_elements} sampled elements")
        lines.append(f"max relative error: {self.max_rel_err:.3e}")
        return "\n".join(lines)


FULL_LOSS_EPS = (1e-5, 1e-3)  # small for curvature-limited, large for noise-limited elements


def run_gradient_suite(elements_per_param: int = 5, seed: int = 0) -> SuiteResult:
    result = SuiteResult(primitive_errs=check_primitives(seed=seed))
    params, loss_fn = micro_loss_fixture(seed=seed)
    result.full_loss = grad_check(
        loss_fn, params, eps=FULL_LOSS_EPS, elements_per_param=elements_per_param, seed=seed
    )
    return result


def reference_pretrain_step(seed: int = 0) -> float:
    """One micro pre-training step end to end; returns the loss (smoke path)."""
    from .optim import OptimState

    cfg = micro_pretrain_config(out_dim=8, dtype="float32")
    state = init_state(cfg, seed)
    rng = np.random.default_rng(seed)
    images = [rng.random((32, 16, 3)).astype(np.float32) for _ in range(cfg.batch_size)]
    batch = build_batch(images, [0, 1], cfg, seed, epoch=0)
    m = pretrain_step(state, batch, cfg, OptimState(), lr=1e-4, weight_decay=0.0, lambda_ema=0.996, teacher_temp=0.04)
    return m.l_total
