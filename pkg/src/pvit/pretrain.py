"""Student/teacher pre-training loop: multi-crop views, block masks, combined
cls-distillation + masked-patch objective, EMA teacher, centering, schedules,
checkpoints.

Per step: build views, sample block masks for the two student globals,
forward the teacher on the unmasked globals (no gradient), forward the
student on the masked globals plus unmasked locals, backprop the weighted
loss, update the student, EMA the teacher, update both centering vectors.

The learning-rate rule is lr = 0.0005 * batch_size / 256 clamped at 0.002
(linear warmup, cosine decay) unless an explicit base_lr overrides it.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import distill
from .augment import CropParams, multi_crop_views
from .checkpoint import Checkpoint, config_hash, load_checkpoint, save_checkpoint
from .distill import HeadConfig, init_head_params, project
from .errors import ConfigError, ContractViolation
from .imageio import decode_ppm
from .manifest import load_manifest, split_entries
from .masking import sample_block_mask
from .optim import OptimState, Schedule, optimizer_step
from .tensor import Tensor
from .vit import ViTConfig, encode, init_vit_params, patch_embed

LR_RULE_COEF = 0.0005
LR_RULE_DENOM = 256
LR_RULE_CAP = 0.002


def pretrain_lr(batch_size: int, base_lr: float | None = None) -> float:
    """0.0005 * batch/256, clamped to 0.002; explicit base_lr wins."""
    if base_lr is not None:
        return base_lr
    return min(LR_RULE_COEF * batch_size / LR_RULE_DENOM, LR_RULE_CAP)


@dataclass(frozen=True)
class PretrainConfig:
    vit: ViTConfig = field(default_factory=ViTConfig)
    crops: CropParams = field(default_factory=CropParams)
    head: HeadConfig = field(default_factory=HeadConfig)
    lambda1: float = 1.0
    lambda2: float = 1.0
    student_temp: float = 0.1
    teacher_temp_start: float = 0.04
    teacher_temp_final: float = 0.07
    teacher_temp_warmup_epochs: int = 30
    center_momentum: float = 0.9
    mask_ratio: float = 0.3
    epochs: int = 30
    batch_size: int = 32
    checkpoint_interval: int = 20
    base_lr: float | None = None
    min_lr: float = 1e-6
    warmup_epochs: int = 10
    weight_decay: float = 0.04
    weight_decay_final: float = 0.4
    ema_base: float = 0.996
    ema_final: float = 1.0
    freeze_proto_epochs: int = 1
    dtype: str = "float32"

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("loss weights must be >= 0")
        if min(self.student_temp, self.teacher_temp_start, self.teacher_temp_final) <= 0:
            raise ConfigError("temperatures must be positive")
        if self.checkpoint_interval < 1:
            raise ConfigError("checkpoint_interval must be >= 1")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError("mask_ratio must be in [0, 1]")
        if self.head.in_dim != self.vit.dim:
            raise ConfigError(f"head in_dim {self.head.in_dim} != backbone dim {self.vit.dim}")
        gh = self.crops.global_size[0] // self.vit.patch_size
        gw = self.crops.global_size[1] // self.vit.patch_size
        if (gh, gw) != self.vit.pos_grid:
            raise ConfigError(
                f"positional grid {self.vit.pos_grid} does not match global views"
                f" {self.crops.global_size} at patch size {self.vit.patch_size}"
            )


@dataclass
class TeacherStudentState:
    student: dict[str, Tensor]
    teacher: dict[str, Tensor]
    c_cls: np.ndarray
    c_patch: np.ndarray
    step: int = 0
    epoch: int = 0


def init_state(cfg: PretrainConfig, seed: int) -> TeacherStudentState:
    dtype = np.dtype(cfg.dtype).type
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    student = init_vit_params(cfg.vit, rng, dtype=dtype)
    student.update(init_head_params(cfg.head, rng, "head_cls", dtype=dtype))
    student.update(init_head_params(cfg.head, rng, "head_patch", dtype=dtype))
    teacher = {k: Tensor(v.data.copy(), requires_grad=False) for k, v in student.items()}
    k = cfg.head.out_dim
    return TeacherStudentState(
        student=student,
        teacher=teacher,
        c_cls=np.zeros(k, dtype=dtype),
        c_patch=np.zeros(k, dtype=dtype),
    )


@dataclass
class PretrainBatch:
    teacher_globals: list[np.ndarray]  # 2 x (B, H, W, 3)
    student_globals: list[np.ndarray]  # 2 x (B, H, W, 3), geometry-paired
    student_locals: list[np.ndarray]  # n_local x (B, h, w, 3)
    masks: list[np.ndarray]  # 2 x (B, n) bool


def build_batch(
    images: list[np.ndarray],
    item_ids: list[int],
    cfg: PretrainConfig,
    seed: int,
    epoch: int,
    workers: int = 1,
) -> PretrainBatch:
    """Augment one batch; per-item RNG streams keep the result independent of
    worker scheduling."""
    gh = cfg.crops.global_size[0] // cfg.vit.patch_size
    gw = cfg.crops.global_size[1] // cfg.vit.patch_size

    def one(args):
        img, item = args
        rng = np.random.default_rng(np.random.SeedSequence([seed, 4, epoch, item]))
        views = multi_crop_views(img, cfg.crops, rng)
        masks = []
        for g in range(2):
            mrng = np.random.default_rng(np.random.SeedSequence([seed, 5, epoch, item, g]))
            masks.append(sample_block_mask(gh, gw, cfg.mask_ratio, mrng).mask)
        return views, masks

    work = list(zip(images, item_ids))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, work))
    else:
        results = [one(a) for a in work]

    return PretrainBatch(
        teacher_globals=[np.stack([r[0].teacher_globals[g] for r in results]) for g in range(2)],
        student_globals=[np.stack([r[0].student_globals[g] for r in results]) for g in range(2)],
        student_locals=[
            np.stack([r[0].student_locals[j] for r in results]) for j in range(cfg.crops.n_local)
        ],
        masks=[np.stack([r[1][g] for r in results]) for g in range(2)],
    )


def _forward_globals(params, cfg: PretrainConfig, views: list[np.ndarray], masks=None):
    """Both global views in one batched pass; returns per-view cls/patch logits."""
    b = views[0].shape[0]
    imgs = np.concatenate(views, axis=0)
    mask = np.concatenate(masks, axis=0) if masks is not None else None
    feats = encode(patch_embed(imgs, params, cfg.vit, mask), params, cfg.vit)
    out = project(feats, params, with_patches=True)
    split = lambda t: [t[:b], t[b:]]
    return split(out.y_cls), split(out.y_patches)


def _forward_locals(params, cfg: PretrainConfig, views: list[np.ndarray]):
    if not views:
        return []
    b = views[0].shape[0]
    imgs = np.concatenate(views, axis=0)
    feats = encode(patch_embed(imgs, params, cfg.vit), params, cfg.vit)
    y = project(feats, params, with_patches=False).y_cls
    return [y[i * b : (i + 1) * b] for i in range(len(views))]


@dataclass
class StepMetrics:
    l_dino: float
    l_mim: float
    l_total: float
    lr: float
    lambda_ema: float
    masked_fraction: float


def pretrain_step(
    state: TeacherStudentState,
    batch: PretrainBatch,
    cfg: PretrainConfig,
    opt: OptimState,
    lr: float,
    weight_decay: float,
    lambda_ema: float,
    teacher_temp: float,
    freeze_proto: bool = False,
) -> StepMetrics:
    """One optimization step over a prepared batch."""
    for p in state.student.values():
        p.grad = None

    t_cls, t_patch = _forward_globals(state.teacher, cfg, batch.teacher_globals)
    t_cls = [t.data for t in t_cls]
    t_patch = [t.data for t in t_patch]

    s_cls_g, s_patch = _forward_globals(state.student, cfg, batch.student_globals, batch.masks)
    s_cls_local = _forward_locals(state.student, cfg, batch.student_locals)

    l_dino = distill.dino_loss(
        t_cls, s_cls_g + s_cls_local, cfg.student_temp, teacher_temp, state.c_cls
    )
    l_mim = distill.mim_loss(
        t_patch, s_patch, batch.masks, cfg.student_temp, teacher_temp, state.c_patch
    )
    loss = distill.total_loss(l_dino, l_mim, cfg.lambda1, cfg.lambda2)
    loss.backward()

    grads = {}
    for name, p in state.student.items():
        if p.grad is None or not p.requires_grad:
            continue
        if freeze_proto and ".proto." in name:
            continue
        grads[name] = p.grad
    opt.weight_decay = weight_decay
    optimizer_step(opt, state.student, grads, lr)

    distill.ema_update(state.teacher, state.student, lambda_ema)
    state.c_cls = distill.update_center(state.c_cls, np.concatenate(t_cls, axis=0), cfg.center_momentum)
    state.c_patch = distill.update_center(
        state.c_patch, np.concatenate(t_patch, axis=0), cfg.center_momentum
    )

    b, n = batch.masks[0].shape
    state.step += 1
    return StepMetrics(
        l_dino=float(l_dino.data),
        l_mim=float(l_mim.data),
        l_total=float(loss.data),
        lr=lr,
        lambda_ema=lambda_ema,
        masked_fraction=float(sum(int(m.sum()) for m in batch.masks)) / (2 * b * n),
    )


def _state_tensors(state: TeacherStudentState, opt: OptimState) -> dict[str, np.ndarray]:
    out = {}
    for name, p in state.student.items():
        out[f"student/{name}"] = p.data
    for name, p in state.teacher.items():
        out[f"teacher/{name}"] = p.data
    out["center/cls"] = state.c_cls
    out["center/patch"] = state.c_patch
    for name, buf in opt.moment1.items():
        out[f"opt/m1/{name}"] = buf
    for name, buf in opt.moment2.items():
        out[f"opt/m2/{name}"] = buf
    for name, buf in opt.velocity.items():
        out[f"opt/v/{name}"] = buf
    return out


def _restore_state(ckpt: Checkpoint, state: TeacherStudentState, opt: OptimState) -> None:
    for name, arr in ckpt.tensors.items():
        if name.startswith("student/"):
            state.student[name[8:]].data[...] = arr
        elif name.startswith("teacher/"):
            state.teacher[name[8:]].data[...] = arr
        elif name == "center/cls":
            state.c_cls = arr.copy()
        elif name == "center/patch":
            state.c_patch = arr.copy()
        elif name.startswith("opt/m1/"):
            opt.moment1[name[7:]] = arr.copy()
        elif name.startswith("opt/m2/"):
            opt.moment2[name[7:]] = arr.copy()
        elif name.startswith("opt/v/"):
            opt.velocity[name[6:]] = arr.copy()
    state.epoch = ckpt.epoch
    state.step = ckpt.step
    opt.step_count = ckpt.extra.get("opt_step_count", ckpt.step)


def pretrain_config_dict(cfg: PretrainConfig, seed: int) -> dict:
    from .config import dataclass_to_dict  # local import avoids a cycle

    d = dataclass_to_dict(cfg)
    d["seed"] = seed
    return d


def run_pretrain(
    cfg: PretrainConfig,
    manifest_path,
    out_dir,
    seed: int = 0,
    workers: int = 1,
    resume_from=None,
    log_every: int = 1,
) -> Path:
    """Full pre-training run; returns the path of the final checkpoint."""
    manifest_path = Path(manifest_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = split_entries(load_manifest(manifest_path), "pretrain")
    if not entries:
        raise ContractViolation("manifest has an empty pretrain split")
    root = manifest_path.parent
    images = [decode_ppm((root / e.path).read_bytes()) for e in entries]

    state = init_state(cfg, seed)
    opt = OptimState(mode="adaptive")
    cfg_hash = config_hash(pretrain_config_dict(cfg, seed))

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt.config_hash != cfg_hash:
            raise ConfigError(
                f"resume checkpoint {resume_from} was written with a different config"
                f" (hash {ckpt.config_hash[:12]} != {cfg_hash[:12]})"
            )
        _restore_state(ckpt, state, opt)

    n = len(images)
    steps_per_epoch = max(1, n // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    lr_sched = Schedule(
        "linear-warmup-then-cosine",
        base=pretrain_lr(cfg.batch_size, cfg.base_lr),
        final=cfg.min_lr,
        warmup_steps=min(cfg.warmup_epochs * steps_per_epoch, total_steps),
        total_steps=total_steps,
    )
    wd_sched = Schedule("cosine", base=cfg.weight_decay, final=cfg.weight_decay_final, total_steps=total_steps)
    ema_sched = Schedule("cosine", base=cfg.ema_base, final=cfg.ema_final, total_steps=total_steps)
    temp_warmup = min(cfg.teacher_temp_warmup_epochs * steps_per_epoch, total_steps)
    temp_sched = Schedule(
        "linear-warmup-then-cosine",
        base=cfg.teacher_temp_final,
        final=cfg.teacher_temp_final,
        warmup_steps=temp_warmup,
        total_steps=total_steps,
        warmup_start=cfg.teacher_temp_start,
    )

    metrics_path = out_dir / "metrics.jsonl"
    mode = "a" if resume_from is not None else "w"
    last_ckpt = Path(resume_from) if resume_from is not None else None
    with open(metrics_path, mode, encoding="utf-8") as log:
        for epoch in range(state.epoch, cfg.epochs):
            order = np.random.default_rng(np.random.SeedSequence([seed, 6, epoch])).permutation(n)
            for b in range(steps_per_epoch):
                idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                if idx.size == 0:
                    idx = order[:n]
                batch = build_batch([images[i] for i in idx], [int(i) for i in idx], cfg, seed, epoch, workers)
                step = epoch * steps_per_epoch + b
                m = pretrain_step(
                    state,
                    batch,
                    cfg,
                    opt,
                    lr=lr_sched(step),
                    weight_decay=wd_sched(step),
                    lambda_ema=ema_sched(step),
                    teacher_temp=temp_sched(step),
                    freeze_proto=epoch < cfg.freeze_proto_epochs,
                )
                if (b % log_every) == 0 or b == steps_per_epoch - 1:
                    log.write(
                        json.dumps(
                            {
                                "epoch": epoch,
                                "step": step,
                                "l_dino": m.l_dino,
                                "l_mim": m.l_mim,
                                "lr": m.lr,
                                "lambda_ema": m.lambda_ema,
                                "masked_fraction": m.masked_fraction,
                            }
                        )
                        + "\n"
                    )
            state.epoch = epoch + 1
            if (epoch + 1) % cfg.checkpoint_interval == 0 or epoch + 1 == cfg.epochs:
                last_ckpt = out_dir / f"ckpt_epoch{epoch + 1:04d}.pvit"
                save_checkpoint(
                    last_ckpt,
                    _state_tensors(state, opt),
                    config_hash=cfg_hash,
                    epoch=state.epoch,
                    step=state.step,
                    rng_state={"seed": seed, "next_epoch": state.epoch},
                    config=pretrain_config_dict(cfg, seed),
                    extra={"opt_step_count": opt.step_count},
                )
    if last_ckpt is None:
        raise ContractViolation("run produced no checkpoint (zero epochs and no resume source)")
    return last_ckpt
