"""Supervised ReID fine-tuning of a pre-trained backbone.

PK batches (P identities x K images) feed the backbone; the cls feature f_t
drives batch-hard triplet loss directly, while the ID cross-entropy consumes
the classifier on the batch-normalized feature f_i (BNNeck: normalization
with learned per-dimension scale and bias fixed at zero). Retrieval later
uses f_i. Training starts from the TEACHER parameters of a pre-training
checkpoint (or from random initialization for the ablation baseline).

lr = 0.0004 * (P*K) / 64 with a 20-epoch linear warmup, then cosine decay.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .augment import random_erase, resize_keep_aspect
from .checkpoint import config_hash, load_checkpoint, save_checkpoint
from .errors import ConfigError, ContractViolation
from .imageio import decode_ppm
from .manifest import ManifestEntry, load_manifest, split_entries
from .optim import OptimState, Schedule, optimizer_step
from .tensor import Tensor
from .vit import ViTConfig, encode_images, init_vit_params, interpolate_pos_grid

FT_LR_COEF = 0.0004
FT_LR_DENOM = 64


def finetune_lr(batch_size: int, base_lr: float | None = None) -> float:
    """0.0004 * batch/64; explicit base_lr wins."""
    if base_lr is not None:
        return base_lr
    return FT_LR_COEF * batch_size / FT_LR_DENOM


@dataclass(frozen=True)
class FinetuneConfig:
    vit: ViTConfig = field(default_factory=ViTConfig)
    input_size: tuple[int, int] = (64, 32)
    p: int = 16  # identities per batch
    k: int = 4  # images per identity
    margin: float = 0.3
    label_smoothing: float = 0.1
    warmup_epochs: int = 20
    epochs: int = 60
    base_lr: float | None = None
    min_lr: float = 1e-6
    weight_decay: float = 1e-4
    momentum: float = 0.9
    neck_momentum: float = 0.1
    neck_eps: float = 1e-5
    flip_prob: float = 0.5
    erase_prob: float = 0.5
    dtype: str = "float32"

    def __post_init__(self):
        if self.p < 1 or self.k < 1:
            raise ConfigError("P and K must be >= 1")
        if self.margin < 0:
            raise ConfigError("triplet margin must be >= 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label smoothing must be in [0, 1)")

    @property
    def batch_size(self) -> int:
        return self.p * self.k


# -- BNNeck ---------------------------------------------------------------------


@dataclass
class NeckState:
    """BatchNorm-style neck: learned scale, bias pinned at zero."""

    scale: Tensor  # (d,), requires_grad
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, dim: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32) -> "NeckState":
        return cls(
            scale=Tensor(np.ones(dim, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(dim, dtype=dtype),
            running_var=np.ones(dim, dtype=dtype),
            momentum=momentum,
            eps=eps,
        )


def bnneck_forward(f_t: Tensor, neck: NeckState, training: bool) -> Tensor:
    """Normalize by batch statistics (training) or running statistics
    (inference); output = scale * normalized, zero bias."""
    if training:
        if f_t.shape[0] < 2:
            raise ContractViolation("BNNeck training mode needs a batch of >= 2")
        mean = T.tmean(f_t, axis=0, keepdims=True)
        centered = f_t - mean
        var = T.tmean(centered * centered, axis=0, keepdims=True)
        inv = (var + neck.eps) ** -0.5
        out = centered * inv
        m = neck.momentum
        neck.running_mean = (1.0 - m) * neck.running_mean + m * mean.data.reshape(-1)
        neck.running_var = (1.0 - m) * neck.running_var + m * var.data.reshape(-1)
    else:
        dtype = f_t.dtype
        inv = (1.0 / np.sqrt(neck.running_var + neck.eps)).astype(dtype)
        out = (f_t - Tensor(neck.running_mean.astype(dtype))) * Tensor(inv)
    return out * neck.scale


# -- batch sampling ---------------------------------------------------------------


def pk_sample(entries: list[ManifestEntry], p: int, k: int, rng: np.random.Generator) -> list[ManifestEntry]:
    """P distinct identities, K images each (with replacement if an identity
    has fewer than K images); output grouped by identity."""
    by_id: dict[int, list[ManifestEntry]] = {}
    for e in entries:
        by_id.setdefault(e.person_id, []).append(e)
    ids = sorted(by_id)
    if len(ids) < p:
        raise ConfigError(f"train split has {len(ids)} identities, need P={p}")
    chosen = rng.choice(len(ids), size=p, replace=False)
    batch = []
    for ci in chosen:
        pool = by_id[ids[int(ci)]]
        if len(pool) >= k:
            picks = rng.choice(len(pool), size=k, replace=False)
        else:
            picks = rng.integers(0, len(pool), size=k)
        batch.extend(pool[int(j)] for j in picks)
    return batch


# -- losses -----------------------------------------------------------------------


def pairwise_distances(f: Tensor) -> Tensor:
    """Euclidean distance matrix (B, B) on the tape."""
    sq = T.tsum(f * f, axis=1, keepdims=True)  # (B, 1)
    d2 = sq + sq.swapaxes(0, 1) - T.matmul(f, f.swapaxes(0, 1)) * 2.0
    return (T.relu(d2) + 1e-12) ** 0.5


def triplet_batch_hard(f_t: Tensor, labels: np.ndarray, margin: float) -> Tensor:
    """mean_a max(0, max_pos d(a,p) - min_neg d(a,n) + margin)."""
    labels = np.asarray(labels)
    b = f_t.shape[0]
    if labels.shape != (b,):
        raise ContractViolation(f"labels shape {labels.shape} != batch ({b},)")
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(b, dtype=bool)
    if not pos_mask.any(axis=1).all():
        bad = labels[~pos_mask.any(axis=1)][0]
        raise ContractViolation(f"label {bad} has a single instance in the batch")
    dist = pairwise_distances(f_t)
    d = dist.data
    ap_idx = np.where(pos_mask, d, -np.inf).argmax(axis=1)
    an_idx = np.where(~same, d, np.inf).argmin(axis=1)
    flat = dist.reshape((b * b,))
    rows = np.arange(b)
    d_ap = T.take(flat, rows * b + ap_idx)
    d_an = T.take(flat, rows * b + an_idx)
    return T.tmean(T.relu(d_ap - d_an + margin))


def id_cross_entropy(logits: Tensor, labels: np.ndarray, smoothing: float = 0.0) -> Tensor:
    """Label-smoothed cross-entropy, mean over the batch."""
    labels = np.asarray(labels)
    b, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ContractViolation(f"labels must lie in [0, {c})")
    if smoothing > 0 and c < 2:
        raise ContractViolation("label smoothing needs at least 2 classes")
    q = np.full((b, c), smoothing / (c - 1) if smoothing > 0 else 0.0, dtype=logits.dtype.name)
    q[np.arange(b), labels] = 1.0 - smoothing
    log_p = T.log_softmax(logits)
    return T.tmean(T.tsum(Tensor(-q) * log_p, axis=1))


# -- training loop ----------------------------------------------------------------


def load_backbone_from_pretrain(ckpt_path, cfg: ViTConfig, dtype=np.float32, prefix: str = "teacher/") -> dict[str, Tensor]:
    """Backbone tensors from a pre-training checkpoint's teacher parameters.

    The positional grid is re-interpolated when the fine-tune grid differs;
    any other shape mismatch fails fast listing the offending tensors.
    """
    ckpt = load_checkpoint(ckpt_path)
    rng = np.random.default_rng(0)
    params = init_vit_params(cfg, rng, dtype=dtype)
    bad = []
    for name, p in params.items():
        src = ckpt.tensors.get(prefix + name)
        if src is None:
            bad.append(f"{name} (missing)")
            continue
        if name == "pos.grid" and src.shape != p.data.shape:
            src = interpolate_pos_grid(src, p.data.shape[:2])
        if src.shape != p.data.shape:
            bad.append(f"{name} ({src.shape} vs {p.data.shape})")
            continue
        p.data[...] = src.astype(dtype)
    if bad:
        raise ConfigError(f"checkpoint {ckpt_path} incompatible with backbone: " + ", ".join(bad))
    return params


def finetune_config_dict(cfg: FinetuneConfig, seed: int) -> dict:
    from .config import dataclass_to_dict

    d = dataclass_to_dict(cfg)
    d["seed"] = seed
    return d


@dataclass
class FinetuneModel:
    backbone: dict[str, Tensor]
    neck: NeckState
    classifier: Tensor  # (d, n_classes), no bias
    label_ids: np.ndarray  # class index -> person_id


def init_finetune_model(cfg: FinetuneConfig, label_ids: np.ndarray, seed: int, backbone_ckpt=None) -> FinetuneModel:
    dtype = np.dtype(cfg.dtype).type
    rng = np.random.default_rng(np.random.SeedSequence([seed, 10]))
    if backbone_ckpt is not None:
        backbone = load_backbone_from_pretrain(backbone_ckpt, cfg.vit, dtype=dtype)
    else:
        backbone = init_vit_params(cfg.vit, rng, dtype=dtype)
    neck = NeckState.create(cfg.vit.dim, cfg.neck_momentum, cfg.neck_eps, dtype=dtype)
    classifier = Tensor(T.trunc_normal(rng, (cfg.vit.dim, len(label_ids)), std=0.02, dtype=dtype), requires_grad=True)
    return FinetuneModel(backbone, neck, classifier, label_ids)


def _augment_train_image(img: np.ndarray, cfg: FinetuneConfig, rng: np.random.Generator) -> np.ndarray:
    out = resize_keep_aspect(img, *cfg.input_size)
    if rng.random() < cfg.flip_prob:
        out = out[:, ::-1].copy()
    return random_erase(out, rng, prob=cfg.erase_prob)


def finetune_step(model: FinetuneModel, images: np.ndarray, labels: np.ndarray, cfg: FinetuneConfig, opt: OptimState, lr: float) -> tuple[float, float]:
    params = dict(model.backbone)
    params["neck.scale"] = model.neck.scale
    params["classifier.w"] = model.classifier
    for p in params.values():
        p.grad = None

    feats = encode_images(images, model.backbone, cfg.vit)
    f_t = feats.z_cls
    f_i = bnneck_forward(f_t, model.neck, training=True)
    logits = T.matmul(f_i, model.classifier)
    l_tri = triplet_batch_hard(f_t, labels, cfg.margin)
    l_id = id_cross_entropy(logits, labels, cfg.label_smoothing)
    (l_tri + l_id).backward()

    grads = {name: p.grad for name, p in params.items() if p.grad is not None}
    opt.weight_decay = cfg.weight_decay
    optimizer_step(opt, params, grads, lr)
    return float(l_tri.data), float(l_id.data)


def run_finetune(
    cfg: FinetuneConfig,
    manifest_path,
    out_dir,
    backbone_ckpt=None,
    seed: int = 0,
    log_every_epoch: bool = True,
) -> Path:
    """Fine-tune on the train split; emits the final checkpoint + loss log."""
    manifest_path = Path(manifest_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = split_entries(load_manifest(manifest_path), "train")
    if not entries:
        raise ContractViolation("manifest has an empty train split")
    root = manifest_path.parent
    images = {e.path: decode_ppm((root / e.path).read_bytes()) for e in entries}
    label_ids = np.array(sorted({e.person_id for e in entries}), dtype=np.int64)
    label_of = {pid: i for i, pid in enumerate(label_ids)}

    model = init_finetune_model(cfg, label_ids, seed, backbone_ckpt)
    opt = OptimState(mode="sgd-momentum", momentum=cfg.momentum)

    steps_per_epoch = max(1, -(-len(entries) // cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch
    lr_sched = Schedule(
        "linear-warmup-then-cosine",
        base=finetune_lr(cfg.batch_size, cfg.base_lr),
        final=cfg.min_lr,
        warmup_steps=min(cfg.warmup_epochs * steps_per_epoch, total_steps),
        total_steps=total_steps,
    )

    cfg_dict = finetune_config_dict(cfg, seed)
    metrics_path = out_dir / "metrics.jsonl"
    with open(metrics_path, "w", encoding="utf-8") as log:
        for epoch in range(cfg.epochs):
            tri_sum = id_sum = 0.0
            for b in range(steps_per_epoch):
                rng = np.random.default_rng(np.random.SeedSequence([seed, 7, epoch, b]))
                batch = pk_sample(entries, cfg.p, cfg.k, rng)
                imgs = np.stack(
                    [
                        _augment_train_image(
                            images[e.path],
                            cfg,
                            np.random.default_rng(np.random.SeedSequence([seed, 8, epoch, b, i])),
                        )
                        for i, e in enumerate(batch)
                    ]
                )
                labels = np.array([label_of[e.person_id] for e in batch])
                step = epoch * steps_per_epoch + b
                l_tri, l_id = finetune_step(model, imgs, labels, cfg, opt, lr_sched(step))
                tri_sum += l_tri
                id_sum += l_id
            if log_every_epoch:
                log.write(
                    json.dumps(
                        {
                            "epoch": epoch,
                            "step": (epoch + 1) * steps_per_epoch - 1,
                            "l_triplet": tri_sum / steps_per_epoch,
                            "l_id": id_sum / steps_per_epoch,
                            "lr": lr_sched(epoch * steps_per_epoch),
                        }
                    )
                    + "\n"
                )

    ckpt_path = out_dir / "finetune_final.pvit"
    tensors = {f"backbone/{k}": p.data for k, p in model.backbone.items()}
    tensors["neck/scale"] = model.neck.scale.data
    tensors["neck/running_mean"] = model.neck.running_mean
    tensors["neck/running_var"] = model.neck.running_var
    tensors["classifier/w"] = model.classifier.data
    tensors["label_ids"] = model.label_ids
    save_checkpoint(
        ckpt_path,
        tensors,
        config_hash=config_hash(cfg_dict),
        epoch=cfg.epochs,
        step=total_steps,
        rng_state={"seed": seed},
        config=cfg_dict,
    )
    return ckpt_path
