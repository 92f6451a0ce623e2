"""Seeded synthetic person-image generator.

Stands in for real surveillance data: each identity has a persistent
appearance vector (hair/torso/leg/shoe colors, body proportions, optional
bag), rendered as a simple figure on a noisy background with per-image pose
jitter, per-camera color gain, and optional occluding rectangles. Identity
sets of the pretrain / train / query+gallery splits are disjoint, so
retrieval always measures generalization to unseen people.

All randomness is derived from integer seed sequences, so identical configs
produce byte-identical directory trees.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .imageio import encode_ppm
from .manifest import ManifestEntry, write_manifest


@dataclass(frozen=True)
class SynthConfig:
    n_pretrain_ids: int = 200
    n_train_ids: int = 50
    n_eval_ids: int = 50
    images_per_id: int = 10
    n_cameras: int = 3
    image_h: int = 64
    image_w: int = 32
    occlusion_prob: float = 0.25
    camera_color_shift: float = 0.12
    queries_per_id: int = 2
    seed: int = 0

    def __post_init__(self):
        for name in ("n_pretrain_ids", "n_train_ids", "n_eval_ids", "images_per_id", "n_cameras", "image_h", "image_w"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("occlusion_prob",):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")
        if self.n_eval_ids > 0 and (self.n_cameras < 2 or self.images_per_id < self.queries_per_id + 1):
            raise ConfigError("eval split needs >= 2 cameras and images_per_id > queries_per_id")


def _id_rng(seed: int, pid: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 1, pid]))


def _img_rng(seed: int, pid: int, idx: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 2, pid, idx]))


def _camera_gains(seed: int, cam: int, magnitude: float) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3, cam]))
    return 1.0 + rng.uniform(-magnitude, magnitude, size=3)


def _identity_attrs(rng: np.random.Generator) -> dict:
    def color():
        return rng.uniform(0.08, 0.95, size=3)

    return {
        "skin": rng.uniform(0.55, 0.9) * np.array([1.0, 0.85, 0.7]),
        "hair": color(),
        "torso": color(),
        "legs": color(),
        "shoes": color(),
        "torso_w": rng.uniform(0.5, 0.8),
        "head_r": rng.uniform(0.10, 0.15),
        "leg_gap": rng.uniform(0.08, 0.2),
        "has_bag": bool(rng.random() < 0.5),
        "bag_color": color(),
        "bag_side": int(rng.integers(0, 2)),
    }


def _render_person(h: int, w: int, attrs: dict, rng: np.random.Generator) -> np.ndarray:
    img = rng.uniform(0.35, 0.65, size=3) + rng.normal(0.0, 0.06, size=(h, w, 3))

    scale = rng.uniform(0.88, 1.06)
    cx = (0.5 + rng.uniform(-0.08, 0.08)) * w
    top = rng.uniform(0.0, 0.06) * h
    bh = 0.92 * h * scale  # body height in pixels

    ys, xs = np.ogrid[0:h, 0:w]

    def rect(y0, y1, x0, x1, color):
        img[max(0, round(y0)) : max(0, round(y1)), max(0, round(x0)) : max(0, round(x1))] = color

    # head + hair
    head_r = attrs["head_r"] * bh * 0.55
    head_cy = top + 0.11 * bh
    head = ((ys - head_cy) ** 2 + ((xs - cx) * 1.15) ** 2) <= head_r**2
    img[head] = attrs["skin"]
    hair = ((ys - (head_cy - 0.35 * head_r)) ** 2 + ((xs - cx) * 1.15) ** 2 <= head_r**2) & (ys < head_cy)
    img[hair] = attrs["hair"]

    # torso with thin arms
    tw = attrs["torso_w"] * 0.55 * w * scale
    t0, t1 = top + 0.19 * bh, top + 0.52 * bh
    rect(t0, t1, cx - tw / 2, cx + tw / 2, attrs["torso"])
    rect(t0 + 0.02 * bh, t1 - 0.06 * bh, cx - tw / 2 - 0.09 * w, cx - tw / 2, attrs["torso"] * 0.85)
    rect(t0 + 0.02 * bh, t1 - 0.06 * bh, cx + tw / 2, cx + tw / 2 + 0.09 * w, attrs["torso"] * 0.85)

    # legs + shoes
    gap = attrs["leg_gap"] * w
    lw = max(1.0, (tw - gap) / 2)
    l0, l1 = t1, top + 0.9 * bh
    rect(l0, l1, cx - gap / 2 - lw, cx - gap / 2, attrs["legs"])
    rect(l0, l1, cx + gap / 2, cx + gap / 2 + lw, attrs["legs"])
    rect(l1, l1 + 0.05 * bh, cx - gap / 2 - lw, cx - gap / 2, attrs["shoes"])
    rect(l1, l1 + 0.05 * bh, cx + gap / 2, cx + gap / 2 + lw, attrs["shoes"])

    if attrs["has_bag"]:
        side = -1.0 if attrs["bag_side"] == 0 else 1.0
        bx = cx + side * (tw / 2 + 0.02 * w)
        rect(t0 + 0.08 * bh, t0 + 0.26 * bh, bx - 0.07 * w, bx + 0.07 * w, attrs["bag_color"])

    return img


def render_identity_image(cfg: SynthConfig, pid: int, idx: int, cam: int) -> np.ndarray:
    """One (h, w, 3) float image of identity `pid`, deterministic in (cfg, args)."""
    attrs = _identity_attrs(_id_rng(cfg.seed, pid))
    rng = _img_rng(cfg.seed, pid, idx)
    img = _render_person(cfg.image_h, cfg.image_w, attrs, rng)

    if rng.random() < cfg.occlusion_prob:
        oh = round(rng.uniform(0.2, 0.45) * cfg.image_h)
        ow = round(rng.uniform(0.3, 0.8) * cfg.image_w)
        oy = int(rng.integers(0, cfg.image_h - oh + 1))
        ox = int(rng.integers(0, cfg.image_w - ow + 1))
        img[oy : oy + oh, ox : ox + ow] = rng.uniform(0.1, 0.9, size=3)

    img = img * _camera_gains(cfg.seed, cam, cfg.camera_color_shift)
    img = img + rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_synth_dataset(cfg: SynthConfig, out_dir) -> list[ManifestEntry]:
    """Render all identities, write PPMs plus manifest.csv under `out_dir`."""
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    try:
        img_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset directory {img_dir}: {e}") from e

    entries: list[ManifestEntry] = []
    n_total = cfg.n_pretrain_ids + cfg.n_train_ids + cfg.n_eval_ids
    for pid in range(n_total):
        if pid < cfg.n_pretrain_ids:
            role = "pretrain"
        elif pid < cfg.n_pretrain_ids + cfg.n_train_ids:
            role = "train"
        else:
            role = "eval"
        for idx in range(cfg.images_per_id):
            cam = idx % cfg.n_cameras
            split = role if role != "eval" else ("query" if idx < cfg.queries_per_id else "gallery")
            rel = f"images/id{pid:05d}_c{cam}_{idx:02d}.ppm"
            img = render_identity_image(cfg, pid, idx, cam)
            try:
                (out_dir / rel).write_bytes(encode_ppm(img))
            except OSError as e:
                raise OSError(f"cannot write image {out_dir / rel}: {e}") from e
            entries.append(ManifestEntry(rel, pid, cam, split))
    write_manifest(entries, out_dir / "manifest.csv")
    return entries
