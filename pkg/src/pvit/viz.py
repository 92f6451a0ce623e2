"""Qualitative exporters: cls self-attention heatmaps (PGM), k-means layouts
of projected patch features (CSV), and mutual-nearest-neighbor patch
correspondence between two images (CSV).

Patch features default to the patch-head projections (the space the masked
patch loss trains); pass ``use_head=False`` for raw backbone features, which
is also the only option for fine-tuned checkpoints.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .distill import apply_head
from .errors import ConfigError, ContractViolation
from .evalreid import _backbone_from_checkpoint
from .imageio import decode_ppm, write_pgm_scores
from .augment import resize_keep_aspect
from .tensor import Tensor
from .vit import encode_images


def _load_image(image, input_size) -> np.ndarray:
    if isinstance(image, (str, Path)):
        image = decode_ppm(Path(image).read_bytes())
    return resize_keep_aspect(np.asarray(image, dtype=np.float32), *input_size)


def _load_model(ckpt_path, use_head: bool):
    ckpt = load_checkpoint(ckpt_path)
    params, vit_cfg, input_size, _neck = _backbone_from_checkpoint(ckpt)
    head_params = None
    if use_head:
        head_params = {
            k[len("teacher/") :]: Tensor(v)
            for k, v in ckpt.tensors.items()
            if k.startswith("teacher/head_patch.")
        }
        if not head_params:
            raise ConfigError(
                "checkpoint has no patch projection head; use use_head=False for raw features"
            )
    return params, vit_cfg, input_size, head_params


def _patch_features(image, params, vit_cfg, input_size, head_params) -> tuple[np.ndarray, tuple[int, int]]:
    img = _load_image(image, input_size)
    feats = encode_images(img, params, vit_cfg)
    z = feats.z_patches
    if head_params is not None:
        z = apply_head(z, head_params, "head_patch")
    return z.data[0], feats.grid


# -- attention ---------------------------------------------------------------------


def export_attention_pgm(
    ckpt_path,
    image,
    out_path,
    layer: int = -1,
    head_reduce: str = "mean",
) -> list[Path]:
    """cls-row attention over patch tokens at one layer, normalized to a P5
    heatmap of the patch grid; per-head mode writes one file per head."""
    if head_reduce not in ("mean", "per-head"):
        raise ConfigError(f"head_reduce must be 'mean' or 'per-head', got {head_reduce!r}")
    params, vit_cfg, input_size, _ = _load_model(ckpt_path, use_head=False)
    if not -vit_cfg.depth <= layer < vit_cfg.depth:
        raise ConfigError(f"layer {layer} out of range for depth {vit_cfg.depth}")
    img = _load_image(image, input_size)
    feats = encode_images(img, params, vit_cfg, capture_attention=True)
    gh, gw = feats.grid
    att = feats.attention[layer][0]  # (heads, n+1, n+1)
    cls_rows = att[:, 0, 1:]  # attention of cls onto patches, one row per head

    out_path = Path(out_path)
    written = []
    if head_reduce == "mean":
        write_pgm_scores(cls_rows.mean(axis=0).reshape(gh, gw), out_path)
        written.append(out_path)
    else:
        for h in range(cls_rows.shape[0]):
            p = out_path.with_name(f"{out_path.stem}_head{h}{out_path.suffix or '.pgm'}")
            write_pgm_scores(cls_rows[h].reshape(gh, gw), p)
            written.append(p)
    return written


# -- k-means over patch features ----------------------------------------------------


def kmeans(
    points: np.ndarray,
    k: int,
    rng: np.random.Generator,
    max_iters: int = 100,
    tol: float = 1e-6,
    n_init: int = 10,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Lloyd iterations from k-means++ seeds; returns (centroids, assignment,
    inertia) of the best of `n_init` restarts. An emptied cluster is re-seeded
    from the point farthest from its centroid."""
    points = np.asarray(points, dtype=np.float64)
    m = len(points)
    if k < 1 or m < k:
        raise ContractViolation(f"need at least k={k} points, got {m}")
    best = None
    for _ in range(max(1, n_init)):
        centroids = _kmeans_pp_seeds(points, k, rng)
        for _ in range(max_iters):
            d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
            assign = d2.argmin(axis=1)
            new_centroids = centroids.copy()
            for c in range(k):
                members = points[assign == c]
                if len(members):
                    new_centroids[c] = members.mean(axis=0)
                else:
                    far = d2[np.arange(m), assign].argmax()
                    new_centroids[c] = points[far]
            shift = np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max()
            centroids = new_centroids
            if shift < tol:
                break
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        inertia = float(d2[np.arange(m), assign].sum())
        if best is None or inertia < best[2]:
            best = (centroids, assign, inertia)
    return best


def _kmeans_pp_seeds(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    m = len(points)
    centroids = [points[int(rng.integers(0, m))]]
    for _ in range(1, k):
        d2 = np.min(((points[:, None, :] - np.array(centroids)[None, :, :]) ** 2).sum(axis=2), axis=1)
        total = d2.sum()
        if total <= 0:
            centroids.append(points[int(rng.integers(0, m))])
            continue
        centroids.append(points[int(rng.choice(m, p=d2 / total))])
    return np.array(centroids)


@dataclass
class ClusterAssignment:
    centroids: np.ndarray  # (k, d)
    labels: np.ndarray  # (total patches,)
    inertia: float
    per_image: list[np.ndarray]  # labels reshaped (gh, gw) per image


def cluster_patch_tokens(
    ckpt_path,
    images: list,
    k: int,
    seed: int = 0,
    out_csv=None,
    use_head: bool = True,
) -> ClusterAssignment:
    """k-means over projected patch features pooled across `images`; optional
    CSV rows (image_index, image, patch_row, patch_col, cluster)."""
    params, vit_cfg, input_size, head_params = _load_model(ckpt_path, use_head)
    feats, grids = [], []
    for image in images:
        f, grid = _patch_features(image, params, vit_cfg, input_size, head_params)
        feats.append(f)
        grids.append(grid)
    pooled = np.concatenate(feats, axis=0)
    rng = np.random.default_rng(seed)
    centroids, labels, inertia = kmeans(pooled, k, rng)

    per_image = []
    rows = []
    off = 0
    for i, (image, grid) in enumerate(zip(images, grids)):
        gh, gw = grid
        lab = labels[off : off + gh * gw].reshape(gh, gw)
        per_image.append(lab)
        name = str(image) if isinstance(image, (str, Path)) else f"image{i}"
        for r in range(gh):
            for c in range(gw):
                rows.append(f"{i},{name},{r},{c},{lab[r, c]}")
        off += gh * gw
    if out_csv is not None:
        Path(out_csv).write_text(
            "image_index,image,patch_row,patch_col,cluster\n" + "\n".join(rows) + "\n",
            encoding="utf-8",
        )
    return ClusterAssignment(centroids, labels, inertia, per_image)


# -- sparse correspondence ------------------------------------------------------------


def correspondence_pairs(
    ckpt_path,
    image_a,
    image_b,
    top_n: int,
    out_csv=None,
    use_head: bool = True,
) -> list[tuple[tuple[int, int], tuple[int, int], float]]:
    """Mutual-nearest-neighbor patch pairs by cosine similarity, best first;
    at most `top_n` pairs (no padding)."""
    if top_n < 1:
        raise ConfigError("top_n must be >= 1")
    params, vit_cfg, input_size, head_params = _load_model(ckpt_path, use_head)
    fa, grid_a = _patch_features(image_a, params, vit_cfg, input_size, head_params)
    fb, grid_b = _patch_features(image_b, params, vit_cfg, input_size, head_params)
    na = fa / np.linalg.norm(fa, axis=1, keepdims=True).clip(min=1e-12)
    nb = fb / np.linalg.norm(fb, axis=1, keepdims=True).clip(min=1e-12)
    sim = na @ nb.T
    best_b = sim.argmax(axis=1)
    best_a = sim.argmax(axis=0)
    mutual = [(i, int(best_b[i])) for i in range(len(fa)) if int(best_a[best_b[i]]) == i]
    mutual.sort(key=lambda ij: -sim[ij[0], ij[1]])
    mutual = mutual[:top_n]

    gw_a, gw_b = grid_a[1], grid_b[1]
    pairs = [
        ((i // gw_a, i % gw_a), (j // gw_b, j % gw_b), float(sim[i, j]))
        for i, j in mutual
    ]
    if out_csv is not None:
        lines = ["patch_a_row,patch_a_col,patch_b_row,patch_b_col,similarity"]
        lines += [f"{pa[0]},{pa[1]},{pb[0]},{pb[1]},{s:.8f}" for pa, pb, s in pairs]
        Path(out_csv).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return pairs
