"""Vanilla pre-norm ViT encoder on the autodiff tape.

Tokenization follows n = h*w/p^2 patches per image plus one learned cls
token. Masked positions are substituted in embedding space by a learned mask
token, token_i = (1 - m_i) * token_i + m_i * mask_token, before positional
embeddings are added (masked positions keep their location identity).
Positional embeddings are learned at one global grid and bilinearly
interpolated to other view grids.

Parameters live in a flat name -> Tensor dict so the EMA teacher, optimizer
and checkpoint container all address them uniformly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractViolation
from .masking import MaskPattern
from .tensor import Tensor


@dataclass(frozen=True)
class ViTConfig:
    patch_size: int = 8
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    pos_grid: tuple[int, int] = (8, 4)  # (gh, gw) of the learned positional grid

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if min(self.patch_size, self.depth, self.heads, *self.pos_grid) < 1:
            raise ConfigError("patch_size, depth, heads and pos_grid must be positive")

    @property
    def mlp_dim(self) -> int:
        return int(self.dim * self.mlp_ratio)


# named presets; the micro variant exists for CPU-scale runs and tests
VIT_PRESETS = {
    "vit-micro": ViTConfig(patch_size=8, dim=64, depth=4, heads=4, pos_grid=(8, 4)),
    "vit-s16": ViTConfig(patch_size=16, dim=384, depth=12, heads=6, pos_grid=(16, 8)),
    "vit-b16": ViTConfig(patch_size=16, dim=768, depth=12, heads=12, pos_grid=(16, 8)),
}


@dataclass
class TokenSequence:
    tokens: Tensor  # (B, n+1, dim), token 0 is cls
    grid: tuple[int, int]
    mask: np.ndarray | None = None  # bool (B, n) where substitution happened


@dataclass
class EncodedFeatures:
    z_cls: Tensor  # (B, dim)
    z_patches: Tensor  # (B, n, dim)
    grid: tuple[int, int]
    attention: list[np.ndarray] | None = None  # per layer (B, heads, n+1, n+1)


def init_vit_params(cfg: ViTConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    """Truncated-normal(0.02) weights, zero biases, unit norm gains."""
    d, m = cfg.dim, cfg.mlp_dim
    gh, gw = cfg.pos_grid

    def w(shape):
        return Tensor(T.trunc_normal(rng, shape, std=0.02, dtype=dtype), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(shape):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    params: dict[str, Tensor] = {
        "patch.w": w((cfg.patch_size * cfg.patch_size * 3, d)),
        "patch.b": zeros((d,)),
        "cls": w((d,)),
        "mask_token": w((d,)),
        "pos.cls": w((d,)),
        "pos.grid": w((gh, gw, d)),
    }
    for i in range(cfg.depth):
        params[f"b{i}.ln1.g"] = ones((d,))
        params[f"b{i}.ln1.b"] = zeros((d,))
        params[f"b{i}.qkv.w"] = w((d, 3 * d))
        params[f"b{i}.qkv.b"] = zeros((3 * d,))
        params[f"b{i}.proj.w"] = w((d, d))
        params[f"b{i}.proj.b"] = zeros((d,))
        params[f"b{i}.ln2.g"] = ones((d,))
        params[f"b{i}.ln2.b"] = zeros((d,))
        params[f"b{i}.fc1.w"] = w((d, m))
        params[f"b{i}.fc1.b"] = zeros((m,))
        params[f"b{i}.fc2.w"] = w((m, d))
        params[f"b{i}.fc2.b"] = zeros((d,))
    params["ln_f.g"] = ones((d,))
    params["ln_f.b"] = zeros((d,))
    return params


# -- positional grid interpolation ---------------------------------------------


def _axis_weights(src: int, dst: int) -> np.ndarray:
    """(dst, src) bilinear weight matrix, corners aligned to corners."""
    w = np.zeros((dst, src))
    if dst == 1:
        pos = np.array([(src - 1) / 2.0])
    else:
        pos = np.arange(dst) * (src - 1) / (dst - 1)
    i0 = np.floor(pos).astype(int)
    i0 = np.clip(i0, 0, src - 1)
    i1 = np.minimum(i0 + 1, src - 1)
    frac = pos - i0
    w[np.arange(dst), i0] += 1.0 - frac
    w[np.arange(dst), i1] += frac
    return w


def pos_interp_matrix(src: tuple[int, int], dst: tuple[int, int]) -> np.ndarray:
    """(dst_n, src_n) matrix mapping a row-major flattened grid to the target
    grid by separable bilinear interpolation; identity when src == dst."""
    wy = _axis_weights(src[0], dst[0])
    wx = _axis_weights(src[1], dst[1])
    return np.kron(wy, wx)


def interpolate_pos_grid(grid: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """(gh, gw, d) -> (gh', gw', d) bilinear; exact identity at equal sizes."""
    gh, gw, d = grid.shape
    if min(target) < 1:
        raise ContractViolation(f"target grid {target} must be positive")
    if (gh, gw) == tuple(target):
        return grid.copy()
    m = pos_interp_matrix((gh, gw), tuple(target)).astype(grid.dtype)
    return (m @ grid.reshape(gh * gw, d)).reshape(target[0], target[1], d)


def _positional_rows(params: dict[str, Tensor], cfg: ViTConfig, grid: tuple[int, int]) -> Tensor:
    """(n+1, dim) positional table for a view grid (cls row first)."""
    gh, gw = cfg.pos_grid
    pos = params["pos.grid"].reshape((gh * gw, cfg.dim))
    if tuple(grid) != (gh, gw):
        m = Tensor(pos_interp_matrix((gh, gw), tuple(grid)).astype(pos.dtype))
        pos = T.matmul(m, pos)
    return T.concat([params["pos.cls"].reshape((1, cfg.dim)), pos], axis=0)


# -- tokenization ----------------------------------------------------------------


def _as_mask_array(mask, batch: int, grid: tuple[int, int]) -> np.ndarray | None:
    if mask is None:
        return None
    if isinstance(mask, MaskPattern):
        if (mask.grid_h, mask.grid_w) != grid:
            raise ContractViolation(f"mask grid {(mask.grid_h, mask.grid_w)} != token grid {grid}")
        return np.tile(mask.mask, (batch, 1))
    if isinstance(mask, (list, tuple)):
        for mp in mask:
            if (mp.grid_h, mp.grid_w) != grid:
                raise ContractViolation(f"mask grid {(mp.grid_h, mp.grid_w)} != token grid {grid}")
        arr = np.stack([mp.mask for mp in mask])
    else:
        arr = np.asarray(mask, dtype=bool)
        if arr.ndim == 1:
            arr = np.tile(arr, (batch, 1))
    if arr.shape != (batch, grid[0] * grid[1]):
        raise ContractViolation(f"mask shape {arr.shape} != (batch {batch}, n {grid[0] * grid[1]})")
    return arr


def patch_embed(images: np.ndarray, params: dict[str, Tensor], cfg: ViTConfig, mask=None) -> TokenSequence:
    """Project p x p x 3 patches to tokens, substitute masked positions with
    the learned mask token, prepend cls, add positional embeddings."""
    imgs = np.asarray(images)
    if imgs.ndim == 3:
        imgs = imgs[None]
    b, h, w, c = imgs.shape
    if c != 3:
        raise ContractViolation(f"expected 3 channels, got {c}")
    p = cfg.patch_size
    if h % p or w % p:
        raise ConfigError(f"patch size {p} does not divide image {h}x{w}")
    gh, gw = h // p, w // p
    n = gh * gw

    dtype = params["patch.w"].dtype
    flat = (
        imgs.reshape(b, gh, p, gw, p, 3)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(b, n, p * p * 3)
        .astype(dtype)
    )
    tok = T.matmul(Tensor(flat), params["patch.w"]) + params["patch.b"]

    mask_arr = _as_mask_array(mask, b, (gh, gw))
    if mask_arr is not None and mask_arr.any():
        mf = Tensor(mask_arr[..., None].astype(dtype))
        tok = tok * (Tensor(np.ones((), dtype=dtype)) - mf) + params["mask_token"] * mf

    cls_row = Tensor(np.zeros((b, 1, cfg.dim), dtype=dtype)) + params["cls"].reshape((1, 1, cfg.dim))
    tokens = T.concat([cls_row, tok], axis=1)
    tokens = tokens + _positional_rows(params, cfg, (gh, gw))
    return TokenSequence(tokens, (gh, gw), mask_arr)


# -- transformer -----------------------------------------------------------------


def _layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    return T.layer_normalize(x, eps=1e-6) * gain + bias


def encode(
    tokens: TokenSequence,
    params: dict[str, Tensor],
    cfg: ViTConfig,
    capture_attention: bool = False,
) -> EncodedFeatures:
    """Pre-norm blocks (attention + MLP, residual), final layer norm."""
    x = tokens.tokens
    b, t, d = x.shape
    if d != cfg.dim:
        raise ContractViolation(f"token dim {d} != configured dim {cfg.dim}")
    nh, hd = cfg.heads, cfg.dim // cfg.heads
    scale = 1.0 / math.sqrt(hd)
    attn_maps: list[np.ndarray] = []

    for i in range(cfg.depth):
        hst = _layer_norm(x, params[f"b{i}.ln1.g"], params[f"b{i}.ln1.b"])
        qkv = T.matmul(hst, params[f"b{i}.qkv.w"]) + params[f"b{i}.qkv.b"]
        qkv = qkv.reshape((b, t, 3, nh, hd)).transpose((2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]  # (B, heads, T, hd)
        att = T.softmax(T.matmul(q, k.swapaxes(-1, -2)) * scale, axis=-1)
        if capture_attention:
            attn_maps.append(att.data.copy())
        out = T.matmul(att, v).transpose((0, 2, 1, 3)).reshape((b, t, d))
        x = x + (T.matmul(out, params[f"b{i}.proj.w"]) + params[f"b{i}.proj.b"])
        hst = _layer_norm(x, params[f"b{i}.ln2.g"], params[f"b{i}.ln2.b"])
        hst = T.gelu(T.matmul(hst, params[f"b{i}.fc1.w"]) + params[f"b{i}.fc1.b"])
        x = x + (T.matmul(hst, params[f"b{i}.fc2.w"]) + params[f"b{i}.fc2.b"])

    x = _layer_norm(x, params["ln_f.g"], params["ln_f.b"])
    return EncodedFeatures(
        z_cls=x[:, 0],
        z_patches=x[:, 1:],
        grid=tokens.grid,
        attention=attn_maps if capture_attention else None,
    )


def encode_images(
    images: np.ndarray,
    params: dict[str, Tensor],
    cfg: ViTConfig,
    mask=None,
    capture_attention: bool = False,
) -> EncodedFeatures:
    return encode(patch_embed(images, params, cfg, mask), params, cfg, capture_attention)
