"""Multi-crop view generation plus the photometric/geometric augmentations.

One source image yields 2 global views for the teacher, 2 global views for
the student and N local views for the student. A student global reuses the
exact geometry (crop rectangle, resize, flip) of its teacher twin so patch i
of both views shows the same pixels; only the photometric jitter differs.
That positional correspondence is what the masked-patch loss consumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractViolation

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass(frozen=True)
class CropParams:
    global_size: tuple[int, int] = (64, 32)  # (h, w) of global views
    local_size: tuple[int, int] = (32, 16)
    local_rate: tuple[float, float] = (0.1, 0.8)  # crop area fraction range
    global_rate: tuple[float, float] = (0.4, 1.0)
    aspect_range: tuple[float, float] = (3.0 / 8.0, 2.0 / 3.0)  # width/height
    n_local: int = 6
    flip_prob: float = 0.5
    jitter_strength: float = 0.4
    grayscale_prob: float = 0.2

    def __post_init__(self):
        for name, (lo, hi) in (("local_rate", self.local_rate), ("global_rate", self.global_rate)):
            if not 0.0 < lo <= hi <= 1.0:
                raise ConfigError(f"{name} must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})")
        lo, hi = self.aspect_range
        if not 0.0 < lo <= hi:
            raise ConfigError(f"aspect_range bounds must be positive and ordered, got ({lo}, {hi})")
        if self.n_local < 0:
            raise ConfigError("n_local must be >= 0")


@dataclass(frozen=True)
class ViewGeometry:
    """Crop rectangle in source pixels + output size + flip flag."""

    top: int
    left: int
    crop_h: int
    crop_w: int
    out_h: int
    out_w: int
    flip: bool


@dataclass
class MultiCropViews:
    teacher_globals: list[np.ndarray]
    student_globals: list[np.ndarray]
    student_locals: list[np.ndarray]
    global_geoms: list[ViewGeometry] = field(default_factory=list)
    local_geoms: list[ViewGeometry] = field(default_factory=list)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-center bilinear resize; identical size is an exact copy."""
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0).astype(img.dtype)
    wx = np.clip(xs - x0, 0.0, 1.0).astype(img.dtype)
    if img.ndim == 3:
        wy = wy[:, None, None]
        wx = wx[None, :, None]
    else:
        wy = wy[:, None]
        wx = wx[None, :]
    rows = img[y0] * (1 - wy) + img[y1] * wy
    return rows[:, x0] * (1 - wx) + rows[:, x1] * wx


def sample_crop_geometry(
    h: int,
    w: int,
    rate_range: tuple[float, float],
    aspect_range: tuple[float, float],
    out_size: tuple[int, int],
    flip_prob: float,
    rng: np.random.Generator,
) -> ViewGeometry:
    """Area-fraction + aspect sampled crop; 10 degenerate draws fall back to
    the full image."""
    out_h, out_w = out_size
    for _ in range(10):
        frac = rng.uniform(*rate_range)
        aspect = math.exp(rng.uniform(math.log(aspect_range[0]), math.log(aspect_range[1])))
        area = frac * h * w
        ch = round(math.sqrt(area / aspect))
        cw = round(math.sqrt(area * aspect))
        if 1 <= ch <= h and 1 <= cw <= w:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            flip = bool(rng.random() < flip_prob)
            return ViewGeometry(top, left, ch, cw, out_h, out_w, flip)
    flip = bool(rng.random() < flip_prob)
    return ViewGeometry(0, 0, h, w, out_h, out_w, flip)


def render_view(img: np.ndarray, geom: ViewGeometry) -> np.ndarray:
    crop = img[geom.top : geom.top + geom.crop_h, geom.left : geom.left + geom.crop_w]
    view = resize_bilinear(crop, geom.out_h, geom.out_w)
    if geom.flip:
        view = view[:, ::-1].copy()
    return view


def photometric_jitter(img: np.ndarray, strength: float, grayscale_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Brightness/contrast/saturation factors in [1-s, 1+s], then optional
    grayscale; output clipped to [0, 1]."""
    out = img
    if strength > 0:
        b, c, s = rng.uniform(1.0 - strength, 1.0 + strength, size=3)
        out = out * b
        out = out.mean() + (out - out.mean()) * c
        gray = out @ GRAY_WEIGHTS
        out = gray[..., None] + (out - gray[..., None]) * s
    if rng.random() < grayscale_prob:
        out = np.repeat((out @ GRAY_WEIGHTS)[..., None], 3, axis=-1)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def multi_crop_views(img: np.ndarray, p: CropParams, rng: np.random.Generator) -> MultiCropViews:
    if img.ndim != 3 or img.shape[2] != 3:
        raise ContractViolation(f"expected (h, w, 3) image, got {img.shape}")
    h, w = img.shape[:2]
    if h < 1 or w < 1:
        raise ContractViolation("image must have at least one pixel per dimension")
    img = np.asarray(img, dtype=np.float32)

    teacher_globals, student_globals, global_geoms = [], [], []
    for _ in range(2):
        geom = sample_crop_geometry(h, w, p.global_rate, p.aspect_range, p.global_size, p.flip_prob, rng)
        base = render_view(img, geom)
        teacher_globals.append(photometric_jitter(base, p.jitter_strength, p.grayscale_prob, rng))
        student_globals.append(photometric_jitter(base, p.jitter_strength, p.grayscale_prob, rng))
        global_geoms.append(geom)

    student_locals, local_geoms = [], []
    for _ in range(p.n_local):
        geom = sample_crop_geometry(h, w, p.local_rate, p.aspect_range, p.local_size, p.flip_prob, rng)
        view = photometric_jitter(render_view(img, geom), p.jitter_strength, p.grayscale_prob, rng)
        student_locals.append(view)
        local_geoms.append(geom)

    return MultiCropViews(teacher_globals, student_globals, student_locals, global_geoms, local_geoms)


# -- fine-tuning augmentation -------------------------------------------------


def resize_keep_aspect(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Scale to fit inside (out_h, out_w) preserving aspect, center-pad with 0."""
    h, w = img.shape[:2]
    scale = min(out_h / h, out_w / w)
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    resized = resize_bilinear(img, nh, nw)
    if (nh, nw) == (out_h, out_w):
        return resized
    out = np.zeros((out_h, out_w) + img.shape[2:], dtype=resized.dtype)
    top, left = (out_h - nh) // 2, (out_w - nw) // 2
    out[top : top + nh, left : left + nw] = resized
    return out


def random_erase(
    img: np.ndarray,
    rng: np.random.Generator,
    prob: float = 0.5,
    area_range: tuple[float, float] = (0.02, 0.33),
    aspect_range: tuple[float, float] = (0.3, 1.0 / 0.3),
) -> np.ndarray:
    if rng.random() >= prob:
        return img
    h, w = img.shape[:2]
    for _ in range(10):
        area = rng.uniform(*area_range) * h * w
        aspect = math.exp(rng.uniform(math.log(aspect_range[0]), math.log(aspect_range[1])))
        eh = round(math.sqrt(area * aspect))
        ew = round(math.sqrt(area / aspect))
        if 1 <= eh <= h and 1 <= ew <= w:
            top = int(rng.integers(0, h - eh + 1))
            left = int(rng.integers(0, w - ew + 1))
            out = img.copy()
            out[top : top + eh, left : left + ew] = rng.random((eh, ew) + img.shape[2:], dtype=np.float32)
            return out
    return img
