"""Block-wise patch masking over a (gh, gw) patch grid.

Rectangular blocks are stamped onto the grid until at least
ceil(ratio * gh * gw) patches are masked, so the final count can overshoot the
target by strictly less than the largest single block the sampler can place
(`max_block_area`). Block area is drawn between 4 patches and the remaining
deficit, block aspect between 0.3 and 1/0.3.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation

BLOCK_MIN_AREA = 4
BLOCK_ASPECT = (0.3, 1.0 / 0.3)  # height/width range of one block


@dataclass(frozen=True)
class MaskPattern:
    grid_h: int
    grid_w: int
    mask: np.ndarray  # bool, shape (gh * gw,), row-major

    def __post_init__(self):
        if self.mask.shape != (self.grid_h * self.grid_w,):
            raise ContractViolation(
                f"mask length {self.mask.shape} != grid {self.grid_h}x{self.grid_w}"
            )

    @property
    def count(self) -> int:
        return int(self.mask.sum())

    def as_grid(self) -> np.ndarray:
        return self.mask.reshape(self.grid_h, self.grid_w)


def mask_target(gh: int, gw: int, mask_ratio: float) -> int:
    return math.ceil(mask_ratio * gh * gw)


def max_block_area(gh: int, gw: int, mask_ratio: float) -> int:
    """Largest patch count one sampled block can cover; the overshoot of
    `sample_block_mask` is strictly below this."""
    a = max(float(BLOCK_MIN_AREA), float(mask_target(gh, gw, mask_ratio)))
    worst = 1
    for ar in (BLOCK_ASPECT[0], 1.0, BLOCK_ASPECT[1]):
        hb = min(gh, max(1, round(math.sqrt(a * ar))))
        wb = min(gw, max(1, round(math.sqrt(a / ar))))
        worst = max(worst, hb * wb)
    return worst


def sample_block_mask(gh: int, gw: int, mask_ratio: float, rng: np.random.Generator) -> MaskPattern:
    if not 0.0 <= mask_ratio <= 1.0:
        raise ContractViolation(f"mask_ratio must be in [0, 1], got {mask_ratio}")
    if gh < 1 or gw < 1:
        raise ContractViolation(f"grid {gh}x{gw} must be non-empty")
    n = gh * gw
    target = mask_target(gh, gw, mask_ratio)
    grid = np.zeros((gh, gw), dtype=bool)
    stalls = 0
    while grid.sum() < target:
        deficit = target - int(grid.sum())
        lo, hi = min(BLOCK_MIN_AREA, deficit), max(BLOCK_MIN_AREA, deficit)
        area = rng.uniform(lo, hi) if hi > lo else float(lo)
        aspect = math.exp(rng.uniform(math.log(BLOCK_ASPECT[0]), math.log(BLOCK_ASPECT[1])))
        hb = min(gh, max(1, round(math.sqrt(area * aspect))))
        wb = min(gw, max(1, round(math.sqrt(area / aspect))))
        top = int(rng.integers(0, gh - hb + 1))
        left = int(rng.integers(0, gw - wb + 1))
        before = int(grid.sum())
        grid[top : top + hb, left : left + wb] = True
        if int(grid.sum()) == before:
            stalls += 1
            if stalls >= 10:  # fully-overlapping draws; finish deterministically
                flat = grid.reshape(-1)
                flat[np.flatnonzero(~flat)[: target - before]] = True
                break
        else:
            stalls = 0
    return MaskPattern(gh, gw, grid.reshape(-1).copy())
