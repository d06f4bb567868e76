"""Token corruption for (image-conditioned) masked language modeling and block
masks over the patch grid for masked image modeling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .encoders import TokenSequence

MIN_BLOCK_AREA = 4
ASPECT_RANGE = (0.3, 1 / 0.3)
BLOCK_ATTEMPTS = 10


@dataclass
class MaskedText:
    original: np.ndarray  # (B, L) ids before corruption
    corrupted: np.ndarray  # (B, L) ids fed to the encoder
    positions: np.ndarray  # (n, 2) rows of (batch index, position), all selected positions
    pad_mask: np.ndarray

    @property
    def empty(self) -> bool:
        return len(self.positions) == 0

    def tokens(self) -> TokenSequence:
        return TokenSequence(self.corrupted, self.pad_mask)

    def targets(self) -> np.ndarray:
        return self.original[tuple(self.positions.T)]


def mask_text(
    tokens: TokenSequence,
    rate: float,
    rng: np.random.Generator,
    mask_id: int,
    replacement_ids: np.ndarray,
) -> MaskedText:
    """Select each eligible position with probability ``rate`` and corrupt it.

    Selected positions become ``mask_id`` 80% of the time, a random id drawn
    from ``replacement_ids`` 10% of the time, and stay unchanged otherwise.
    All selected positions are recorded regardless of the corruption applied.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"mask rate {rate} outside [0, 1]")
    ids = tokens.ids
    eligible = tokens.eligible()
    selected = eligible & (rng.random(ids.shape) < rate)
    action = rng.random(ids.shape)
    random_ids = rng.choice(np.asarray(replacement_ids), size=ids.shape)
    corrupted = ids.copy()
    corrupted[selected & (action < 0.8)] = mask_id
    swap = selected & (action >= 0.8) & (action < 0.9)
    corrupted[swap] = random_ids[swap]
    positions = np.argwhere(selected).astype(np.int64).reshape(-1, 2)
    return MaskedText(ids.copy(), corrupted, positions, tokens.pad_mask.copy())


@dataclass
class PatchMaskPlan:
    grid_h: int
    grid_w: int
    mask: np.ndarray  # (grid_h, grid_w) bool
    blocks: list[tuple[int, int, int, int]] = field(default_factory=list)  # (top, left, height, width)
    fallback: bool = False  # single-patch masking was used

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.mask.reshape(-1))

    @property
    def count(self) -> int:
        return int(self.mask.sum())

    @property
    def ratio(self) -> float:
        return self.count / (self.grid_h * self.grid_w)

    def union_of_blocks(self) -> np.ndarray:
        out = np.zeros((self.grid_h, self.grid_w), dtype=bool)
        for top, left, h, w in self.blocks:
            out[top : top + h, left : left + w] = True
        return out

    def flat(self) -> np.ndarray:
        return self.mask.reshape(-1).copy()


def _try_block(mask: np.ndarray, budget: int, rng: np.random.Generator):
    grid_h, grid_w = mask.shape
    max_area = max(MIN_BLOCK_AREA, budget)
    lo, hi = math.log(ASPECT_RANGE[0]), math.log(ASPECT_RANGE[1])
    for _ in range(BLOCK_ATTEMPTS):
        area = rng.uniform(MIN_BLOCK_AREA, max_area)
        aspect = math.exp(rng.uniform(lo, hi))
        h = int(round(math.sqrt(area * aspect)))
        w = int(round(math.sqrt(area / aspect)))
        if not (1 <= h <= grid_h and 1 <= w <= grid_w):
            continue
        # integer rounding can leave the admissible area/aspect range
        if h * w < MIN_BLOCK_AREA or not ASPECT_RANGE[0] <= h / w <= ASPECT_RANGE[1]:
            continue
        top = int(rng.integers(0, grid_h - h + 1))
        left = int(rng.integers(0, grid_w - w + 1))
        fresh = h * w - int(mask[top : top + h, left : left + w].sum())
        if 0 < fresh <= budget:
            return top, left, h, w
    return None


def block_mask_image(grid_h: int, grid_w: int, ratio: float, rng: np.random.Generator) -> PatchMaskPlan:
    """Mask rectangular blocks of patches until ``ratio`` of the grid is covered.

    Blocks have area >= 4 patches and aspect ratio in [0.3, 1/0.3], and a block
    is only accepted when the patches it newly covers fit in the remaining
    budget ``ceil(ratio * area) - masked``. When no block fits, single patches
    (recorded as 1x1 blocks) top up the remainder; grids smaller than the
    minimum block use single patches throughout and set ``fallback``.
    """
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio {ratio} outside [0, 1)")
    mask = np.zeros((grid_h, grid_w), dtype=bool)
    plan = PatchMaskPlan(grid_h, grid_w, mask)
    target = math.ceil(ratio * grid_h * grid_w - 1e-9)
    too_small = grid_h * grid_w < MIN_BLOCK_AREA
    while plan.count < target:
        budget = target - plan.count
        block = None if too_small else _try_block(mask, budget, rng)
        if block is None:
            free = np.flatnonzero(~mask.reshape(-1))
            idx = int(rng.choice(free))
            block = (idx // grid_w, idx % grid_w, 1, 1)
            plan.fallback = plan.fallback or too_small
        top, left, h, w = block
        mask[top : top + h, left : left + w] = True
        plan.blocks.append(block)
    return plan


def block_masks(batch: int, grid_h: int, grid_w: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Independent plans for a batch of images, as a (batch, grid_h * grid_w) bool matrix."""
    if batch == 0:
        return np.zeros((0, grid_h * grid_w), dtype=bool)
    return np.stack([block_mask_image(grid_h, grid_w, ratio, rng).flat() for _ in range(batch)])
