"""Random crop-and-paste corruption of annotation masks.

Each iteration picks a foreground seed pixel, takes the square window centred
on it, applies one of the eight square symmetries (rotations by multiples of
90 degrees, optionally mirrored), and pastes either the transformed window or
its complement back in place. Windows reaching past the image border are
zero-padded to the full square for the transform and only the in-bounds part
is pasted back, so every change stays inside the chosen windows.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# compass offsets for the optional shifted-paste mode, indexed by direction 1..8
_OFFSETS = {
    1: (-1, 0),
    2: (-1, 1),
    3: (0, 1),
    4: (1, 1),
    5: (1, 0),
    6: (1, -1),
    7: (0, -1),
    8: (-1, -1),
}


@dataclass(frozen=True)
class RcapConfig:
    w: int = 31          # square window side, < 100
    kappa: int = 4       # corruption iterations, 1..4
    rng_seed: int = 0
    offset_paste: bool = False  # paste at a direction-shifted spot instead of in place

    def __post_init__(self):
        if not (1 <= self.w < 100):
            raise ValueError(f"window side must be in [1, 100), got {self.w}")
        if not (1 <= self.kappa <= 4):
            raise ValueError(f"kappa must be in [1, 4], got {self.kappa}")


def _dihedral(window: np.ndarray, direction: int) -> np.ndarray:
    """Apply one of the 8 square symmetries selected by direction in 1..8."""
    out = np.rot90(window, k=(direction - 1) % 4)
    if direction > 4:
        out = np.fliplr(out)
    return out


def apply_crop_paste(
    mask: np.ndarray,
    seed: tuple[int, int],
    direction: int,
    flag: int,
    w: int,
    offset_paste: bool = False,
) -> np.ndarray:
    """One crop-and-paste step with explicit draws; pure and unit-testable."""
    if not (1 <= direction <= 8):
        raise ValueError(f"direction must be in 1..8, got {direction}")
    out = mask.astype(bool).copy()
    h, width = out.shape
    half = w // 2
    top, left = seed[0] - half, seed[1] - half

    r0, r1 = max(top, 0), min(top + w, h)
    c0, c1 = max(left, 0), min(left + w, width)
    square = np.zeros((w, w), dtype=bool)
    square[r0 - top : r1 - top, c0 - left : c1 - left] = out[r0:r1, c0:c1]

    square = _dihedral(square, direction)
    if flag:
        square = ~square

    if offset_paste:
        dr, dc = _OFFSETS[direction]
        top, left = top + dr * w, left + dc * w
        r0, r1 = max(top, 0), min(top + w, h)
        c0, c1 = max(left, 0), min(left + w, width)
        if r1 <= r0 or c1 <= c0:
            return out
    out[r0:r1, c0:c1] = square[r0 - top : r1 - top, c0 - left : c1 - left]
    return out


def rcap(t: np.ndarray, cfg: RcapConfig) -> np.ndarray:
    """Corrupt mask t with cfg.kappa crop-and-paste iterations.

    A mask without foreground is returned unchanged. Deterministic under
    cfg.rng_seed; per iteration the draw order is seed pixel, direction, flag.
    """
    rng = np.random.default_rng(cfg.rng_seed)
    out = t.astype(bool).copy()
    for _ in range(cfg.kappa):
        fg = np.argwhere(out)
        if fg.size == 0:
            break
        seed = tuple(fg[int(rng.integers(len(fg)))])
        direction = int(rng.integers(1, 9))
        flag = int(rng.integers(0, 2))
        out = apply_crop_paste(out, seed, direction, flag, cfg.w, cfg.offset_paste)
    return out
