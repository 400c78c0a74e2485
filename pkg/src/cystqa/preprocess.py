"""Input-plane extraction: denoising, bottom-hat, gradients and ROI masking.

Every operation takes and returns 2-D float arrays with values in [0, 1].
The full pipeline resizes to a fixed working resolution (300x300 by default)
and produces four planes per image: the denoised base image, a multi-scale
bottom-hat response highlighting dark hollow structures, and the Sobel
gradient magnitude and direction. A region-of-interest mask covering the
bright band between the strongest top and bottom edges restricts all
downstream work.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

WORK_SIZE = 300
DEFAULT_STRUCT_DIAMETER = 12

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=float)
SOBEL_Y = np.array([[-1, -2, -1], [0, 0, 0], [1, 2, 1]], dtype=float)


def stretch01(img: np.ndarray) -> np.ndarray:
    """Linear contrast stretch to [0, 1]; constant images pass through."""
    img = np.asarray(img, dtype=float)
    lo = float(img.min())
    hi = float(img.max())
    if hi > lo:
        return (img - lo) / (hi - lo)
    return img.copy()


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample using the pixel-center convention with edge clamping."""
    img = np.asarray(img, dtype=float)
    in_h, in_w = img.shape
    rows = np.clip((np.arange(out_h) + 0.5) * in_h / out_h - 0.5, 0.0, in_h - 1.0)
    cols = np.clip((np.arange(out_w) + 0.5) * in_w / out_w - 0.5, 0.0, in_w - 1.0)
    r0 = np.floor(rows).astype(int)
    c0 = np.floor(cols).astype(int)
    r1 = np.minimum(r0 + 1, in_h - 1)
    c1 = np.minimum(c0 + 1, in_w - 1)
    tr = (rows - r0)[:, None]
    tc = (cols - c0)[None, :]
    top = img[np.ix_(r0, c0)] * (1.0 - tc) + img[np.ix_(r0, c1)] * tc
    bot = img[np.ix_(r1, c0)] * (1.0 - tc) + img[np.ix_(r1, c1)] * tc
    return top * (1.0 - tr) + bot * tr


def nearest_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resample; preserves the value set (for class maps)."""
    in_h, in_w = arr.shape
    rows = np.minimum(((np.arange(out_h) + 0.5) * in_h / out_h).astype(int), in_h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * in_w / out_w).astype(int), in_w - 1)
    return arr[np.ix_(rows, cols)]


def denoise_and_resize(img: np.ndarray, size: int = WORK_SIZE) -> np.ndarray:
    """3x3 median filter, bilinear resize to size x size, restretch to [0, 1]."""
    img = np.asarray(img, dtype=float)
    if img.size == 0:
        raise ValueError("empty image")
    filtered = ndimage.median_filter(img, size=3, mode="reflect")
    resized = bilinear_resize(filtered, size, size)
    return stretch01(resized)


def disk(radius: int) -> np.ndarray:
    """Discrete circular structuring element {(dy,dx): dy^2+dx^2 <= r^2}."""
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return (yy * yy + xx * xx) <= r * r


def bottom_hat_response(img: np.ndarray, s_d: int) -> np.ndarray:
    """Raw multi-scale bottom-hat: max over radii {2,4,..,s_d} of closing - img."""
    if s_d < 2:
        raise ValueError(f"structuring-element bound must be >= 2, got {s_d}")
    img = np.asarray(img, dtype=float)
    out = np.zeros_like(img)
    for radius in range(2, s_d + 1, 2):
        closed = ndimage.grey_closing(img, footprint=disk(radius), mode="reflect")
        np.maximum(out, closed - img, out=out)
    return out


def bottom_hat(img: np.ndarray, s_d: int) -> np.ndarray:
    """Contrast-stretched multi-scale bottom-hat response in [0, 1]."""
    return stretch01(bottom_hat_response(img, s_d))


def gradients(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """3x3 Sobel gradient magnitude (max-scaled) and direction in [0, 1].

    Direction maps atan2(gy, gx) affinely from [-pi, pi] to [0, 1], so a flat
    image (atan2(0, 0) = 0) yields a constant 0.5 plane.
    """
    img = np.asarray(img, dtype=float)
    gx = ndimage.correlate(img, SOBEL_X, mode="reflect")
    gy = ndimage.correlate(img, SOBEL_Y, mode="reflect")
    # kill accumulation residue so flat fields give exact zeros (and 0.5 direction)
    gx[np.abs(gx) < 1e-12] = 0.0
    gy[np.abs(gy) < 1e-12] = 0.0
    mag = np.hypot(gx, gy)
    peak = float(mag.max())
    if peak > 0:
        mag = mag / peak
    direction = (np.arctan2(gy, gx) + np.pi) / (2.0 * np.pi)
    return mag, direction


def roi_mask(img: np.ndarray, smooth_window: int = 15) -> np.ndarray:
    """Mask strictly between the strongest top and bottom horizontal edges.

    Per column, the boundary rows are the first (from the top) and last (from
    the bottom) rows whose absolute vertical gradient exceeds that column's
    90th percentile. Columns with no qualifying edge inherit the nearest valid
    column's boundaries; both boundary curves are median-smoothed.
    """
    img = np.asarray(img, dtype=float)
    h, w = img.shape
    gy = np.abs(ndimage.correlate(img, SOBEL_Y, mode="reflect"))
    thr = np.percentile(gy, 90, axis=0)
    qualifies = gy > thr[None, :]
    has_edge = qualifies.any(axis=0)
    if not has_edge.any():
        return np.zeros((h, w), dtype=bool)

    top = np.argmax(qualifies, axis=0)
    bottom = h - 1 - np.argmax(qualifies[::-1, :], axis=0)

    valid = np.nonzero(has_edge)[0]
    nearest = valid[np.argmin(np.abs(np.arange(w)[:, None] - valid[None, :]), axis=1)]
    top = top[nearest]
    bottom = bottom[nearest]

    top = ndimage.median_filter(top, size=smooth_window, mode="nearest")
    bottom = ndimage.median_filter(bottom, size=smooth_window, mode="nearest")

    rows = np.arange(h)[:, None]
    return (rows > top[None, :]) & (rows < bottom[None, :])


@dataclass
class PreprocessedPlanes:
    """The four input planes of one image plus its ROI mask.

    Planes are stored unmasked; input_planes() applies the ROI for
    downstream consumers.
    """

    base: np.ndarray
    bottom_hat: np.ndarray
    grad_mag: np.ndarray
    grad_dir: np.ndarray
    roi: np.ndarray

    def input_planes(self) -> np.ndarray:
        """ROI-masked planes stacked as a (4, H, W) array."""
        m = self.roi.astype(float)
        return np.stack(
            [self.base * m, self.bottom_hat * m, self.grad_mag * m, self.grad_dir * m]
        )


def preprocess(
    img: np.ndarray,
    s_d: int = DEFAULT_STRUCT_DIAMETER,
    size: int = WORK_SIZE,
) -> PreprocessedPlanes:
    """Full plane-extraction pipeline for one raw grayscale image."""
    base = denoise_and_resize(img, size=size)
    roi = roi_mask(base)
    bh = bottom_hat(base, s_d)
    gm, gd = gradients(base)
    return PreprocessedPlanes(base=base, bottom_hat=bh, grad_mag=gm, grad_dir=gd, roi=roi)
