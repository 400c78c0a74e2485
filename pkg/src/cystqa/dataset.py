"""Stack data model, PNG-based stack IO and a synthetic stack generator.

A stack directory holds, per image id, `<id>.img.png` (8-bit grayscale),
`<id>.G1.png` and `<id>.G2.png` (8-bit masks, >=128 foreground), plus a
`stack.json` manifest {"stack_id": ..., "ids": [...]} fixing the slice order.
The synthetic generator emits the same layout plus `<id>.GT.png` ground truth.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .preprocess import disk

LABEL_NAMES = ("G1", "G2")


@dataclass
class ImageRecord:
    id: str
    stack_id: str
    index_in_stack: int
    image: np.ndarray
    labels: dict[str, np.ndarray]


@dataclass(frozen=True)
class StackSplit:
    train_ids: list[str]
    test_ids: list[str]


def save_gray_png(img: np.ndarray, path: Path | str) -> None:
    """Write a [0,1] float image as 8-bit grayscale PNG."""
    arr = np.clip(np.asarray(img, dtype=float), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="L").save(path)


def save_mask_png(mask: np.ndarray, path: Path | str) -> None:
    Image.fromarray(np.where(mask.astype(bool), 255, 0).astype(np.uint8), mode="L").save(path)


def load_gray_png(path: Path | str) -> np.ndarray:
    """Read a grayscale PNG rescaled to [0,1] floats."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=float)
    return arr / 255.0


def load_mask_png(path: Path | str) -> np.ndarray:
    """Read a mask PNG, binarized at 0.5 to tolerate anti-aliased files."""
    return load_gray_png(path) >= 0.5


def load_stack(dir_path: Path | str) -> list[ImageRecord]:
    """Load every record of a stack directory, in manifest order."""
    dir_path = Path(dir_path)
    manifest_path = dir_path / "stack.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"missing stack manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    stack_id = manifest["stack_id"]

    records = []
    for index, image_id in enumerate(manifest["ids"]):
        img_path = dir_path / f"{image_id}.img.png"
        if not img_path.exists():
            raise FileNotFoundError(f"missing image raster for id {image_id!r}: {img_path}")
        image = load_gray_png(img_path)
        labels = {}
        for name in LABEL_NAMES:
            mask_path = dir_path / f"{image_id}.{name}.png"
            if not mask_path.exists():
                raise FileNotFoundError(f"missing {name} mask for id {image_id!r}: {mask_path}")
            mask = load_mask_png(mask_path)
            if mask.shape != image.shape:
                raise ValueError(
                    f"mask {name} for id {image_id!r} has shape {mask.shape}, "
                    f"image has {image.shape}"
                )
            labels[name] = mask
        records.append(
            ImageRecord(
                id=image_id,
                stack_id=stack_id,
                index_in_stack=index,
                image=image,
                labels=labels,
            )
        )
    return records


def save_stack(records: list[ImageRecord], dir_path: Path | str, gt: dict[str, np.ndarray] | None = None) -> None:
    """Write records (and optional ground-truth masks) in the stack layout."""
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    ordered = sorted(records, key=lambda r: r.index_in_stack)
    manifest = {"stack_id": ordered[0].stack_id if ordered else "", "ids": [r.id for r in ordered]}
    (dir_path / "stack.json").write_text(json.dumps(manifest, indent=2) + "\n")
    for rec in ordered:
        save_gray_png(rec.image, dir_path / f"{rec.id}.img.png")
        for name in LABEL_NAMES:
            save_mask_png(rec.labels[name], dir_path / f"{rec.id}.{name}.png")
        if gt is not None and rec.id in gt:
            save_mask_png(gt[rec.id], dir_path / f"{rec.id}.GT.png")


def filter_annotated(records: list[ImageRecord]) -> tuple[list[ImageRecord], list[str]]:
    """Drop records whose masks are both blank; returns (kept, dropped ids)."""
    kept, dropped = [], []
    for rec in records:
        if any(rec.labels[name].any() for name in LABEL_NAMES):
            kept.append(rec)
        else:
            dropped.append(rec.id)
    return kept, dropped


def make_split(records: list[ImageRecord]) -> StackSplit:
    """Train on the first 3 slices plus 2 at the stack midpoint; test the rest.

    When a midpoint index collides with an already-chosen one, the next unused
    index is taken, so exactly 5 distinct training slices result for any
    stack of at least 5 records.
    """
    n = len(records)
    if n < 5:
        raise ValueError(f"need at least 5 records to split, got {n}")
    ordered = sorted(records, key=lambda r: r.index_in_stack)
    chosen: list[int] = []
    for candidate in (0, 1, 2, n // 2, n // 2 + 1):
        while candidate in chosen:
            candidate += 1
        assert candidate < n
        chosen.append(candidate)
    train = set(chosen)
    return StackSplit(
        train_ids=[ordered[i].id for i in sorted(train)],
        test_ids=[ordered[i].id for i in range(n) if i not in train],
    )


@dataclass(frozen=True)
class AnnotatorBias:
    """Systematic deviation of a simulated grader from the ground truth."""

    dilate_px: int = 0
    miss_small_below_px: int = 0


@dataclass
class SynthConfig:
    num_images: int = 12
    image_size: int = 300
    cyst_count_range: tuple[int, int] = (3, 6)
    cyst_radius_range: tuple[int, int] = (8, 18)
    speckle_sigma: float = 0.08
    blur_sigma: float = 1.2
    annotator_bias: dict[str, AnnotatorBias] = field(
        default_factory=lambda: {"G1": AnnotatorBias(), "G2": AnnotatorBias()}
    )
    rng_seed: int = 0
    stack_id: str = "synth"

    def validate(self) -> None:
        if self.num_images < 1:
            raise ValueError("num_images must be >= 1")
        if self.cyst_count_range[0] > self.cyst_count_range[1] or self.cyst_count_range[0] < 0:
            raise ValueError(f"bad cyst_count_range {self.cyst_count_range}")
        if self.cyst_radius_range[0] > self.cyst_radius_range[1] or self.cyst_radius_range[0] < 1:
            raise ValueError(f"bad cyst_radius_range {self.cyst_radius_range}")
        if self.speckle_sigma < 0:
            raise ValueError("speckle_sigma must be >= 0")
        if self.blur_sigma < 0:
            raise ValueError("blur_sigma must be >= 0")
        for name in LABEL_NAMES:
            if name not in self.annotator_bias:
                raise ValueError(f"annotator_bias missing entry for {name}")


def _apply_bias(gt: np.ndarray, bias: AnnotatorBias) -> np.ndarray:
    mask = gt.copy()
    if bias.dilate_px > 0:
        mask = ndimage.binary_dilation(mask, structure=disk(bias.dilate_px))
    if bias.miss_small_below_px > 0:
        labeled, count = ndimage.label(mask)
        if count:
            sizes = ndimage.sum_labels(np.ones_like(labeled), labeled, index=np.arange(1, count + 1))
            small = np.nonzero(sizes < bias.miss_small_below_px)[0] + 1
            mask = mask & ~np.isin(labeled, small)
    return mask


def generate_synthetic_stack(cfg: SynthConfig) -> tuple[list[ImageRecord], dict[str, np.ndarray]]:
    """Generate a stack of band-structured images with persistent dark cysts.

    Each image shows a bright horizontal retina-like band on a dark background
    with dark elliptical cysts inside the band. Cyst centres drift slowly from
    slice to slice so consecutive images show the same structures. Ground
    truth is the union of the cyst ellipses; grader masks derive from it via
    the configured per-annotator biases. The image (not the masks) is blurred
    to soften edges, then multiplicative Gaussian speckle is applied and the
    result clamped to [0, 1].
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.rng_seed)
    size = cfg.image_size

    band_top = int(size * 0.22)
    band_bottom = int(size * 0.78)
    background_level = 0.06
    band_level = 0.75
    cyst_level = 0.12

    n_cysts = int(rng.integers(cfg.cyst_count_range[0], cfg.cyst_count_range[1] + 1))
    r_lo, r_hi = cfg.cyst_radius_range
    cysts = []
    for _ in range(n_cysts):
        base_r = float(rng.uniform(r_lo, r_hi))
        margin = base_r + 4
        cysts.append(
            {
                "row": float(rng.uniform(band_top + margin, band_bottom - margin)),
                "col": float(rng.uniform(margin, size - margin)),
                "r_row": base_r * float(rng.uniform(0.55, 0.9)),
                "r_col": base_r,
                "angle": float(rng.uniform(0, np.pi)),
            }
        )

    yy, xx = np.mgrid[0:size, 0:size]
    records: list[ImageRecord] = []
    ground_truth: dict[str, np.ndarray] = {}
    for index in range(cfg.num_images):
        img = np.full((size, size), background_level)
        img[band_top:band_bottom, :] = band_level

        gt = np.zeros((size, size), dtype=bool)
        for cyst in cysts:
            dy = yy - cyst["row"]
            dx = xx - cyst["col"]
            cos_a = np.cos(cyst["angle"])
            sin_a = np.sin(cyst["angle"])
            axis_u = dy * cos_a + dx * sin_a
            axis_v = -dy * sin_a + dx * cos_a
            gt |= (axis_u / cyst["r_row"]) ** 2 + (axis_v / cyst["r_col"]) ** 2 <= 1.0
            # slow drift across consecutive slices keeps volumetric continuity
            cyst["row"] = float(
                np.clip(cyst["row"] + rng.normal(0, 1.5), band_top + r_hi + 3, band_bottom - r_hi - 3)
            )
            cyst["col"] = float(
                np.clip(cyst["col"] + rng.normal(0, 1.5), r_hi + 3, size - r_hi - 3)
            )
            cyst["r_row"] = float(np.clip(cyst["r_row"] * rng.uniform(0.97, 1.03), 2.5, r_hi))
            cyst["r_col"] = float(np.clip(cyst["r_col"] * rng.uniform(0.97, 1.03), 2.5, r_hi))
            cyst["angle"] = float(cyst["angle"] + rng.normal(0, 0.05))
        img[gt] = cyst_level

        if cfg.blur_sigma > 0:
            img = ndimage.gaussian_filter(img, sigma=cfg.blur_sigma)
        if cfg.speckle_sigma > 0:
            img = img * (1.0 + cfg.speckle_sigma * rng.standard_normal((size, size)))
        img = np.clip(img, 0.0, 1.0)

        image_id = f"{cfg.stack_id}_{index:03d}"
        labels = {name: _apply_bias(gt, cfg.annotator_bias[name]) for name in LABEL_NAMES}
        records.append(
            ImageRecord(
                id=image_id,
                stack_id=cfg.stack_id,
                index_in_stack=index,
                image=img,
                labels=labels,
            )
        )
        ground_truth[image_id] = gt
    return records, ground_truth
