"""Three-branch parallel echo state network over masked sub-windows.

Each branch keeps a fixed random input matrix and a sparse random recurrent
matrix rescaled to a target spectral radius; only the linear readout is
trained, by accumulating normal equations over every pixel of every training
window and solving one ridge system per branch at the end.

The reservoir state is kept per pixel position of a sub-window: processing a
window updates the state at each pixel from the state stored at the same
pixel position after the previous window, so structures persisting across
consecutive slices reinforce each other. Training stops when the branch-state
Gram matrices stabilize between windows (SSIM criterion) or after five
training images.
"""
from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

from .baseline import RegionalProposals
from .preprocess import PreprocessedPlanes, bilinear_resize, nearest_resize

MAGIC = b"PARESN1"
MAX_TRAIN_IMAGES = 5
SSIM_MEAN_STOP = 0.8
SSIM_STD_STOP = 0.1


@dataclass
class EsnHyperParams:
    m: int = 100                 # reservoir size
    n: int = 4                   # input planes
    c: int = 2                   # classes (background, foreground)
    alpha: float = 0.95          # leak rate
    ridge_lambda: float = 1e-5
    spectral_radius: float = 0.9
    sparsity: float = 0.1        # recurrent connection probability
    w_m: int = 100               # sub-window side
    branches: int = 3
    rng_seed: int = 0

    def validate(self) -> None:
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.ridge_lambda <= 0:
            raise ValueError("ridge_lambda must be > 0")
        if self.m <= self.n:
            raise ValueError(f"reservoir size m={self.m} must exceed input planes n={self.n}")
        if not (0.0 < self.spectral_radius <= 1.0):
            raise ValueError("spectral_radius must be in (0, 1]")
        if not (0.0 < self.sparsity <= 1.0):
            raise ValueError("sparsity must be in (0, 1]")
        if self.branches < 2:
            raise ValueError("need at least 2 branches")
        if self.w_m < 2:
            raise ValueError("w_m must be >= 2")
        if self.c < 2:
            raise ValueError("need at least 2 classes")


@dataclass
class ReservoirBranch:
    w_in: np.ndarray               # (m, 1+n)
    w: np.ndarray                  # (m, m)
    state: np.ndarray              # (m, w_m^2)
    acc_a: np.ndarray              # (1+n+m, 1+n+m)
    acc_b: np.ndarray              # (1+n+m, c)
    w_out: np.ndarray | None = None  # (c, 1+n+m) once finalized


@dataclass
class ParEsnModel:
    hp: EsnHyperParams
    branches: list[ReservoirBranch]
    trained: bool = False
    ssim_history: list[float] = field(default_factory=list)
    windows_seen: int = 0
    images_seen: int = 0
    last_gram: np.ndarray | None = None

    def clone_for_inference(self) -> "ParEsnModel":
        """Deep copy so parallel workers can evolve test-time states safely."""
        return copy.deepcopy(self)


def estimate_spectral_radius(w: np.ndarray, iters: int = 100, tol: float = 1e-8) -> float:
    """Power-iteration estimate of the dominant eigenvalue magnitude.

    Starts from the normalized ones vector; deterministic, so the estimate is
    exactly scale-equivariant.
    """
    w = np.asarray(w, dtype=float)
    v = np.ones(w.shape[0]) / math.sqrt(w.shape[0])
    est = 0.0
    for _ in range(iters):
        u = w @ v
        nxt = float(np.linalg.norm(u))
        if nxt == 0.0:
            return 0.0
        v = u / nxt
        if abs(nxt - est) < tol:
            return nxt
        est = nxt
    return est


def init_paresn(hp: EsnHyperParams) -> ParEsnModel:
    """Randomly initialize all branches; deterministic under hp.rng_seed."""
    hp.validate()
    rng = np.random.default_rng(hp.rng_seed)
    dim = 1 + hp.n + hp.m
    branches = []
    for _ in range(hp.branches):
        w_in = rng.uniform(-0.5, 0.5, size=(hp.m, 1 + hp.n))
        w = rng.uniform(-0.5, 0.5, size=(hp.m, hp.m))
        w[rng.random((hp.m, hp.m)) >= hp.sparsity] = 0.0
        radius = estimate_spectral_radius(w)
        if radius > 0:
            w *= hp.spectral_radius / radius
        branches.append(
            ReservoirBranch(
                w_in=w_in,
                w=w,
                state=np.zeros((hp.m, hp.w_m * hp.w_m)),
                acc_a=np.zeros((dim, dim)),
                acc_b=np.zeros((dim, hp.c)),
            )
        )
    return ParEsnModel(hp=hp, branches=branches)


@dataclass
class SubWindow:
    """One w_m x w_m training/prediction tile.

    origin/height/width describe the clipped source region in image
    coordinates; border tiles smaller than w_m x w_m are bilinearly resized
    up to the working size.
    """

    origin: tuple[int, int]
    height: int
    width: int
    planes: np.ndarray                # (n, w_m, w_m)
    target: np.ndarray | None = None  # (w_m, w_m) bool


def _tile_starts(anchor: int, lo: int, hi: int, w_m: int) -> list[int]:
    """Grid starts anchor + k*w_m whose [start, start+w_m) hits [lo, hi]."""
    k_lo = math.ceil((lo - anchor - w_m + 1) / w_m)
    k_hi = math.floor((hi - anchor) / w_m)
    return [anchor + k * w_m for k in range(k_lo, k_hi + 1)]


def extract_subwindows(
    planes: PreprocessedPlanes, w_m: int, target: np.ndarray | None = None
) -> list[SubWindow]:
    """Tile windows over the ROI bounding box, anchored at the ROI centroid.

    Extraction starts from the centroid and works outward: windows are
    ordered by the distance of their centre from the ROI centroid, so the
    content-rich middle of the region is consumed first. Windows extending
    past the image border are clipped flush to it and their content resized
    back to w_m x w_m; windows containing no ROI pixel are dropped. Returns
    an empty list for an empty ROI.
    """
    roi = planes.roi.astype(bool)
    if not roi.any():
        return []
    h, w = roi.shape
    rows_idx, cols_idx = np.nonzero(roi)
    center_r = int(round(float(rows_idx.mean())))
    center_c = int(round(float(cols_idx.mean())))
    anchor_r = center_r - w_m // 2
    anchor_c = center_c - w_m // 2

    stacked = planes.input_planes()
    windows = []
    for tr in _tile_starts(anchor_r, int(rows_idx.min()), int(rows_idx.max()), w_m):
        for tc in _tile_starts(anchor_c, int(cols_idx.min()), int(cols_idx.max()), w_m):
            r0, r1 = max(tr, 0), min(tr + w_m, h)
            c0, c1 = max(tc, 0), min(tc + w_m, w)
            if r1 <= r0 or c1 <= c0:
                continue
            if not roi[r0:r1, c0:c1].any():
                continue
            content = stacked[:, r0:r1, c0:c1]
            if content.shape[1:] != (w_m, w_m):
                content = np.stack([bilinear_resize(p, w_m, w_m) for p in content])
            win_target = None
            if target is not None:
                t = target.astype(float)[r0:r1, c0:c1]
                if t.shape != (w_m, w_m):
                    t = bilinear_resize(t, w_m, w_m)
                win_target = t > 0.5
            windows.append(
                SubWindow(
                    origin=(r0, c0),
                    height=r1 - r0,
                    width=c1 - c0,
                    planes=np.ascontiguousarray(content),
                    target=win_target,
                )
            )
    centroid = (float(rows_idx.mean()), float(cols_idx.mean()))

    def from_center(win: SubWindow) -> tuple[float, tuple[int, int]]:
        mid_r = win.origin[0] + win.height / 2.0
        mid_c = win.origin[1] + win.width / 2.0
        return ((mid_r - centroid[0]) ** 2 + (mid_c - centroid[1]) ** 2, win.origin)

    windows.sort(key=from_center)
    return windows


def _advance_state(
    branch: ReservoirBranch, u: np.ndarray, ones: np.ndarray, alpha: float
) -> np.ndarray:
    pre = branch.w_in @ np.vstack([ones, u]) + branch.w @ branch.state
    return (1.0 - alpha) * branch.state + alpha * np.tanh(pre)


def train_on_window(model: ParEsnModel, win: SubWindow) -> ParEsnModel:
    """Run the state update over one window and accumulate the ridge system."""
    if model.trained:
        raise RuntimeError("model already finalized; cannot train further")
    if win.target is None:
        raise ValueError("training window has no target")
    hp = model.hp
    d = win.planes.shape[1] * win.planes.shape[2]
    u = win.planes.reshape(hp.n, d)
    y = win.target.reshape(d).astype(float)
    targets = np.vstack([1.0 - y, y])  # class 0 = background
    ones = np.ones((1, d))
    for branch in model.branches:
        state = _advance_state(branch, u, ones, hp.alpha)
        z = np.vstack([ones, u, state])
        branch.acc_a += z @ z.T
        branch.acc_b += z @ targets.T
        branch.state = state
    model.windows_seen += 1
    return model


def _normalized_gram(branch: ReservoirBranch) -> np.ndarray:
    g = branch.state @ branch.state.T
    lo = float(g.min())
    hi = float(g.max())
    if hi > lo:
        return (g - lo) / (hi - lo)
    return np.zeros_like(g)


def check_stopping(model: ParEsnModel) -> bool:
    """Update the SSIM history from the branch Grams and test the stop rule.

    Stops when the history's running mean is >= 0.8 with running std <= 0.1,
    or once five training images have been consumed.
    """
    gram = np.mean([_normalized_gram(b) for b in model.branches], axis=0)
    if model.last_gram is not None:
        model.ssim_history.append(ssim(gram, model.last_gram))
    model.last_gram = gram
    if model.images_seen >= MAX_TRAIN_IMAGES:
        return True
    if not model.ssim_history:
        return False
    hist = np.asarray(model.ssim_history)
    return bool(hist.mean() >= SSIM_MEAN_STOP and hist.std() <= SSIM_STD_STOP)


def finalize(model: ParEsnModel) -> ParEsnModel:
    """Solve the accumulated ridge system (acc_a + lambda*I) w = acc_b per branch."""
    if model.windows_seen == 0:
        raise RuntimeError("cannot finalize before training on at least one window")
    for branch in model.branches:
        system = branch.acc_a + model.hp.ridge_lambda * np.eye(branch.acc_a.shape[0])
        solution = linalg.solve(system, branch.acc_b, assume_a="pos")
        if not np.all(np.isfinite(solution)):
            raise FloatingPointError("ridge solve produced non-finite readout weights")
        branch.w_out = solution.T
    model.trained = True
    return model


def train_paresn(
    model: ParEsnModel, pairs: list[tuple[PreprocessedPlanes, np.ndarray]]
) -> ParEsnModel:
    """Train over (planes, target) images honoring the stopping rule, then finalize."""
    stopped = False
    for planes, target in pairs:
        for win in extract_subwindows(planes, model.hp.w_m, target=target):
            train_on_window(model, win)
            if check_stopping(model):
                stopped = True
                break
        model.images_seen += 1
        if stopped or model.images_seen >= MAX_TRAIN_IMAGES:
            break
    return finalize(model)


def predict_paresn(model: ParEsnModel, planes: PreprocessedPlanes) -> RegionalProposals:
    """Predict one proposal mask per branch; never mutates the trained model.

    Test-time states start from a fresh copy of the post-training snapshot for
    every image and evolve window to window exactly like training. Per pixel
    the class with maximal score wins; score ties go to background. Border
    tiles map back through a nearest-neighbour resize of the class map.
    """
    if not model.trained:
        raise RuntimeError("model is not trained")
    hp = model.hp
    roi = planes.roi.astype(bool)
    h, w = roi.shape
    label_maps = [np.zeros((h, w), dtype=int) for _ in model.branches]
    if roi.any():
        states = [b.state.copy() for b in model.branches]
        windows = extract_subwindows(planes, hp.w_m)
        d = hp.w_m * hp.w_m
        ones = np.ones((1, d))
        for win in windows:
            u = win.planes.reshape(hp.n, d)
            for bi, branch in enumerate(model.branches):
                pre = branch.w_in @ np.vstack([ones, u]) + branch.w @ states[bi]
                state = (1.0 - hp.alpha) * states[bi] + hp.alpha * np.tanh(pre)
                states[bi] = state
                scores = branch.w_out @ np.vstack([ones, u, state])
                cls = np.argmax(scores, axis=0).reshape(hp.w_m, hp.w_m)
                if (win.height, win.width) != (hp.w_m, hp.w_m):
                    cls = nearest_resize(cls, win.height, win.width)
                r0, c0 = win.origin
                label_maps[bi][r0 : r0 + win.height, c0 : c0 + win.width] = cls
    masks = [(lm == 1) & roi for lm in label_maps]
    return RegionalProposals(p1=masks[0], p2=masks[1], p3=masks[2])


def _window_sums(x: np.ndarray, win: int) -> np.ndarray:
    s = np.cumsum(np.cumsum(x, axis=0), axis=1)
    s = np.pad(s, ((1, 0), (1, 0)))
    return s[win:, win:] - s[:-win, win:] - s[win:, :-win] + s[:-win, :-win]


def ssim(
    a: np.ndarray,
    b: np.ndarray,
    window: int = 8,
    k1: float = 0.01,
    k2: float = 0.03,
    data_range: float = 1.0,
) -> float:
    """Mean structural similarity over sliding uniform windows (valid mode)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    win = min(window, a.shape[0], a.shape[1])
    n = win * win
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a = _window_sums(a, win) / n
    mu_b = _window_sums(b, win) / n
    var_a = _window_sums(a * a, win) / n - mu_a * mu_a
    var_b = _window_sums(b * b, win) / n - mu_b * mu_b
    cov = _window_sums(a * b, win) / n - mu_a * mu_b
    smap = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    )
    return float(smap.mean())


def save_paresn(model: ParEsnModel, path: Path | str) -> None:
    """Write the model as a PARESN1 container: JSON header + raw float64 blocks.

    Per branch, w_in, w, the readout (when trained) and the state snapshot are
    stored little-endian; the ridge accumulators are not persisted, so a
    reloaded untrained model starts accumulation afresh.
    """
    header = {
        "hp": asdict(model.hp),
        "trained": model.trained,
        "ssim_history": model.ssim_history,
        "windows_seen": model.windows_seen,
        "images_seen": model.images_seen,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for branch in model.branches:
            arrays = [branch.w_in, branch.w]
            if model.trained:
                arrays.append(branch.w_out)
            arrays.append(branch.state)
            for arr in arrays:
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_paresn(path: Path | str) -> ParEsnModel:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"not a PARESN1 container: {path}")
    offset = len(MAGIC)
    (header_len,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    header = json.loads(raw[offset : offset + header_len].decode("utf-8"))
    offset += header_len

    hp = EsnHyperParams(**header["hp"])
    dim = 1 + hp.n + hp.m
    d = hp.w_m * hp.w_m

    def take(shape: tuple[int, int]) -> np.ndarray:
        nonlocal offset
        count = shape[0] * shape[1]
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset += count * 8
        return arr.astype(float)

    branches = []
    for _ in range(hp.branches):
        w_in = take((hp.m, 1 + hp.n))
        w = take((hp.m, hp.m))
        w_out = take((hp.c, dim)) if header["trained"] else None
        state = take((hp.m, d))
        branches.append(
            ReservoirBranch(
                w_in=w_in,
                w=w,
                state=state,
                acc_a=np.zeros((dim, dim)),
                acc_b=np.zeros((dim, hp.c)),
                w_out=w_out,
            )
        )
    return ParEsnModel(
        hp=hp,
        branches=branches,
        trained=header["trained"],
        ssim_history=list(header["ssim_history"]),
        windows_seen=header["windows_seen"],
        images_seen=header["images_seen"],
    )
