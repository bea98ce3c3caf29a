"""Binary lesion masks: Otsu thresholding, cleanup, and the pooled pyramid.

Masks are boolean ``H x W`` arrays.  After ``clean_mask`` a mask has
exactly one 4-connected foreground component and no enclosed holes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage
from PIL import Image

FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])

__all__ = [
    "MaskPyramid",
    "otsu_threshold",
    "clean_mask",
    "build_mask_pyramid",
    "load_mask",
    "save_mask",
]


# ---------------------------------------------------------------------------
# Otsu thresholding
# ---------------------------------------------------------------------------

def otsu_threshold(gray: np.ndarray) -> np.ndarray:
    """Binarize a single-channel [0, 1] image; the darker class is foreground.

    The threshold maximizes inter-class variance over 256 uniform bins,
    with ties resolved toward the lower threshold.
    """
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim == 3:
        if gray.shape[2] != 1:
            raise ValueError("otsu_threshold expects a single-channel image")
        gray = gray[:, :, 0]
    if gray.size == 0:
        raise ValueError("empty image")
    bins = np.minimum((gray * 256).astype(int), 255)
    hist = np.bincount(bins.reshape(-1), minlength=256).astype(np.float64)
    if np.count_nonzero(hist) < 2:
        raise ValueError("degenerate histogram: all pixels fall in one bin")

    centers = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(hist)
    s0 = np.cumsum(hist * centers)
    total, total_sum = w0[-1], s0[-1]
    w0 = w0[:-1]
    s0 = s0[:-1]
    w1 = total - w0
    valid = (w0 > 0) & (w1 > 0)
    mu0 = np.where(valid, s0 / np.maximum(w0, 1), 0.0)
    mu1 = np.where(valid, (total_sum - s0) / np.maximum(w1, 1), 0.0)
    var_between = np.where(valid, w0 * w1 * (mu0 - mu1) ** 2, -np.inf)
    t = int(np.argmax(var_between))  # argmax takes the first (lowest) maximum
    return bins <= t  # lower-bin class always has the lower mean


# ---------------------------------------------------------------------------
# Mask cleanup
# ---------------------------------------------------------------------------

def _largest_component(mask: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(mask, structure=FOUR_CONN)
    if n == 0:
        raise ValueError("empty mask: no foreground pixels")
    sizes = np.bincount(labels.reshape(-1))
    sizes[0] = 0
    best_size = sizes.max()
    candidates = set(np.nonzero(sizes == best_size)[0].tolist())
    if len(candidates) == 1:
        keep = next(iter(candidates))
    else:
        # tie: keep the component containing the row-major smallest pixel
        flat = labels.reshape(-1)
        keep = next(int(v) for v in flat if v in candidates)
    return labels == keep


def _fill_holes(mask: np.ndarray) -> np.ndarray:
    bg_labels, _ = ndimage.label(~mask, structure=FOUR_CONN)
    border = np.zeros_like(mask)
    border[0, :] = border[-1, :] = True
    border[:, 0] = border[:, -1] = True
    outside = np.unique(bg_labels[border & ~mask])
    hole = (~mask) & ~np.isin(bg_labels, outside)
    return mask | hole


def _binary_median(mask: np.ndarray, k: int = 9) -> np.ndarray:
    p = k // 2
    padded = np.pad(mask.astype(np.int64), p)  # zeros: border counts as background
    win = sliding_window_view(padded, (k, k))
    return win.sum(axis=(2, 3)) > (k * k) // 2


def clean_mask(mask: np.ndarray, max_rounds: int = 64) -> np.ndarray:
    """Largest-blob + hole-fill + 9x9 binary median blur, to a fixed point.

    The blur can fragment the blob or re-open holes, so the blob and hole
    passes are re-run after it.  The round is iterated until the mask stops
    changing; if the iteration instead enters a cycle, the canonical
    (lexicographically smallest) cycle member is returned.  Both exits make
    the operation deterministic and idempotent.
    """
    mask = np.asarray(mask).astype(bool)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    current = _fill_holes(_largest_component(mask))
    seen: dict[bytes, int] = {}
    history: list[np.ndarray] = []
    for _ in range(max_rounds):
        key = np.packbits(current).tobytes()
        if key in seen:
            cycle = history[seen[key]:]
            return min(cycle, key=lambda m: np.packbits(m).tobytes())
        seen[key] = len(history)
        history.append(current)
        blurred = _binary_median(current)
        if not blurred.any():
            # blur erased a tiny blob; the pre-blur mask is the fixed point
            return current
        nxt = _fill_holes(_largest_component(blurred))
        if np.array_equal(nxt, current):
            return current
        current = nxt
    return current


# ---------------------------------------------------------------------------
# Mask pyramid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MaskPyramid:
    """Per-layer flattened masks with unit sum of squares."""

    layers: dict[str, np.ndarray]   # layer name -> flat (M_l,) array
    shapes: dict[str, tuple[int, int]]

    def vector(self, layer: str) -> np.ndarray:
        return self.layers[layer]


def _pool2(plane: np.ndarray, pooling: str) -> np.ndarray:
    h2, w2 = plane.shape[0] // 2, plane.shape[1] // 2
    win = plane[: h2 * 2, : w2 * 2].reshape(h2, 2, w2, 2)
    if pooling == "max":
        return win.max(axis=(1, 3))
    if pooling == "average":
        return win.mean(axis=(1, 3))
    raise ValueError(f"unknown pooling {pooling!r}")


def build_mask_pyramid(mask: np.ndarray, style_layers, pooling: str = "max") -> MaskPyramid:
    """Downscale the mask through the 2x2 pooling cascade and normalize.

    A layer in block B sits after B-1 pools, so its mask has been pooled
    B-1 times.  Each level is flattened row-major and scaled to unit sum
    of squares.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    if not np.asarray(mask, dtype=bool).any():
        raise ValueError("empty mask: zero norm")
    blocks = sorted({int(name[4]) for name in style_layers})
    if any(not 1 <= b <= 5 for b in blocks):
        raise ValueError(f"style layers must be in blocks 1..5, got {style_layers}")

    levels = {1: mask.astype(np.float64)}
    for b in range(2, 6):
        levels[b] = _pool2(levels[b - 1], pooling)

    layers, shapes = {}, {}
    for name in style_layers:
        level = levels[int(name[4])]
        flat = level.reshape(-1)
        norm = np.sqrt(np.sum(flat * flat))
        if norm == 0:
            raise ValueError(f"mask vanished at layer {name}")
        layers[name] = flat / norm
        shapes[name] = level.shape
    return MaskPyramid(layers=layers, shapes=shapes)


# ---------------------------------------------------------------------------
# Mask I/O (single-channel PNG, 0 = background, 255 = foreground)
# ---------------------------------------------------------------------------

def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return arr > 0


def save_mask(mask: np.ndarray, path) -> None:
    arr = (np.asarray(mask, dtype=bool) * np.uint8(255))
    Image.fromarray(arr, mode="L").save(path)
