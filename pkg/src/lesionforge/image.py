"""Raster preprocessing for dermoscopic images.

Images are ``H x W x C`` float64 arrays with samples in [0, 1], C in {1, 3}.
Every operation clamps on write so the invariant holds after any op.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

__all__ = [
    "load_image",
    "save_image",
    "to_uint8",
    "from_uint8",
    "resize_bilinear",
    "median_filter",
    "detect_hair_mask",
    "remove_hair",
    "shades_of_gray",
    "build_content_image",
]


def _validate(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"image must be H x W x 1 or H x W x 3, got shape {img.shape}")
    return img


def from_uint8(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr.astype(np.float64) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    img = _validate(img)
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def load_image(path) -> np.ndarray:
    """Read PNG/PPM (or any Pillow-readable raster) as float in [0, 1]."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        return from_uint8(np.asarray(im))


def save_image(img: np.ndarray, path) -> None:
    """Write 8-bit PNG or binary PPM depending on the file suffix."""
    arr = to_uint8(img)
    path = str(path)
    if path.lower().endswith(".ppm"):
        if arr.shape[2] == 1:
            arr = np.repeat(arr, 3, axis=2)
        with open(path, "wb") as fh:
            fh.write(f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
            fh.write(arr.tobytes())
        return
    if arr.shape[2] == 1:
        Image.fromarray(arr[:, :, 0], mode="L").save(path)
    else:
        Image.fromarray(arr, mode="RGB").save(path)


# ---------------------------------------------------------------------------
# Resize
# ---------------------------------------------------------------------------

def _axis_coords(n_out: int, n_in: int):
    """Half-pixel-center sample coordinates, clamped to the source range."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    w = src - lo
    return lo, hi, w


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel-center alignment."""
    img = _validate(img)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {(out_h, out_w)}")
    h, w, _ = img.shape
    y0, y1, wy = _axis_coords(out_h, h)
    x0, x1, wx = _axis_coords(out_w, w)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    tl = img[np.ix_(y0, x0)]
    tr = img[np.ix_(y0, x1)]
    bl = img[np.ix_(y1, x0)]
    br = img[np.ix_(y1, x1)]
    out = (
        tl * (1 - wy) * (1 - wx)
        + tr * (1 - wy) * wx
        + bl * wy * (1 - wx)
        + br * wy * wx
    )
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Median filter
# ---------------------------------------------------------------------------

def median_filter(img: np.ndarray, k: int) -> np.ndarray:
    """Per-channel k x k median with replicated (clamped) borders; k odd."""
    img = _validate(img)
    if k % 2 != 1 or k < 1:
        raise ValueError(f"window size must be odd and positive, got {k}")
    p = k // 2
    padded = np.pad(img, ((p, p), (p, p), (0, 0)), mode="edge")
    win = sliding_window_view(padded, (k, k), axis=(0, 1))
    return np.median(win, axis=(3, 4))


# ---------------------------------------------------------------------------
# Hair removal (DullRazor-style)
# ---------------------------------------------------------------------------

# line structuring elements: orientation -> unit step along the line
_LINE_STEPS = {0: (0, 1), 45: (1, 1), 90: (1, 0)}
# interpolation runs perpendicular to the detected hair direction
_PERP_STEPS = {0: (1, 0), 45: (1, -1), 90: (0, 1)}


def _shift(plane: np.ndarray, dy: int, dx: int) -> np.ndarray:
    h, w = plane.shape
    ys = np.clip(np.arange(h) + dy, 0, h - 1)
    xs = np.clip(np.arange(w) + dx, 0, w - 1)
    return plane[np.ix_(ys, xs)]


def _line_closing(plane: np.ndarray, step: tuple[int, int], length: int) -> np.ndarray:
    half = length // 2
    offs = [(step[0] * d, step[1] * d) for d in range(-half, half + 1)]
    dil = plane
    for dy, dx in offs:
        dil = np.maximum(dil, _shift(plane, dy, dx))
    ero = dil
    for dy, dx in offs:
        ero = np.minimum(ero, _shift(dil, dy, dx))
    return ero


def detect_hair_mask(img: np.ndarray, threshold: float = 0.07,
                     se_length: int = 9) -> tuple[np.ndarray, np.ndarray]:
    """Hair mask from line-closing responses.

    Per channel, grayscale morphological closing with three line
    structuring elements (0, 45, 90 degrees) lifts thin dark structures to
    the surrounding background level.  Returns the boolean mask of pixels
    whose best closing response exceeds ``threshold`` and, per pixel, the
    index (into 0/45/90) of the strongest orientation.
    """
    img = _validate(img)
    if img.shape[2] != 3:
        raise ValueError("hair removal expects a 3-channel image")
    h, w, _ = img.shape
    responses = []
    for step in _LINE_STEPS.values():
        diff = np.zeros((h, w))
        for c in range(3):
            closed = _line_closing(img[:, :, c], step, se_length)
            diff = np.maximum(diff, closed - img[:, :, c])
        responses.append(diff)
    stack = np.stack(responses)
    return stack.max(axis=0) > threshold, stack.argmax(axis=0)


def remove_hair(img: np.ndarray, threshold: float = 0.07, se_length: int = 9,
                max_reach: int = 25) -> np.ndarray:
    """Detect dark hair threads and inpaint them from nearby clean pixels.

    Each masked pixel (see ``detect_hair_mask``) is replaced by linear
    interpolation between the nearest non-hair pixels along the direction
    perpendicular to its strongest line orientation; unmasked pixels are
    untouched.
    """
    img = _validate(img)
    mask, best_orient = detect_hair_mask(img, threshold, se_length)
    if not mask.any():
        return img.copy()

    h, w, _ = img.shape
    orients = list(_LINE_STEPS)
    out = img.copy()
    ys, xs = np.nonzero(mask)
    for y, x in zip(ys, xs):
        dy, dx = _PERP_STEPS[orients[best_orient[y, x]]]
        samples = []
        for sgn in (1, -1):
            for d in range(1, max_reach + 1):
                yy, xx = y + sgn * dy * d, x + sgn * dx * d
                if not (0 <= yy < h and 0 <= xx < w):
                    break
                if not mask[yy, xx]:
                    samples.append((d, img[yy, xx, :]))
                    break
        if len(samples) == 2:
            (d1, v1), (d2, v2) = samples
            out[y, x, :] = (d2 * v1 + d1 * v2) / (d1 + d2)
        elif len(samples) == 1:
            out[y, x, :] = samples[0][1]
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Shades of Gray color constancy
# ---------------------------------------------------------------------------

def shades_of_gray(img: np.ndarray, p: float = 6.0) -> np.ndarray:
    """Equalize per-channel Minkowski means of order ``p`` (von Kries gains)."""
    img = _validate(img)
    if img.shape[2] != 3:
        raise ValueError("shades of gray expects a 3-channel image")
    if p < 1:
        raise ValueError(f"Minkowski order must be >= 1, got {p}")
    m = np.mean(img**p, axis=(0, 1)) ** (1.0 / p)
    g = m.mean()
    gains = np.where(m > 1e-12, g / np.maximum(m, 1e-12), 1.0)
    return np.clip(img * gains[None, None, :], 0.0, 1.0)


# ---------------------------------------------------------------------------
# Content image
# ---------------------------------------------------------------------------

def build_content_image(images) -> np.ndarray:
    """Pixelwise mean of uniformly shaped images, sequential float64 sum."""
    images = list(images)
    if not images:
        raise ValueError("need at least one image")
    shape = np.asarray(images[0]).shape
    acc = np.zeros(shape)
    for im in images:
        im = _validate(im)
        if im.shape != shape:
            raise ValueError(f"shape mismatch: {im.shape} != {shape}")
        acc += im
    return acc / len(images)
