"""Classical ABCD lesion descriptors computed from an image and its mask.

Coordinates use x = column, y = row.  All shape features operate on
boolean masks; color features use the original preprocessed image
restricted to in-mask pixels.

The assembled feature vector has a fixed 33-entry layout:

    [sai_x, sai_y, lengthening, border_irregularity,
     6 color proportions, 21 channel summaries (7 per RGB channel),
     diameter_h, diameter_w]
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np

__all__ = [
    "ShapeMoments",
    "ColorTable",
    "FEATURE_NAMES",
    "compute_moments",
    "rotate_mask",
    "sai",
    "lengthening",
    "border_irregularity",
    "color_proportions",
    "channel_summaries",
    "diameter",
    "assemble_abcd",
]

_SUMMARY_STATS = ("min", "q1", "median", "q3", "max", "mean", "sd")


@dataclass(frozen=True)
class ShapeMoments:
    x0: float
    y0: float
    m11: float
    m20: float
    m02: float
    theta: float


@dataclass(frozen=True)
class ColorTable:
    """Ordered per-color RGB boxes; a pixel may fall in several boxes."""

    names: tuple[str, ...]
    rgb_min: np.ndarray  # n_colors x 3
    rgb_max: np.ndarray

    @classmethod
    def from_json(cls, path) -> "ColorTable":
        with open(path) as fh:
            doc = json.load(fh)
        return cls._from_doc(doc)

    @classmethod
    def default(cls) -> "ColorTable":
        doc = json.loads(
            resources.files("lesionforge.data").joinpath("color_table.json").read_text()
        )
        return cls._from_doc(doc)

    @classmethod
    def _from_doc(cls, doc) -> "ColorTable":
        entries = doc["colors"]
        names = tuple(e["name"] for e in entries)
        lo = np.array([e["rgb_min"] for e in entries], dtype=np.float64)
        hi = np.array([e["rgb_max"] for e in entries], dtype=np.float64)
        if lo.shape != (len(names), 3) or hi.shape != (len(names), 3):
            raise ValueError("each color needs rgb_min[3] and rgb_max[3]")
        if (lo > hi).any():
            raise ValueError("rgb_min must not exceed rgb_max")
        return cls(names=names, rgb_min=lo, rgb_max=hi)


def _default_feature_names() -> list[str]:
    names = ["sai_x", "sai_y", "lengthening", "border_irregularity"]
    names += [f"color_{n}" for n in ColorTable.default().names]
    for ch in "rgb":
        names += [f"{ch}_{s}" for s in _SUMMARY_STATS]
    names += ["diameter_h", "diameter_w"]
    return names


FEATURE_NAMES = _default_feature_names()


def _foreground(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mask = np.asarray(mask, dtype=bool)
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ValueError("empty mask")
    return ys, xs


# ---------------------------------------------------------------------------
# Shape
# ---------------------------------------------------------------------------

def compute_moments(mask: np.ndarray) -> ShapeMoments:
    """Centroid, central second moments, and principal-axis angle."""
    ys, xs = _foreground(mask)
    x0 = xs.mean()
    y0 = ys.mean()
    dx = xs - x0
    dy = ys - y0
    m11 = float(np.sum(dx * dy))
    m20 = float(np.sum(dx * dx))
    m02 = float(np.sum(dy * dy))
    theta = 0.5 * np.arctan2(2.0 * m11, m20 - m02)  # atan2(0, 0) == 0
    return ShapeMoments(x0=float(x0), y0=float(y0), m11=m11, m20=m20, m02=m02, theta=theta)


def rotate_mask(mask: np.ndarray, theta: float) -> np.ndarray:
    """Align the principal axis with x: nearest-neighbor rotation by -theta.

    Uses inverse mapping about the centroid onto a square canvas sized to
    hold any rotation of the input.  ``theta == 0`` returns the mask
    unchanged.
    """
    mask = np.asarray(mask, dtype=bool)
    if theta == 0.0:
        return mask.copy()
    h, w = mask.shape
    mom = compute_moments(mask)
    side = int(np.ceil(np.hypot(h, w))) + 2
    cy = cx = (side - 1) / 2.0
    rr, cc = np.mgrid[:side, :side]
    u = cc - cx
    v = rr - cy
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    # inverse map: rotate the destination offset by +theta back to the source
    sx = np.rint(mom.x0 + cos_t * u - sin_t * v).astype(int)
    sy = np.rint(mom.y0 + sin_t * u + cos_t * v).astype(int)
    valid = (sy >= 0) & (sy < h) & (sx >= 0) & (sx < w)
    out = np.zeros((side, side), dtype=bool)
    out[valid] = mask[sy[valid], sx[valid]]
    return out


def sai(rotated_mask: np.ndarray) -> tuple[float, float]:
    """Shape asymmetry: IoU of each flipped half against the opposite half.

    The principal axes pass through the centroid row/column rounded to the
    nearest pixel line; the axis line itself belongs to neither half.
    """
    ys, xs = _foreground(rotated_mask)
    mask = np.asarray(rotated_mask, dtype=bool)
    h, w = mask.shape

    def iou_about_row(m: np.ndarray, r0: int, extent: int) -> float:
        # embed both halves in a 2*extent row space so flipped pixels that
        # leave the canvas still count toward the union
        top = np.zeros((2 * extent + 1, m.shape[1]), dtype=bool)
        bottom = np.zeros_like(top)
        rows = np.arange(m.shape[0])
        for r in rows[rows < r0]:
            top[2 * r0 - r] |= m[r]
        for r in rows[rows > r0]:
            bottom[r] |= m[r]
        inter = np.logical_and(top, bottom).sum()
        union = np.logical_or(top, bottom).sum()
        return float(inter) / union if union else 1.0

    r0 = int(np.rint(ys.mean()))
    c0 = int(np.rint(xs.mean()))
    sai_x = iou_about_row(mask, r0, h)
    sai_y = iou_about_row(mask.T, c0, w)
    return sai_x, sai_y


def lengthening(moments: ShapeMoments) -> float:
    """Inertia-eigenvalue ratio in (0, 1]; 1 for isotropic shapes."""
    inertia = np.array([[moments.m20, moments.m11], [moments.m11, moments.m02]])
    lam = np.linalg.eigvalsh(inertia)
    if lam[1] <= 0:
        raise ValueError("degenerate mask: zero inertia")
    return float(max(lam[0], 0.0) / lam[1])


def border_irregularity(mask: np.ndarray) -> float:
    """Compactness P^2 / (4 pi A); P counts foreground pixels whose 3x3
    neighborhood (zeros outside the image) is not all foreground."""
    mask = np.asarray(mask, dtype=bool)
    area = int(mask.sum())
    if area == 0:
        raise ValueError("empty mask")
    padded = np.pad(mask.astype(np.int64), 1)
    nsum = np.zeros_like(padded[1:-1, 1:-1])
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            nsum += padded[1 + dy : padded.shape[0] - 1 + dy,
                           1 + dx : padded.shape[1] - 1 + dx]
    perimeter = int(np.sum(mask & (nsum < 9)))
    return perimeter * perimeter / (4.0 * np.pi * area)


# ---------------------------------------------------------------------------
# Color
# ---------------------------------------------------------------------------

def color_proportions(img: np.ndarray, mask: np.ndarray, table: ColorTable) -> np.ndarray:
    """Fraction of in-mask pixels inside each color's RGB box (inclusive)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("expected an H x W x 3 image")
    ys, xs = _foreground(mask)
    px = img[ys, xs, :]  # n_pixels x 3
    inside = (px[:, None, :] >= table.rgb_min[None, :, :]) & (
        px[:, None, :] <= table.rgb_max[None, :, :]
    )
    return inside.all(axis=2).mean(axis=0)


def channel_summaries(img: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Seven order/moment statistics per RGB channel over in-mask pixels.

    Per channel: min, lower quartile, median, upper quartile, max, mean,
    population standard deviation; quartiles use linear interpolation.
    """
    img = np.asarray(img, dtype=np.float64)
    ys, xs = _foreground(mask)
    out = []
    for c in range(img.shape[2]):
        vals = img[ys, xs, c]
        q1, med, q3 = np.quantile(vals, [0.25, 0.5, 0.75])
        out.extend([vals.min(), q1, med, q3, vals.max(), vals.mean(), vals.std()])
    return np.array(out)


def diameter(rotated_mask: np.ndarray) -> tuple[int, int]:
    """Tight bounding-box height and width of the rotated mask, in pixels."""
    ys, xs = _foreground(rotated_mask)
    return int(ys.max() - ys.min() + 1), int(xs.max() - xs.min() + 1)


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------

def assemble_abcd(img: np.ndarray, mask: np.ndarray,
                  table: ColorTable | None = None) -> np.ndarray:
    """Fixed-order 33-entry descriptor vector; see module docstring.

    ``img`` must be the original (pre-transfer, post-preprocessing) image:
    shape information is destroyed by style transfer, so descriptors are
    always taken from the source image.
    """
    if table is None:
        table = ColorTable.default()
    mom = compute_moments(mask)
    rotated = rotate_mask(mask, mom.theta)
    sai_x, sai_y = sai(rotated)
    d_h, d_w = diameter(rotated)
    vec = np.concatenate([
        [sai_x, sai_y, lengthening(mom), border_irregularity(mask)],
        color_proportions(img, mask, table),
        channel_summaries(img, mask),
        [d_h, d_w],
    ])
    assert vec.shape == (33,)
    return vec
