"""Three-way CP decomposition of an image stack, fitted with ALS.

An image collection becomes an ``N x H x (W*3)`` tensor (channels laid out
side by side along the width axis).  ``cp_als`` factors the training tensor
as ``X ~ sum_r a_r o b_r o c_r``; the per-image rows of the first factor are
the latent features.  Held-out images are projected onto the frozen
``B``/``C`` basis by least squares.

Unfoldings and the Khatri-Rao product follow the usual conventions: the
mode-1 unfolding places element ``(i1, i2, i3)`` in row ``i1``, column
``i3*I2 + i2``, so that ``unfold1(X) == A @ khatri_rao(C, B).T``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "CpModel",
    "CpDivergence",
    "stack_images",
    "unstack_images",
    "unfold1",
    "unfold2",
    "unfold3",
    "khatri_rao",
    "cp_als",
    "project_test",
    "pinv_psd",
    "rank_clusters_report",
    "save_model",
    "load_model",
]

_JITTER = 1e-10


class CpDivergence(RuntimeError):
    """Raised when an ALS sweep produces non-finite factors."""


@dataclass(frozen=True)
class CpModel:
    """Fitted factors; rows of ``a`` index images, ``b`` rows, ``c`` columns.

    ``b`` and ``c`` columns have unit norm with their largest-magnitude
    entry positive; all scale lives in ``a``.
    """

    a: np.ndarray          # n_images x rank
    b: np.ndarray          # height x rank
    c: np.ndarray          # width*channels x rank
    fit_trace: tuple[float, ...]

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    @property
    def fit(self) -> float:
        return self.fit_trace[-1]


# ---------------------------------------------------------------------------
# Tensor layout
# ---------------------------------------------------------------------------

def stack_images(images) -> np.ndarray:
    """Stack ``H x W x 3`` images into an ``N x H x (W*3)`` tensor.

    Color channels are appended along the width axis, so slab ``[n]``
    is the red plane, then green, then blue, side by side.
    """
    images = list(images)
    if not images:
        raise ValueError("no images to stack")
    shape = images[0].shape
    slabs = []
    for i, img in enumerate(images):
        img = np.asarray(img, dtype=np.float64)
        if img.shape != shape or img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"image {i} has shape {img.shape}, expected {shape}")
        slabs.append(np.concatenate([img[:, :, c] for c in range(3)], axis=1))
    return np.stack(slabs)


def unstack_images(tensor: np.ndarray) -> np.ndarray:
    """Inverse of :func:`stack_images`: ``N x H x (W*3)`` to ``N x H x W x 3``."""
    n, h, w3 = tensor.shape
    if w3 % 3:
        raise ValueError(f"width {w3} is not divisible by 3")
    w = w3 // 3
    return np.stack([tensor[:, :, c * w : (c + 1) * w] for c in range(3)], axis=-1)


def unfold1(x: np.ndarray) -> np.ndarray:
    return x.transpose(0, 2, 1).reshape(x.shape[0], -1)


def unfold2(x: np.ndarray) -> np.ndarray:
    return x.transpose(1, 2, 0).reshape(x.shape[1], -1)


def unfold3(x: np.ndarray) -> np.ndarray:
    return x.transpose(2, 1, 0).reshape(x.shape[2], -1)


def khatri_rao(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Column-wise Kronecker product; row ``i*Iv + j`` is ``u[i] * v[j]``."""
    if u.shape[1] != v.shape[1]:
        raise ValueError(f"rank mismatch {u.shape[1]} != {v.shape[1]}")
    return (u[:, None, :] * v[None, :, :]).reshape(-1, u.shape[1])


# ---------------------------------------------------------------------------
# ALS
# ---------------------------------------------------------------------------

def pinv_psd(g: np.ndarray, cutoff: float = 1e-12) -> np.ndarray:
    """Pseudo-inverse of a symmetric PSD matrix via its eigendecomposition."""
    lam, q = np.linalg.eigh((g + g.T) / 2.0)
    keep = lam > cutoff * max(lam.max(), 0.0)
    inv = np.where(keep, 1.0 / np.where(keep, lam, 1.0), 0.0)
    return (q * inv) @ q.T


def _reconstruct1(a, b, c):
    return a @ khatri_rao(c, b).T


def _fit(x1, a, b, c, norm_x):
    resid = np.linalg.norm(x1 - _reconstruct1(a, b, c))
    return 1.0 - resid / norm_x


def _als_single(tensor, rank, rng, max_sweeps, fit_tol):
    x1, x2, x3 = unfold1(tensor), unfold2(tensor), unfold3(tensor)
    norm_x = np.linalg.norm(tensor)
    shapes = tensor.shape
    a = rng.uniform(size=(shapes[0], rank))
    b = rng.uniform(size=(shapes[1], rank))
    c = rng.uniform(size=(shapes[2], rank))
    eye = np.eye(rank)
    trace = []
    for sweep in range(max_sweeps):
        a = x1 @ khatri_rao(c, b) @ pinv_psd((c.T @ c) * (b.T @ b) + _JITTER * eye)
        b = x2 @ khatri_rao(c, a) @ pinv_psd((c.T @ c) * (a.T @ a) + _JITTER * eye)
        c = x3 @ khatri_rao(b, a) @ pinv_psd((b.T @ b) * (a.T @ a) + _JITTER * eye)
        if not (np.isfinite(a).all() and np.isfinite(b).all() and np.isfinite(c).all()):
            raise CpDivergence(f"non-finite factors at sweep {sweep}")
        trace.append(_fit(x1, a, b, c, norm_x))
        if len(trace) >= 2 and abs(trace[-1] - trace[-2]) <= fit_tol:
            break
    return a, b, c, trace


def _canonicalize(a, b, c):
    """Unit-norm ``b``/``c`` columns, largest-|entry| positive, scale in ``a``."""
    a, b, c = a.copy(), b.copy(), c.copy()
    for f in (b, c):
        norms = np.linalg.norm(f, axis=0)
        norms = np.where(norms == 0, 1.0, norms)
        f /= norms
        a *= norms
        signs = np.sign(f[np.abs(f).argmax(axis=0), np.arange(f.shape[1])])
        signs = np.where(signs == 0, 1.0, signs)
        f *= signs
        a *= signs
    return a, b, c


def cp_als(tensor: np.ndarray, rank: int, *, max_sweeps: int = 100,
           fit_tol: float = 1e-6, seed: int = 0, restarts: int = 3) -> CpModel:
    """Rank-``R`` CP fit by alternating least squares with seeded restarts.

    Each restart draws fresh uniform factors from ``default_rng(seed + r)``;
    the restart with the best final fit wins.  Normal equations carry a tiny
    diagonal jitter so rank-deficient Gram matrices stay solvable.
    """
    tensor = np.asarray(tensor, dtype=np.float64)
    if tensor.ndim != 3:
        raise ValueError(f"expected a 3-way tensor, got shape {tensor.shape}")
    if not 1 <= rank <= min(tensor.shape[0] * tensor.shape[1],
                            tensor.shape[1] * tensor.shape[2],
                            tensor.shape[0] * tensor.shape[2]):
        raise ValueError(f"rank {rank} out of range for shape {tensor.shape}")
    if np.linalg.norm(tensor) == 0:
        raise ValueError("zero tensor")

    best = None
    for r in range(restarts):
        rng = np.random.default_rng(seed + r)
        a, b, c, trace = _als_single(tensor, rank, rng, max_sweeps, fit_tol)
        if best is None or trace[-1] > best[3][-1]:
            best = (a, b, c, trace)
    a, b, c = _canonicalize(*best[:3])
    return CpModel(a=a, b=b, c=c, fit_trace=tuple(best[3]))


def project_test(tensor: np.ndarray, model: CpModel) -> np.ndarray:
    """Least-squares rows for held-out images on the frozen ``B``/``C`` basis.

    Solves ``min_A ||unfold1(X) - A F^T||`` with ``F = khatri_rao(C, B)``
    via the normal equations and a spectral pseudo-inverse.
    """
    tensor = np.asarray(tensor, dtype=np.float64)
    if tensor.ndim != 3:
        raise ValueError(f"expected a 3-way tensor, got shape {tensor.shape}")
    if tensor.shape[1] != model.b.shape[0] or tensor.shape[2] != model.c.shape[0]:
        raise ValueError(
            f"tensor slabs {tensor.shape[1:]} do not match basis "
            f"({model.b.shape[0]}, {model.c.shape[0]})"
        )
    f = khatri_rao(model.c, model.b)
    return unfold1(tensor) @ f @ pinv_psd(f.T @ f)


# ---------------------------------------------------------------------------
# Reporting and persistence
# ---------------------------------------------------------------------------

def rank_clusters_report(a: np.ndarray, labels: np.ndarray, top_k: int = 5) -> dict:
    """Rank latent components by separation of the two label groups.

    Columns are z-scored; a component's importance is the absolute gap
    between class means.  Constant columns are skipped and listed under
    ``"constant_components"``.
    """
    a = np.asarray(a, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size != 2:
        raise ValueError(f"expected two classes, got {classes.size}")
    mean = a.mean(axis=0)
    sd = a.std(axis=0)
    constant = np.nonzero(sd == 0)[0]
    live = np.nonzero(sd > 0)[0]
    z = (a[:, live] - mean[live]) / sd[live]
    gap = np.abs(z[labels == classes[0]].mean(axis=0) - z[labels == classes[1]].mean(axis=0))
    order = np.argsort(-gap, kind="stable")
    top = [
        {"component": int(live[i]), "importance": float(gap[i])}
        for i in order[:top_k]
    ]
    return {"top_components": top, "constant_components": [int(i) for i in constant]}


def save_model(model: CpModel, path) -> None:
    np.savez(path, a=model.a, b=model.b, c=model.c,
             fit_trace=np.array(model.fit_trace))


def load_model(path) -> CpModel:
    with np.load(path) as data:
        return CpModel(a=data["a"], b=data["b"], c=data["c"],
                       fit_trace=tuple(data["fit_trace"].tolist()))
