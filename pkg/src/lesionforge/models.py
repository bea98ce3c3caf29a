"""Binary classifiers and evaluation: elastic-net logistic regression,
an SMO-trained SVM, rank-based AUC, and repeated stratified cross-validation.

Labels are 0/1 throughout the public interface; both solvers use {-1, +1}
internally.  All fitting is deterministic given the seed arguments.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "LogisticModel",
    "SvmModel",
    "FoldResult",
    "CvReport",
    "fit_elasticnet_logistic",
    "fit_svm",
    "standardize_fit",
    "standardize_apply",
    "auc_score",
    "sensitivity_specificity",
    "stratified_folds",
    "cross_validate",
]


# ---------------------------------------------------------------------------
# Elastic-net logistic regression (proximal gradient)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LogisticModel:
    weights: np.ndarray
    intercept: float
    alpha: float          # l1/l2 mix in [0, 1]; 1 = lasso, 0 = ridge
    lam: float            # overall penalty strength

    def decision_function(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.weights + self.intercept

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.decision_function(x)))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return (self.decision_function(x) >= 0.0).astype(int)


def _soft_threshold(v: np.ndarray, thr: float) -> np.ndarray:
    return np.sign(v) * np.maximum(np.abs(v) - thr, 0.0)


def _logistic_prox_solve(x, y_pm, alpha, lam, max_iters, tol):
    """Minimize mean logistic loss + lam*(alpha*|w|_1 + (1-alpha)/2*|w|^2).

    Proximal gradient with a fixed step from the smooth-part Lipschitz
    constant; the intercept is never penalized.  Stops when the optimality
    residual (projected subgradient sup-norm) falls below ``tol``.
    """
    n, p = x.shape
    w = np.zeros(p)
    b = 0.0
    # smooth part: logistic curvature <= 1/4 plus the ridge term
    lip = np.linalg.norm(x, 2) ** 2 / (4.0 * n) + lam * (1.0 - alpha) + 0.25
    step = 1.0 / lip
    for _ in range(max_iters):
        z = x @ w + b
        s = 1.0 / (1.0 + np.exp(y_pm * z))       # sigma(-y z)
        gw = -(x.T @ (y_pm * s)) / n + lam * (1.0 - alpha) * w
        gb = -np.mean(y_pm * s)
        w_new = _soft_threshold(w - step * gw, step * lam * alpha)
        b_new = b - step * gb
        resid = max(
            np.abs((w - w_new) / step).max() if p else 0.0, abs(gb)
        )
        w, b = w_new, b_new
        if resid <= tol:
            break
    return w, b


def _log_loss(x, y_pm, w, b):
    z = y_pm * (x @ w + b)
    return float(np.mean(np.logaddexp(0.0, -z)))


def fit_elasticnet_logistic(x: np.ndarray, y: np.ndarray, *, alpha: float = 0.5,
                            lam: float | None = None, n_lambdas: int = 20,
                            val_fraction: float = 0.25, seed: int = 0,
                            max_iters: int = 5000, tol: float = 1e-7
                            ) -> LogisticModel:
    """Fit the model; if ``lam`` is None, pick it on an inner holdout split.

    The grid is ``n_lambdas`` log-spaced values from the smallest strength
    that zeroes every weight down by four decades.  The inner split is
    stratified 75/25 (``val_fraction``) and seeded.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y).astype(int)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ValueError(f"bad shapes x {x.shape}, y {y.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if np.unique(y).tolist() != [0, 1]:
        raise ValueError("labels must contain both 0 and 1")
    y_pm = 2.0 * y - 1.0

    if lam is None:
        # lam_max: above it the l1 prox kills every coordinate at w = 0
        p_bar = y.mean()
        grad0 = np.abs(x.T @ (y_pm / (1.0 + np.exp(y_pm * np.log(p_bar / (1 - p_bar)))))) / len(y)
        lam_max = grad0.max() / max(alpha, 0.05)
        grid = np.logspace(np.log10(lam_max), np.log10(lam_max) - 4, n_lambdas)
        tr, va = _inner_split(y, val_fraction, seed)
        best = (np.inf, grid[-1])
        for cand in grid:
            w, b = _logistic_prox_solve(x[tr], y_pm[tr], alpha, cand, max_iters, tol)
            loss = _log_loss(x[va], y_pm[va], w, b)
            if loss < best[0]:
                best = (loss, cand)
        lam = float(best[1])

    w, b = _logistic_prox_solve(x, y_pm, alpha, lam, max_iters, tol)
    return LogisticModel(weights=w, intercept=float(b), alpha=alpha, lam=lam)


def _inner_split(y, val_fraction, seed):
    rng = np.random.default_rng(seed)
    va = []
    for cls in np.unique(y):
        idx = np.nonzero(y == cls)[0]
        idx = idx[rng.permutation(len(idx))]
        n_val = max(1, int(round(val_fraction * len(idx))))
        va.extend(idx[:n_val])
    va = np.sort(np.array(va))
    tr = np.setdiff1d(np.arange(len(y)), va)
    return tr, va


# ---------------------------------------------------------------------------
# SVM (SMO)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SvmModel:
    support_x: np.ndarray
    support_coef: np.ndarray     # alpha_i * y_i for every training point
    intercept: float
    kernel: str
    gamma: float
    cost: float

    def _kernel(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return _kernel_matrix(a, b, self.kernel, self.gamma)

    def decision_function(self, x: np.ndarray) -> np.ndarray:
        k = self._kernel(np.asarray(x, dtype=np.float64), self.support_x)
        return k @ self.support_coef + self.intercept

    def predict(self, x: np.ndarray) -> np.ndarray:
        return (self.decision_function(x) >= 0.0).astype(int)


def _kernel_matrix(a, b, kernel, gamma):
    if kernel == "linear":
        return a @ b.T
    if kernel == "rbf":
        d2 = (np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :]
              - 2.0 * (a @ b.T))
        return np.exp(-gamma * np.maximum(d2, 0.0))
    raise ValueError(f"unknown kernel {kernel!r}")


def fit_svm(x: np.ndarray, y: np.ndarray, *, kernel: str = "rbf",
            cost: float = 1.0, gamma: float = 1.0, tol: float = 1e-3,
            max_passes: int = 20, max_iters: int = 10000, seed: int = 0
            ) -> SvmModel:
    """Soft-margin SVM trained by sequential minimal optimization.

    Pairs are optimized until a full pass changes nothing; a point violates
    the KKT conditions when its margin error exceeds ``tol`` on the wrong
    side of its box constraint.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y).astype(int)
    if np.unique(y).tolist() != [0, 1]:
        raise ValueError("labels must contain both 0 and 1")
    y_pm = 2.0 * y - 1.0
    n = len(y)
    k = _kernel_matrix(x, x, kernel, gamma)
    alphas = np.zeros(n)
    b = 0.0
    rng = np.random.default_rng(seed)

    def decision(i):
        return np.dot(alphas * y_pm, k[:, i]) + b

    passes = 0
    iters = 0
    while passes < max_passes and iters < max_iters:
        changed = 0
        for i in range(n):
            iters += 1
            e_i = decision(i) - y_pm[i]
            if not ((y_pm[i] * e_i < -tol and alphas[i] < cost)
                    or (y_pm[i] * e_i > tol and alphas[i] > 0)):
                continue
            j = int(rng.integers(n - 1))
            if j >= i:
                j += 1
            e_j = decision(j) - y_pm[j]
            a_i_old, a_j_old = alphas[i], alphas[j]
            if y_pm[i] != y_pm[j]:
                lo = max(0.0, a_j_old - a_i_old)
                hi = min(cost, cost + a_j_old - a_i_old)
            else:
                lo = max(0.0, a_i_old + a_j_old - cost)
                hi = min(cost, a_i_old + a_j_old)
            if lo >= hi:
                continue
            eta = 2.0 * k[i, j] - k[i, i] - k[j, j]
            if eta >= 0:
                continue
            a_j = np.clip(a_j_old - y_pm[j] * (e_i - e_j) / eta, lo, hi)
            if abs(a_j - a_j_old) < 1e-7:
                continue
            a_i = a_i_old + y_pm[i] * y_pm[j] * (a_j_old - a_j)
            alphas[i], alphas[j] = a_i, a_j
            b1 = (b - e_i - y_pm[i] * (a_i - a_i_old) * k[i, i]
                  - y_pm[j] * (a_j - a_j_old) * k[i, j])
            b2 = (b - e_j - y_pm[i] * (a_i - a_i_old) * k[i, j]
                  - y_pm[j] * (a_j - a_j_old) * k[j, j])
            if 0 < a_i < cost:
                b = b1
            elif 0 < a_j < cost:
                b = b2
            else:
                b = (b1 + b2) / 2.0
            changed += 1
        passes = passes + 1 if changed == 0 else 0
    return SvmModel(support_x=x, support_coef=alphas * y_pm, intercept=float(b),
                    kernel=kernel, gamma=gamma, cost=cost)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def auc_score(y: np.ndarray, scores: np.ndarray) -> float:
    """Rank-sum AUC; ties between scores contribute half via midranks."""
    y = np.asarray(y).astype(int)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    rank = 1
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (rank + rank + (j - i)) / 2.0
        rank += j - i + 1
        i = j + 1
    return (ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def sensitivity_specificity(y: np.ndarray, pred: np.ndarray) -> tuple[float, float]:
    y = np.asarray(y).astype(int)
    pred = np.asarray(pred).astype(int)
    pos = y == 1
    neg = ~pos
    sens = float(np.mean(pred[pos] == 1)) if pos.any() else float("nan")
    spec = float(np.mean(pred[neg] == 0)) if neg.any() else float("nan")
    return sens, spec


def standardize_fit(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=0)
    sd = x.std(axis=0)
    sd = np.where(sd == 0, 1.0, sd)
    return mean, sd


def standardize_apply(x: np.ndarray, mean: np.ndarray, sd: np.ndarray) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) - mean) / sd


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldResult:
    repeat: int
    fold: int
    auc: float
    accuracy: float
    sensitivity: float
    specificity: float
    test_indices: tuple[int, ...]


@dataclass(frozen=True)
class CvReport:
    folds: tuple[FoldResult, ...]
    mean_auc: float = field(init=False)
    mean_accuracy: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "mean_auc", float(np.mean([f.auc for f in self.folds])))
        object.__setattr__(
            self, "mean_accuracy", float(np.mean([f.accuracy for f in self.folds]))
        )


def stratified_folds(y: np.ndarray, n_splits: int, rng: np.random.Generator):
    """Deal each class round-robin into shuffled folds; yields index arrays."""
    y = np.asarray(y).astype(int)
    folds = [[] for _ in range(n_splits)]
    for cls in np.unique(y):
        idx = np.nonzero(y == cls)[0]
        idx = idx[rng.permutation(len(idx))]
        for pos, i in enumerate(idx):
            folds[pos % n_splits].append(int(i))
    return [np.sort(np.array(f, dtype=int)) for f in folds]


def cross_validate(y: np.ndarray,
                   feature_builder: Callable[[np.ndarray, np.ndarray],
                                             tuple[np.ndarray, np.ndarray]],
                   fit: Callable[[np.ndarray, np.ndarray], object],
                   *, n_splits: int = 5, n_repeats: int = 10, seed: int = 0
                   ) -> CvReport:
    """Repeated stratified k-fold evaluation with per-fold feature fitting.

    ``feature_builder(train_idx, test_idx)`` returns the train and test
    design matrices; anything fitted to data (standardization, latent bases)
    must happen inside it so the held-out fold never leaks into fitting.
    ``fit(x_train, y_train)`` returns a model with ``decision_function`` and
    ``predict``.  Fold assignment is seeded per repeat.
    """
    y = np.asarray(y).astype(int)
    results = []
    for rep in range(n_repeats):
        rng = np.random.default_rng(seed * 1000 + rep)
        folds = stratified_folds(y, n_splits, rng)
        for fold_i, test_idx in enumerate(folds):
            train_idx = np.setdiff1d(np.arange(len(y)), test_idx)
            x_tr, x_te = feature_builder(train_idx, test_idx)
            model = fit(x_tr, y[train_idx])
            scores = model.decision_function(x_te)
            pred = model.predict(x_te)
            sens, spec = sensitivity_specificity(y[test_idx], pred)
            results.append(FoldResult(
                repeat=rep, fold=fold_i,
                auc=auc_score(y[test_idx], scores),
                accuracy=float(np.mean(pred == y[test_idx])),
                sensitivity=sens, specificity=spec,
                test_indices=tuple(int(i) for i in test_idx),
            ))
    return CvReport(folds=tuple(results))
