"""
Feature standardization and dimensionality reduction: identity, LASSO
selection (squared loss, coordinate descent) and PCA extraction.

Every transform is fitted on training rows only and records the fold it
was fitted for, so the cross-validation runner can audit it.
"""
import logging
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Union

import numpy as np
from scipy import linalg

from errors import ConfigError, EmptyInputError, PrognosisError

logger = logging.getLogger(__name__)

REDUCTIONS = ("identity", "lasso", "pca")

LASSO_TOL = 1e-7
LASSO_MAX_SWEEPS = 10_000
LASSO_GRID_SIZE = 20
LASSO_GRID_RATIO = (0.9, 1e-3)  # grid spans [1e-3, 0.9] * lambda_max
LASSO_INNER_FOLDS = 3


def _as_matrix(X, what: str = "rows") -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise PrognosisError(f"Expected a 2D array of {what}, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise PrognosisError(f"Non-finite values in {what}")
    return X


# ---------------------------------------------------------------------------
# Standardization
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Standardizer:
    means: np.ndarray
    stds: np.ndarray
    flagged: np.ndarray  # zero-variance columns, emitted as 0

    def to_dict(self) -> dict:
        return {"means": self.means.tolist(), "stds": self.stds.tolist(), "flagged": self.flagged.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "Standardizer":
        return cls(np.asarray(doc["means"], dtype=np.float64),
                   np.asarray(doc["stds"], dtype=np.float64),
                   np.asarray(doc["flagged"], dtype=bool))


def standardize_fit(X) -> Standardizer:
    """Per-column mean and population std; zero-variance columns get std 1 and are flagged."""
    X = _as_matrix(X)
    if X.shape[0] < 2:
        raise EmptyInputError(f"Standardization needs at least 2 rows, got {X.shape[0]}")
    means = X.mean(axis=0)
    stds = X.std(axis=0)
    flagged = stds < 1e-12 * (1.0 + np.abs(means))
    stds = np.where(flagged, 1.0, stds)
    if flagged.any():
        logger.debug("Standardizer: %d zero-variance columns flagged", int(flagged.sum()))
    return Standardizer(means, stds, flagged)


def standardize_apply(std: Standardizer, X) -> np.ndarray:
    X = _as_matrix(X)
    if X.shape[1] != std.means.shape[0]:
        raise PrognosisError(f"Standardizer fitted on {std.means.shape[0]} columns, got {X.shape[1]}")
    Z = (X - std.means) / std.stds
    Z[:, std.flagged] = 0.0
    return Z


# ---------------------------------------------------------------------------
# Transform container
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ReductionTransform:
    kind: str
    n_features: int
    standardizer: Optional[Standardizer] = None
    # lasso
    coef: Optional[np.ndarray] = None
    selected: Optional[np.ndarray] = None
    lam: Optional[float] = None
    # pca
    center: Optional[np.ndarray] = None
    components: Optional[np.ndarray] = None  # (n_features, k), orthonormal columns
    explained: Optional[np.ndarray] = None
    fold_id: Optional[int] = None

    @property
    def n_outputs(self) -> int:
        if self.kind == "lasso":
            return int(len(self.selected))
        if self.kind == "pca":
            return int(self.components.shape[1])
        return self.n_features

    def to_dict(self) -> dict:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()
        return {
            "kind": self.kind,
            "n_features": self.n_features,
            "standardizer": None if self.standardizer is None else self.standardizer.to_dict(),
            "coef": arr(self.coef),
            "selected": arr(self.selected),
            "lam": self.lam,
            "center": arr(self.center),
            "components": arr(self.components),
            "explained": arr(self.explained),
            "fold_id": self.fold_id,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ReductionTransform":
        def arr(key, dtype=np.float64):
            return None if doc.get(key) is None else np.asarray(doc[key], dtype=dtype)
        std = doc.get("standardizer")
        components = arr("components")
        if components is not None:
            components = components.reshape(doc["n_features"], -1)
        return cls(
            kind=doc["kind"],
            n_features=int(doc["n_features"]),
            standardizer=None if std is None else Standardizer.from_dict(std),
            coef=arr("coef"),
            selected=arr("selected", np.int64),
            lam=doc.get("lam"),
            center=arr("center"),
            components=components,
            explained=arr("explained"),
            fold_id=doc.get("fold_id"),
        )


# ---------------------------------------------------------------------------
# LASSO
# ---------------------------------------------------------------------------

def soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def lambda_max(X, y) -> float:
    """Smallest lambda at which every coefficient is zero."""
    X = np.asarray(X, dtype=np.float64)
    return float(np.max(np.abs(X.T @ np.asarray(y, dtype=np.float64)))) / X.shape[0] if X.size else 0.0


def _coordinate_descent(X: np.ndarray, y: np.ndarray, lam: float, beta: np.ndarray,
                        tol: float = LASSO_TOL, max_sweeps: int = LASSO_MAX_SWEEPS) -> np.ndarray:
    """
    min (1/2n)||y - X b||^2 + lam ||b||_1 by cyclic coordinate updates,
    warm-started from beta. Full sweeps alternate with sweeps over the
    current nonzero set; convergence is only declared after a full sweep.
    """
    n, p = X.shape
    cols = [np.ascontiguousarray(X[:, j]) for j in range(p)]
    col_sq = np.array([c @ c for c in cols]) / n
    everything = [j for j in range(p) if col_sq[j] > 0.0]
    beta = beta.copy()
    r = y - X @ beta

    def sweep(indices) -> float:
        nonlocal r
        max_delta = 0.0
        for j in indices:
            old = beta[j]
            rho = cols[j] @ r / n + col_sq[j] * old
            if rho > lam:
                new = (rho - lam) / col_sq[j]
            elif rho < -lam:
                new = (rho + lam) / col_sq[j]
            else:
                new = 0.0
            if new != old:
                r -= cols[j] * (new - old)
                beta[j] = new
                max_delta = max(max_delta, abs(new - old))
        return max_delta

    sweeps = 0
    while sweeps < max_sweeps:
        sweeps += 1
        if sweep(everything) < tol:
            return beta
        active = [j for j in everything if beta[j] != 0.0]
        while sweeps < max_sweeps:
            sweeps += 1
            if sweep(active) < tol:
                break
    logger.warning("LASSO coordinate descent hit %d sweeps (lambda=%.3g) without converging", max_sweeps, lam)
    return beta


def lasso_path(X, y, lambdas: Sequence[float]) -> np.ndarray:
    """Coefficients for each lambda (in the given order) with warm starts."""
    X = _as_matrix(X)
    y = np.asarray(y, dtype=np.float64)
    beta = np.zeros(X.shape[1])
    out = []
    for lam in lambdas:
        beta = _coordinate_descent(X, y, float(lam), beta)
        out.append(beta)
    return np.array(out)


def lasso_grid(X, y) -> np.ndarray:
    lmax = lambda_max(X, y)
    hi, lo = LASSO_GRID_RATIO
    return np.geomspace(hi * lmax, lo * lmax, LASSO_GRID_SIZE) if lmax > 0 else np.zeros(1)


def inner_folds(y, k: int = LASSO_INNER_FOLDS) -> np.ndarray:
    """Stratified interleaved assignment: the r-th row of each class goes to fold r mod k."""
    y = np.asarray(y)
    fold = np.empty(len(y), dtype=np.int64)
    for cls in np.unique(y):
        idx = np.flatnonzero(y == cls)
        fold[idx] = np.arange(len(idx)) % k
    return fold


def select_lambda(X, y) -> float:
    """Inner k-fold CV over the lambda grid; ties go to the larger lambda."""
    X = _as_matrix(X)
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] < LASSO_INNER_FOLDS:
        raise EmptyInputError(f"lambda=auto needs at least {LASSO_INNER_FOLDS} rows, got {X.shape[0]}")
    grid = lasso_grid(X, y)
    fold = inner_folds(y)
    errors = np.zeros(len(grid))
    for f in range(LASSO_INNER_FOLDS):
        test = fold == f
        if not test.any() or test.all():
            continue
        # center on the split's training rows
        x_mean, y_mean = X[~test].mean(axis=0), y[~test].mean()
        path = lasso_path(X[~test] - x_mean, y[~test] - y_mean, grid)
        resid = (y[test] - y_mean)[None, :] - path @ (X[test] - x_mean).T
        errors += (resid ** 2).mean(axis=1)
    best = 0
    for k in range(1, len(grid)):
        if errors[k] < errors[best]:
            best = k
    logger.debug("LASSO inner CV picked lambda=%.4g (index %d of %d)", grid[best], best, len(grid))
    return float(grid[best])


def lasso_fit(X, y, lam: Union[float, str] = "auto", fold_id: Optional[int] = None) -> ReductionTransform:
    """
    LASSO on standardized rows with the 0/1 label as regression target.
    The selected set is the support of beta; an empty support falls back
    to the single column with the largest |x_j^T y|.
    """
    X = _as_matrix(X)
    y = np.asarray(y, dtype=np.float64)
    if len(y) != X.shape[0]:
        raise PrognosisError(f"LASSO: {X.shape[0]} rows but {len(y)} labels")
    if not np.all(np.isfinite(y)):
        raise PrognosisError("Non-finite values in labels")
    if lam == "auto":
        lam = select_lambda(X, y)
        # refit along the grid down to the chosen lambda for a warm start
        grid = lasso_grid(X, y)
        beta = lasso_path(X, y, [g for g in grid if g >= lam])[-1]
    else:
        lam = float(lam)
        if lam < 0:
            raise ConfigError(f"LASSO lambda must be nonnegative, got {lam}")
        beta = _coordinate_descent(X, y, lam, np.zeros(X.shape[1]))

    selected = np.flatnonzero(beta)
    if selected.size == 0:
        selected = np.array([int(np.argmax(np.abs(X.T @ y)))])
        logger.info("LASSO selected no features at lambda=%.4g; keeping column %d", lam, selected[0])
    return ReductionTransform(kind="lasso", n_features=X.shape[1], coef=beta, selected=selected,
                              lam=float(lam), fold_id=fold_id)


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------

def _orient(components: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive."""
    idx = np.argmax(np.abs(components), axis=0)
    signs = np.sign(components[idx, np.arange(components.shape[1])])
    signs[signs == 0] = 1.0
    return components * signs


def pca_fit(X, n_components: Optional[int] = None, variance_fraction: Optional[float] = None,
            fold_id: Optional[int] = None) -> ReductionTransform:
    """
    Top principal directions of the centered rows. Uses the p x p
    covariance when features <= rows, else the n x n gram matrix (dual)
    and maps its eigenvectors back through X^T.
    """
    X = _as_matrix(X)
    n, p = X.shape
    if n < 2:
        raise EmptyInputError(f"PCA needs at least 2 rows, got {n}")
    center = X.mean(axis=0)
    Xc = X - center
    limit = min(n - 1, p)

    if p <= n:
        evals, evecs = linalg.eigh(Xc.T @ Xc / n)
        evals, evecs = evals[::-1], evecs[:, ::-1]
    else:
        gvals, gvecs = linalg.eigh(Xc @ Xc.T / n)
        evals, gvecs = gvals[::-1], gvecs[:, ::-1]
        evecs = None
    evals = np.clip(evals, 0.0, None)
    total = float(evals.sum())
    fractions = evals / total if total > 0 else np.zeros_like(evals)

    if variance_fraction is not None:
        if not 0 < variance_fraction <= 1:
            raise ConfigError(f"variance_fraction must be in (0, 1], got {variance_fraction}")
        k = int(np.searchsorted(np.cumsum(fractions), variance_fraction - 1e-12) + 1)
        k = min(k, limit)
    else:
        k = limit if n_components is None else int(n_components)
    if not 1 <= k <= limit:
        raise ConfigError(f"PCA component count must be in [1, {limit}], got {k}")

    if evecs is None:
        if evals[k - 1] <= 1e-12 * max(evals[0], 1e-300):
            raise ConfigError(f"PCA: requested {k} components but the data has rank below that")
        components = Xc.T @ gvecs[:, :k] / np.sqrt(n * evals[:k])
    else:
        components = evecs[:, :k]
    # re-orthonormalize, keeping each column's direction
    q, r = np.linalg.qr(components)
    components = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    components = _orient(components)

    return ReductionTransform(kind="pca", n_features=p, center=center, components=components,
                              explained=fractions[:k].copy(), fold_id=fold_id)


# ---------------------------------------------------------------------------
# Fit / apply
# ---------------------------------------------------------------------------

def identity_fit(n_features: int, fold_id: Optional[int] = None) -> ReductionTransform:
    return ReductionTransform(kind="identity", n_features=n_features, fold_id=fold_id)


def fit_reduction(kind: str, X, y, standardize: bool = True, lam: Union[float, str] = "auto",
                  n_components: Optional[int] = None, variance_fraction: Optional[float] = None,
                  fold_id: Optional[int] = None) -> ReductionTransform:
    """Standardize (optionally) and fit the requested reduction on training rows."""
    if kind not in REDUCTIONS:
        raise ConfigError(f"Unknown reduction '{kind}', expected one of {REDUCTIONS}")
    X = _as_matrix(X)
    std = standardize_fit(X) if standardize or kind != "identity" else None
    Z = standardize_apply(std, X) if std is not None else X
    if kind == "identity":
        transform = identity_fit(X.shape[1], fold_id)
    elif kind == "lasso":
        transform = lasso_fit(Z, y, lam, fold_id)
    else:
        transform = pca_fit(Z, n_components, variance_fraction, fold_id)
    logger.debug("Fitted %s reduction: %d -> %d features (fold %s)",
                 kind, X.shape[1], transform.n_outputs, fold_id)
    return replace(transform, standardizer=std)


def reduce_apply(transform: ReductionTransform, rows) -> np.ndarray:
    rows = _as_matrix(rows)
    if rows.shape[1] != transform.n_features:
        raise PrognosisError(f"Reduction expects {transform.n_features} features, got {rows.shape[1]}")
    if transform.standardizer is not None:
        rows = standardize_apply(transform.standardizer, rows)
    if transform.kind == "identity":
        return rows
    if transform.kind == "lasso":
        return rows[:, transform.selected]
    return (rows - transform.center) @ transform.components
