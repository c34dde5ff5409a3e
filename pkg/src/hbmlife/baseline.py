"""Pooled ridge regression baseline."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_LAMBDA_GRID = tuple(np.logspace(-4, 2, 13).tolist())


class RidgeError(ValueError):
    pass


@dataclass(frozen=True)
class RidgeModel:
    coefficients: np.ndarray  # on standardized features
    intercept: float
    lam: float
    mean: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        if np.any(self.scale <= 0):
            raise RidgeError("standardization scales must be > 0")
        if self.coefficients.shape != self.mean.shape:
            raise RidgeError("coefficient count does not match feature count")

    @property
    def raw_coefficients(self) -> np.ndarray:
        """Coefficients on the original feature scale."""
        return self.coefficients / self.scale

    def predict(self, x) -> np.ndarray:
        z = (np.atleast_2d(np.asarray(x, dtype=float)) - self.mean) / self.scale
        return z @ self.coefficients + self.intercept


def fit_ridge(design, labels, lam: float) -> RidgeModel:
    """Minimise ``||y - X b - c||^2 + lam ||b||^2`` on standardized columns.

    The intercept is not penalised. Zero-variance columns keep scale 1.
    """
    x = np.asarray(design, dtype=float)
    y = np.asarray(labels, dtype=float).ravel()
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 1 or x.shape[0] != y.size:
        raise RidgeError(f"design has {x.shape[0]} rows but {y.size} labels")
    if lam < 0:
        raise RidgeError("lambda must be >= 0")
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    z = (x - mean) / scale
    yc = y - y.mean()
    p = z.shape[1]
    gram = z.T @ z + lam * np.eye(p)
    try:
        chol = np.linalg.cholesky(gram)
        if lam == 0 and np.linalg.cond(gram) > 1e12:
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        raise RidgeError(
            f"normal equations are singular at lambda={lam} (collinear or constant features); use lambda > 0"
        ) from None
    coef = np.linalg.solve(chol.T, np.linalg.solve(chol, z.T @ yc))
    # intercept absorbs the centring: c = mean(y) because z is column-centred
    return RidgeModel(coef, float(y.mean()), float(lam), mean, scale)


def kfold_indices(n: int, k: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffle ``range(n)`` and split into ``k`` near-equal folds."""
    return np.array_split(rng.permutation(n), k)


def select_lambda(
    design,
    labels,
    lambda_grid: Sequence[float] = DEFAULT_LAMBDA_GRID,
    inner_folds: int = 5,
    seed: int = 0,
) -> float:
    """Grid value with the lowest inner-CV RMSE; ties go to the smallest lambda."""
    x = np.asarray(design, dtype=float)
    y = np.asarray(labels, dtype=float).ravel()
    if x.ndim == 1:
        x = x[:, None]
    grid = sorted(float(v) for v in lambda_grid)
    if not grid:
        raise RidgeError("lambda grid is empty")
    if inner_folds < 2:
        raise RidgeError("inner_folds must be >= 2")
    if y.size < inner_folds:
        raise RidgeError(f"{y.size} samples cannot fill {inner_folds} folds")
    if len(grid) == 1:
        return grid[0]
    folds = kfold_indices(y.size, inner_folds, np.random.default_rng(seed))
    sse = np.zeros(len(grid))
    for test in folds:
        train = np.setdiff1d(np.arange(y.size), test)
        for i, lam in enumerate(grid):
            try:
                model = fit_ridge(x[train], y[train], lam)
            except RidgeError:
                sse[i] = np.inf
                continue
            sse[i] += np.sum((model.predict(x[test]) - y[test]) ** 2)
    rmse = np.sqrt(sse / y.size)
    return grid[int(np.argmin(rmse))]
