"""Closed-form ridge regression with temporal-block cross-validation.

The single trained mapping in the pipeline: spike responses to latent or
semantic-feature targets. Inputs are standardized per column, targets
centered, and the penalty scales with the sample count so one lambda grid
works across dataset sizes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import io as srio
from .errors import ShapeError, SingularSystemError, ValidationError


@dataclass
class RidgeModel:
    weights: np.ndarray      # U×D
    intercept: np.ndarray    # D
    x_mean: np.ndarray       # U
    x_std: np.ndarray        # U, entries > 0
    lam: float
    constant_columns: np.ndarray  # bool mask of columns with zero variance

    def __post_init__(self):
        if np.any(self.x_std <= 0):
            raise ValidationError("x_std entries must be > 0")


@dataclass
class CvReport:
    lambda_grid: list[float]
    fold_mse: np.ndarray     # folds × lambdas
    selected_lambda: float


def _standardize_stats(X: np.ndarray):
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    constant = std == 0
    std = np.where(constant, 1.0, std)
    return mean, std, constant


def ridge_fit(X: np.ndarray, Y: np.ndarray, lam: float) -> RidgeModel:
    """Solve (Xs'Xs + lam*N*I) W = Xs'Yc on standardized X and centered Y."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ShapeError("X and Y must be 2-D with matching row counts")
    N = X.shape[0]
    if N < 2:
        raise ValidationError("need at least 2 samples")
    if lam < 0:
        raise ValidationError("lambda must be >= 0")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise ValidationError("X and Y must be finite")
    mean, std, constant = _standardize_stats(X)
    Xs = (X - mean) / std
    y_mean = Y.mean(axis=0)
    Yc = Y - y_mean
    A = Xs.T @ Xs + lam * N * np.eye(X.shape[1])
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        raise SingularSystemError(
            "normal equations are singular; use a positive lambda") from None
    W = _cho_solve(L, Xs.T @ Yc)
    return RidgeModel(W, y_mean, mean, std, float(lam), constant)


def _cho_solve(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    # two triangular solves of the Cholesky factor; desk-scale systems,
    # so the generic dense solver is fine
    return np.linalg.solve(L.T, np.linalg.solve(L, B))


def ridge_predict(model: RidgeModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.weights.shape[0]:
        raise ShapeError(f"expected {model.weights.shape[0]} columns, got {X.shape}")
    Xs = (X - model.x_mean) / model.x_std
    return Xs @ model.weights + model.intercept


def temporal_folds(n: int, k: int):
    """Contiguous-block fold index ranges over n samples."""
    if k < 2:
        raise ValidationError("k must be >= 2")
    if n < k:
        raise ValidationError("need at least k samples")
    bounds = np.linspace(0, n, k + 1).astype(int)
    return [(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:])]


def ridge_cv(X: np.ndarray, Y: np.ndarray, lambda_grid, k: int = 5,
             seed: int = 0) -> tuple[CvReport, RidgeModel]:
    """Temporal-block CV over the lambda grid; refit on all data at the winner.

    Folds are contiguous frame blocks (adjacent movie frames are strongly
    correlated, so shuffled folds would leak). Ties in mean validation MSE
    break toward the larger lambda. The seed argument is accepted for
    interface uniformity; fold layout is deterministic regardless.
    """
    grid = [float(l) for l in lambda_grid]
    if not grid:
        raise ValidationError("lambda grid must be non-empty")
    if any(l < 0 for l in grid):
        raise ValidationError("lambda grid must be non-negative")
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    folds = temporal_folds(X.shape[0], k)
    fold_mse = np.empty((len(folds), len(grid)))
    for fi, (lo, hi) in enumerate(folds):
        mask = np.ones(X.shape[0], dtype=bool)
        mask[lo:hi] = False
        for li, lam in enumerate(grid):
            m = ridge_fit(X[mask], Y[mask], lam)
            pred = ridge_predict(m, X[lo:hi])
            fold_mse[fi, li] = float(np.mean((pred - Y[lo:hi]) ** 2))
    mean_mse = fold_mse.mean(axis=0)
    best = 0
    for i in range(1, len(grid)):
        if (mean_mse[i] < mean_mse[best]
                or (mean_mse[i] == mean_mse[best] and grid[i] > grid[best])):
            best = i
    report = CvReport(grid, fold_mse, grid[best])
    return report, ridge_fit(X, Y, grid[best])


def save_ridge(path, model: RidgeModel):
    srio.save_matrices(path, {
        "weights": model.weights,
        "intercept": model.intercept,
        "x_mean": model.x_mean,
        "x_std": model.x_std,
        "constant_columns": model.constant_columns.astype(np.float64),
    }, sidecar={"lambda": model.lam, "standardized": True, "kind": "ridge"})


def load_ridge(path) -> RidgeModel:
    arrays, meta = srio.load_matrices(path)
    return RidgeModel(arrays["weights"], arrays["intercept"], arrays["x_mean"],
                      arrays["x_std"], float(meta["lambda"]),
                      arrays["constant_columns"].astype(bool))
