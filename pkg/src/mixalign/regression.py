"""Weighted Tikhonov-regularized linear regression for cascade stages.

A stage predicts a landmark update ``y = W @ phi + b``. Fitting minimizes

    sum_i w_i ||y_i - W phi_i - b||^2 + gamma (||W||_F^2 + ||b||^2)

with the bias penalized like every other coefficient. Because of that, the
bias can be folded into an augmented design ``[phi, 1]`` and the problem is
plain ridge regression on the sqrt-weighted rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import InvalidArg, LengthMismatch, SingularSystem

DEFAULT_GAMMA_GRID = tuple(10.0**k for k in range(-4, 5))


@dataclass(eq=False)
class RegressionStage:
    W: np.ndarray
    b: np.ndarray
    gamma: float = 0.0
    lam: float = 0.0

    def __post_init__(self):
        # one memory layout, so predictions do not depend on how W was produced or loaded
        self.W = np.ascontiguousarray(self.W, dtype=float)
        self.b = np.ascontiguousarray(self.b, dtype=float).reshape(-1)
        if self.W.ndim != 2 or self.W.shape[0] != self.b.size:
            raise LengthMismatch(f"W {self.W.shape} does not match b {self.b.shape}")
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.b))):
            raise InvalidArg("regression stage has non-finite coefficients")

    @property
    def n_features(self) -> int:
        return self.W.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.W.shape[0]

    @classmethod
    def zeros(cls, n_outputs: int, n_features: int) -> RegressionStage:
        return cls(np.zeros((n_outputs, n_features)), np.zeros(n_outputs))

    def predict(self, features) -> np.ndarray:
        return np.asarray(features, dtype=float) @ self.W.T + self.b


def _prepare(features, targets, weights):
    X = np.asarray(features, dtype=float)
    Y = np.asarray(targets, dtype=float)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise LengthMismatch(f"features {X.shape} and targets {Y.shape} disagree")
    w = np.ones(X.shape[0]) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    if w.size != X.shape[0]:
        raise LengthMismatch(f"{w.size} weights for {X.shape[0]} samples")
    if not (np.all(np.isfinite(w)) and np.all(w >= 0)):
        raise InvalidArg("weights must be finite and non-negative")
    return X, Y, w


def _augmented(X, w):
    """sqrt-weighted ``[X, 1]`` design restricted to rows with positive weight."""
    keep = w > 0
    sw = np.sqrt(w[keep])
    Z = np.empty((int(keep.sum()), X.shape[1] + 1))
    Z[:, :-1] = X[keep]
    Z[:, -1] = 1.0
    Z *= sw[:, None]
    return Z, keep, sw


def _solve_ridge(Z, Yw, gamma):
    n, f = Z.shape
    if gamma == 0:
        beta, _, rank, _ = np.linalg.lstsq(Z, Yw, rcond=None)
        if rank < f:
            raise SingularSystem(f"unregularized design is rank deficient (rank {rank} < {f})")
        return beta
    if n >= f:
        gram = Z.T @ Z
        gram[np.diag_indices_from(gram)] += gamma
        return scipy.linalg.cho_solve(scipy.linalg.cho_factor(gram, check_finite=False), Z.T @ Yw)
    # push-through identity: (Z'Z + g I)^-1 Z' = Z' (Z Z' + g I)^-1
    kernel = Z @ Z.T
    kernel[np.diag_indices_from(kernel)] += gamma
    return Z.T @ scipy.linalg.cho_solve(scipy.linalg.cho_factor(kernel, check_finite=False), Yw)


def fit_ridge(features, targets, weights=None, gamma: float = 1.0, lam: float = 0.0) -> RegressionStage:
    """Fit one regression stage.

    Parameters
    ----------
    features : (n, F) array
    targets : (n, T) array
    weights : (n,) non-negative array, optional
        Per-sample loss weights; rows with weight 0 are dropped.
    gamma : float
        Tikhonov weight on ``W`` and ``b``. ``gamma=0`` uses an orthogonal
        least-squares solve and raises ``SingularSystem`` for rank-deficient
        designs.
    lam : float
        Constraint-feature weight, stored on the stage for provenance only.
    """
    X, Y, w = _prepare(features, targets, weights)
    if not gamma >= 0:
        raise InvalidArg("gamma must be non-negative")
    Z, keep, sw = _augmented(X, w)
    if Z.shape[0] == 0:
        raise InvalidArg("fit_ridge needs at least one sample with positive weight")
    beta = _solve_ridge(Z, Y[keep] * sw[:, None], float(gamma))
    return RegressionStage(beta[:-1].T, beta[-1], gamma=float(gamma), lam=float(lam))


def ridge_objective(stage: RegressionStage, features, targets, weights=None) -> float:
    X, Y, w = _prepare(features, targets, weights)
    r = Y - stage.predict(X)
    return float(np.sum(w * np.sum(r * r, axis=1)) + stage.gamma * (np.sum(stage.W**2) + np.sum(stage.b**2)))


def ridge_gradient(stage: RegressionStage, features, targets, weights=None):
    """Gradient of :func:`ridge_objective` with respect to ``(W, b)``."""
    X, Y, w = _prepare(features, targets, weights)
    r = Y - stage.predict(X)
    wr = r * w[:, None]
    gW = -2.0 * wr.T @ X + 2.0 * stage.gamma * stage.W
    gb = -2.0 * wr.sum(axis=0) + 2.0 * stage.gamma * stage.b
    return gW, gb


def two_fold_split(n: int, seed=0, groups=None):
    """Random halves of ``range(n)``; with ``groups``, samples sharing a label stay together."""
    rng = np.random.default_rng(seed)
    if groups is None:
        perm = rng.permutation(n)
        half = n // 2
        return np.sort(perm[:half]), np.sort(perm[half:])
    groups = np.asarray(groups).reshape(-1)
    if groups.size != n:
        raise LengthMismatch(f"{groups.size} group labels for {n} samples")
    labels, inverse = np.unique(groups, return_inverse=True)
    if labels.size < 2:
        raise InvalidArg("grouped cross validation needs at least 2 groups")
    perm = rng.permutation(labels.size)
    first = np.zeros(labels.size, dtype=bool)
    first[perm[: labels.size // 2]] = True
    in_first = first[inverse]
    return np.flatnonzero(in_first), np.flatnonzero(~in_first)


def weighted_error(pred, targets, weights) -> tuple[float, float]:
    """``(sum_i w_i ||pred_i - y_i||^2, sum_i w_i)``."""
    r = np.asarray(pred) - np.asarray(targets)
    return float(np.sum(weights * np.sum(r * r, axis=1))), float(np.sum(weights))


class _FoldPath:
    """Held-out predictions of one fold for any gamma, from one eigendecomposition."""

    def __init__(self, X_tr, Y_tr, w_tr, X_ho):
        Z, keep, sw = _augmented(X_tr, w_tr)
        Yw = Y_tr[keep] * sw[:, None]
        Zh = np.empty((X_ho.shape[0], X_ho.shape[1] + 1))
        Zh[:, :-1] = X_ho
        Zh[:, -1] = 1.0
        n, f = Z.shape
        if n >= f:
            evals, V = np.linalg.eigh(Z.T @ Z)
            self.left = Zh @ V
            self.right = V.T @ (Z.T @ Yw)
        else:
            evals, U = np.linalg.eigh(Z @ Z.T)
            self.left = (Zh @ Z.T) @ U
            self.right = U.T @ Yw
        self.evals = np.clip(evals, 0.0, None)
        self.tol = max(self.evals.max(initial=0.0), 1.0) * max(n, f) * np.finfo(float).eps

    def predict(self, gamma: float) -> np.ndarray:
        if gamma > 0:
            scale = 1.0 / (self.evals + gamma)
        else:
            # minimum-norm least squares via the pseudo-inverse
            scale = np.where(self.evals > self.tol, 1.0 / np.where(self.evals > self.tol, self.evals, 1.0), 0.0)
        return (self.left * scale) @ self.right


class CrossValidation:
    """Two-fold cross validation of ridge regression over a gamma grid.

    ``groups`` keeps correlated samples (e.g. perturbations of one image) in
    the same fold. ``errors[j]`` is the pooled weighted held-out squared
    error for ``grid[j]``; :meth:`heldout` gives the out-of-fold predictions.
    """

    def __init__(self, features, targets, weights=None, grid=DEFAULT_GAMMA_GRID, seed=0, groups=None):
        X, Y, w = _prepare(features, targets, weights)
        grid = [float(g) for g in grid]
        if not grid:
            raise InvalidArg("gamma grid is empty")
        if any(not g >= 0 for g in grid):
            raise InvalidArg("gamma grid values must be non-negative")
        if X.shape[0] < 4:
            raise InvalidArg(f"cross validation needs at least 4 samples, got {X.shape[0]}")
        self.grid = grid
        self.n_samples, self.n_outputs = Y.shape
        self.folds = two_fold_split(X.shape[0], seed, groups)
        self.paths = []
        sums = np.zeros(len(grid))
        total_w = 0.0
        for k in range(2):
            tr, ho = self.folds[1 - k], self.folds[k]
            if not np.any(w[tr] > 0):
                raise InvalidArg("a cross-validation fold has no positive-weight training samples")
            path = _FoldPath(X[tr], Y[tr], w[tr], X[ho])
            self.paths.append(path)
            for g_idx, g in enumerate(grid):
                s, _ = weighted_error(path.predict(g), Y[ho], w[ho])
                sums[g_idx] += s
            total_w += float(np.sum(w[ho]))
        if total_w <= 0:
            raise InvalidArg("all held-out weights are zero")
        self.errors = sums / total_w

    def best(self) -> tuple[float, float]:
        """Grid gamma with the lowest error; ties (within 1e-9 relative) go to the smaller gamma."""
        order = np.argsort(self.grid, kind="stable")
        best = self.errors[order].min()
        for i in order:
            if self.errors[i] <= best + 1e-9 * max(abs(best), 1e-300):
                return self.grid[i], float(self.errors[i])
        raise AssertionError("unreachable")

    def heldout(self, gamma: float) -> np.ndarray:
        """Out-of-fold predictions for every sample at ``gamma``."""
        out = np.empty((self.n_samples, self.n_outputs))
        for k, path in enumerate(self.paths):
            out[self.folds[k]] = path.predict(float(gamma))
        return out


def cv_errors(features, targets, weights=None, grid=DEFAULT_GAMMA_GRID, seed=0, groups=None) -> np.ndarray:
    """Pooled weighted held-out squared error of 2-fold cross validation for every gamma."""
    return CrossValidation(features, targets, weights, grid, seed, groups).errors


def select_gamma(features, targets, weights=None, grid=DEFAULT_GAMMA_GRID, seed=0, groups=None) -> tuple[float, float]:
    """Grid gamma with the lowest 2-fold CV error; ties (within 1e-9 relative) go to the smaller gamma."""
    return CrossValidation(features, targets, weights, grid, seed, groups).best()


def trim_outliers(residuals, fraction: float = 0.05) -> np.ndarray:
    """Indices (ascending) kept after dropping the ``ceil(fraction * n)`` largest residuals.

    Among equal residuals the later sample is dropped first.
    """
    r = np.asarray(residuals, dtype=float).reshape(-1)
    if not 0 <= fraction < 1:
        raise InvalidArg(f"trim fraction must be in [0, 1), got {fraction}")
    if np.any(np.isnan(r)) or np.any(r < 0):
        raise InvalidArg("residuals must be non-negative")
    # guard against 0.05 * 60 == 3.0000000000000004
    n_drop = math.ceil(fraction * r.size - 1e-9)
    if n_drop == 0:
        return np.arange(r.size)
    order = np.lexsort((np.arange(r.size), r))
    return np.sort(order[: r.size - n_drop])
