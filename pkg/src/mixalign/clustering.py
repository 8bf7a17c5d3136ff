"""Affine-invariant clustering of landmark shapes into prototype shapes.

The objective is ``sum_n min_{A, l} ||A(x_n) - proto_l||^2`` subject to
linear constraints ``C proto_l = m`` that rule out the all-zero solution.
It is minimized by alternating hard assignments with constrained
prototype solves.

For a fixed member set the affine maps can be eliminated: the best
``A(x_n)`` is the orthogonal projection of the prototype (column-wise) onto
``span{x_n, y_n, 1}``, so the prototype objective is the convex quadratic
``sum_n ||(I - P_n) proto||^2`` and its constrained minimizer comes from one
linear solve. Where that minimizer is not unique (all members affinely
equivalent, or fewer than six constraints with a single member) the
solution closest to the starting prototype is returned.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArg, LengthMismatch, SingularSystem
from .geometry import _design_svd, _check_conditioning, alignment_residuals, as_shape, stack_shapes, whiten

# relative eigenvalue cutoff separating exact gauge directions from curvature
_GAUGE_RTOL = 1e-10


@dataclass(eq=False)
class ShapeConstraints:
    """Linear equality constraints ``C @ x = m`` on a flattened ``2p`` shape."""

    C: np.ndarray
    m: np.ndarray

    def __post_init__(self):
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        self.m = np.asarray(self.m, dtype=float).reshape(-1)
        c, n = self.C.shape
        if self.m.size != c:
            raise LengthMismatch(f"C has {c} rows but m has {self.m.size} entries")
        if n % 2:
            raise InvalidArg("constraint matrix must have an even number of columns")
        if c < 3 or c > n:
            raise InvalidArg(f"need 3 <= c <= 2p constraints, got c={c}, 2p={n}")
        if not (np.all(np.isfinite(self.C)) and np.all(np.isfinite(self.m))):
            raise InvalidArg("constraints must be finite")
        u, sv, vt = np.linalg.svd(self.C)
        if sv[-1] <= sv[0] * 1e-12:
            raise SingularSystem("constraint matrix is not of full row rank")
        self._u = u
        self._sv = sv
        self._vt = vt

    @property
    def n_landmarks(self) -> int:
        return self.C.shape[1] // 2

    def violation(self, x) -> float:
        return float(np.max(np.abs(self.C @ np.asarray(x, dtype=float).reshape(-1) - self.m)))

    def particular(self, x0) -> np.ndarray:
        """Orthogonal projection of ``x0`` onto the feasible set."""
        x0 = np.asarray(x0, dtype=float).reshape(-1)
        return x0 + self._pinv_apply(self.m - self.C @ x0)

    def _pinv_apply(self, r):
        c = self.C.shape[0]
        return self._vt[:c].T @ ((self._u.T @ r) / self._sv)

    def null_basis(self) -> np.ndarray:
        return self._vt[self.C.shape[0]:].T

    def least_norm_point(self) -> np.ndarray:
        return self._pinv_apply(self.m).reshape(-1, 2)


def build_constraints(shapes, groups) -> ShapeConstraints:
    """Pin group-mean coordinates to their dataset-wide averages.

    ``groups`` is a sequence of ``(landmark_indices, axes)`` with ``axes`` a
    subset of ``"xy"``; each (group, axis) pair adds one constraint row.
    """
    shapes = stack_shapes(shapes)
    if shapes.shape[0] == 0:
        raise InvalidArg("need shapes to set constraint targets")
    p = shapes.shape[1]
    rows, targets = [], []
    for indices, axes in groups:
        idx = np.asarray(list(indices), dtype=int)
        if idx.size == 0 or np.any(idx < 0) or np.any(idx >= p):
            raise InvalidArg(f"constraint group {list(indices)} out of range for p={p}")
        for axis in axes:
            if axis not in "xy":
                raise InvalidArg(f"unknown constraint axis {axis!r}")
            a = "xy".index(axis)
            row = np.zeros(2 * p)
            row[2 * idx + a] = 1.0 / idx.size
            rows.append(row)
            targets.append(float(np.mean(shapes[:, idx, a])))
    return ShapeConstraints(np.array(rows), np.array(targets))


def default_groups(p: int):
    """Three contiguous landmark blocks: first two pinned in x and y, the last in y."""
    if p < 3:
        raise InvalidArg("need at least 3 landmarks")
    b = np.array_split(np.arange(p), 3)
    return [(b[0].tolist(), "xy"), (b[1].tolist(), "xy"), (b[2].tolist(), "y")]


@dataclass(eq=False)
class ClusterResult:
    prototypes: np.ndarray
    assignments: np.ndarray
    objective_trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def _quadratic(members: np.ndarray, transform: str):
    """Per-coordinate ``(Q, q)`` with objective ``sum_c x_c' Q x_c - 2 q_c' x_c + const``."""
    n, p, _ = members.shape
    if transform == "identity":
        return n * np.eye(p), members.sum(axis=0)
    u, sv = _design_svd(members)
    _check_conditioning(sv)
    Q = n * np.eye(p) - np.einsum("npk,nqk->pq", u, u)
    return Q, np.zeros((p, 2))


def prototype_objective(members, prototype, transform: str = "affine") -> float:
    """``sum_n min_A ||A(members[n]) - prototype||^2``."""
    members = stack_shapes(members)
    if members.shape[0] == 0:
        return 0.0
    return float(alignment_residuals(members, np.asarray(prototype, float)[None], transform).sum())


def solve_prototype(members, init_prototype, constraints: ShapeConstraints | None, transform: str = "affine"):
    """Constrained prototype minimizing the summed alignment residual of ``members``."""
    members = stack_shapes(members)
    init = as_shape(init_prototype)
    if members.shape[0] < 1:
        raise InvalidArg("solve_prototype needs at least one member")
    if members.shape[1:] != init.shape:
        raise LengthMismatch("members and prototype have different landmark counts")
    if transform == "affine" and constraints is None:
        raise InvalidArg("affine prototype solve needs constraints (the unconstrained optimum is degenerate)")
    if constraints is not None and constraints.n_landmarks != init.shape[0]:
        raise LengthMismatch(f"constraints are for p={constraints.n_landmarks}, shapes have p={init.shape[0]}")
    if transform == "identity" and constraints is None:
        return members.mean(axis=0)

    Q, q = _quadratic(members, transform)
    p = init.shape[0]
    Qfull = np.kron(Q, np.eye(2))
    qfull = q.reshape(-1)
    if constraints is None:
        N = np.eye(2 * p)
        x_p = init.reshape(-1)
    else:
        N = constraints.null_basis()
        x_p = constraints.particular(init)
    if N.shape[1] == 0:
        return x_p.reshape(p, 2)
    H = N.T @ Qfull @ N
    g = N.T @ (qfull - Qfull @ x_p)
    evals, V = np.linalg.eigh(0.5 * (H + H.T))
    tol = _GAUGE_RTOL * max(abs(evals).max(), 1e-300)
    inv = np.where(evals > tol, 1.0 / np.where(evals > tol, evals, 1.0), 0.0)
    z = V @ (inv * (V.T @ g))
    return (x_p + N @ z).reshape(p, 2)


def assign_shape(s, prototypes, transform: str = "affine") -> tuple[int, float]:
    """Index of the prototype with the smallest per-landmark alignment error, and that error."""
    s = as_shape(s)
    protos = stack_shapes(prototypes)
    err = alignment_residuals(s[None], protos, transform)[0] / s.shape[0]
    idx = int(np.argmin(err))
    return idx, float(err[idx])


def _seed_indices(shapes: np.ndarray, L: int, rng, transform: str) -> list[int]:
    """Farthest-point seeding on pose-free alignment residuals."""
    n = shapes.shape[0]
    chosen = [int(rng.integers(n))]
    closest = np.full(n, np.inf)
    while len(chosen) < L:
        c = shapes[chosen[-1]]
        target = whiten(c) if transform == "affine" else c
        d = alignment_residuals(shapes, target[None], transform)[:, 0]
        closest = np.minimum(closest, d)
        closest[chosen] = -np.inf
        chosen.append(int(np.argmax(closest)))
    return chosen


def _check_cluster_args(shapes, L, transform):
    shapes = stack_shapes(shapes)
    if not isinstance(L, (int, np.integer)) or L < 1:
        raise InvalidArg(f"number of clusters must be a positive integer, got {L!r}")
    if shapes.shape[0] < L:
        raise InvalidArg(f"cannot form {L} clusters from {shapes.shape[0]} shapes")
    if transform not in ("affine", "identity"):
        raise InvalidArg(f"unknown transform class {transform!r}")
    return shapes


def _repair_empty(assign: np.ndarray, errs: np.ndarray, L: int):
    """Hand the globally worst-fitting sample (from a cluster with >1 member) to each empty cluster."""
    moved = []
    for l in range(L):
        if np.any(assign == l):
            continue
        counts = np.bincount(assign, minlength=L)
        own = errs[np.arange(len(assign)), assign]
        own = np.where(counts[assign] > 1, own, -np.inf)
        worst = int(np.argmax(own))
        assign[worst] = l
        moved.append((l, worst))
    return moved


def cluster_shapes(shapes, L: int, constraints: ShapeConstraints | None, seed=0, max_iter: int = 50,
                   transform: str = "affine") -> ClusterResult:
    """Alternate assignments and constrained prototype solves until assignments stop changing.

    ``objective_trace`` records the objective after every half-step
    (assignment, then prototype update).
    """
    shapes = _check_cluster_args(shapes, L, transform)
    rng = np.random.default_rng(seed)
    seeds = _seed_indices(shapes, L, rng, transform)
    if transform == "affine":
        if constraints is None:
            raise InvalidArg("affine-invariant clustering needs prototype constraints")
        # pose-free starting point so the result does not depend on the seeds' poses
        gauge = constraints.least_norm_point()
    prototypes = []
    for i in seeds:
        init = gauge if transform == "affine" else shapes[i]
        prototypes.append(solve_prototype(shapes[i][None], init, constraints, transform))
    prototypes = np.array(prototypes)

    assign = None
    trace = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        errs = alignment_residuals(shapes, prototypes, transform)
        new_assign = np.argmin(errs, axis=1)
        for l, i in _repair_empty(new_assign, errs, L):
            init = gauge if transform == "affine" else shapes[i]
            prototypes[l] = solve_prototype(shapes[i][None], init, constraints, transform)
            errs[:, l] = alignment_residuals(shapes, prototypes[l][None], transform)[:, 0]
        trace.append(float(errs[np.arange(len(shapes)), new_assign].sum()))
        if assign is not None and np.array_equal(new_assign, assign):
            converged = True
            break
        assign = new_assign
        for l in range(L):
            members = shapes[assign == l]
            prototypes[l] = solve_prototype(members, prototypes[l], constraints, transform)
        total = 0.0
        for l in range(L):
            total += prototype_objective(shapes[assign == l], prototypes[l], transform)
        trace.append(total)
    if assign is None or not converged:
        assign = new_assign
    return ClusterResult(prototypes, assign.astype(int), trace, it, converged)


def cluster_shapes_euclidean(shapes, L: int, seed=0, max_iter: int = 50) -> ClusterResult:
    """Plain Lloyd k-means on flattened shape vectors with farthest-point seeding."""
    shapes = _check_cluster_args(shapes, L, "identity")
    n, p, _ = shapes.shape
    X = shapes.reshape(n, -1)
    rng = np.random.default_rng(seed)
    seeds = _seed_indices(shapes, L, rng, "identity")
    centers = X[seeds].copy()
    assign = None
    trace = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        d = ((X[:, None, :] - centers[None]) ** 2).sum(axis=2)
        new_assign = np.argmin(d, axis=1)
        for l, i in _repair_empty(new_assign, d, L):
            centers[l] = X[i]
            d[:, l] = ((X - centers[l]) ** 2).sum(axis=1)
        trace.append(float(d[np.arange(n), new_assign].sum()))
        if assign is not None and np.array_equal(new_assign, assign):
            converged = True
            break
        assign = new_assign
        for l in range(L):
            centers[l] = X[assign == l].mean(axis=0)
        trace.append(float(((X - centers[assign]) ** 2).sum()))
    if assign is None or not converged:
        assign = new_assign
    return ClusterResult(centers.reshape(L, p, 2), assign.astype(int), trace, it, converged)
