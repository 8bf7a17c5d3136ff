"""Landmark error metrics: inter-pupil normalized error, CDF curves and NAUC."""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

from .errors import InvalidArg, LengthMismatch
from .geometry import as_shape

DEFAULT_ALPHAS = (0.1, 0.2, 0.3, 0.4, 0.5)


def pupil_distance(gt, left_pupil, right_pupil) -> float:
    gt = as_shape(gt)
    left = list(left_pupil)
    right = list(right_pupil)
    if not left or not right:
        raise InvalidArg("pupil index sets must be non-empty")
    try:
        d = np.linalg.norm(gt[left].mean(axis=0) - gt[right].mean(axis=0))
    except IndexError as exc:
        raise InvalidArg(f"pupil index out of range for p={gt.shape[0]}") from exc
    return float(d)


def normalized_error(pred, gt, left_pupil, right_pupil) -> float:
    """Mean point-to-point error divided by the distance between the two pupil centers.

    Pupil centers are the means of the ``gt`` landmarks in each index set.
    """
    pred = as_shape(pred)
    gt = as_shape(gt)
    if pred.shape != gt.shape:
        raise LengthMismatch(f"prediction has {pred.shape[0]} landmarks, ground truth {gt.shape[0]}")
    d = pupil_distance(gt, left_pupil, right_pupil)
    if not d > 0:
        raise InvalidArg("inter-pupil distance is zero")
    return float(np.mean(np.linalg.norm(pred - gt, axis=1)) / d)


def _check_errors(errors) -> np.ndarray:
    e = np.asarray(errors, dtype=float).reshape(-1)
    if e.size == 0:
        raise InvalidArg("need at least one error value")
    if not np.all(np.isfinite(e)) or np.any(e < 0):
        raise InvalidArg("errors must be finite and non-negative")
    return e


def nauc(errors, alpha: float) -> float:
    """Area under the empirical error CDF on ``[0, alpha]``, divided by ``alpha``.

    The CDF is right-continuous, ``F(e) = #{e_i <= e} / n``, so the exact
    integral divided by ``alpha`` is ``mean(max(0, alpha - e_i)) / alpha``.
    It is evaluated in rational arithmetic and rounded once.
    """
    e = _check_errors(errors)
    if not (alpha > 0 and math.isfinite(alpha)):
        raise InvalidArg("alpha must be positive")
    a = Fraction(float(alpha))
    area = sum((a - Fraction(float(v)) for v in e[e < alpha]), Fraction(0))
    out = float(area / (a * e.size))
    if out >= 1.0 and np.any(e > 0):
        # a positive error below alpha * eps still removes area
        out = float(np.nextafter(1.0, 0.0))
    return out


def cdf_points(errors) -> list[tuple[float, float]]:
    """Staircase vertices ``(e, F(e))`` at each distinct error, ascending."""
    e = np.sort(_check_errors(errors))
    values, counts = np.unique(e, return_counts=True)
    frac = np.cumsum(counts) / e.size
    return [(float(v), float(f)) for v, f in zip(values, frac)]


def nauc_from_cdf(points, alpha: float) -> float:
    """Integrate a :func:`cdf_points` staircase on ``[0, alpha]``, divided by ``alpha``."""
    if not alpha > 0:
        raise InvalidArg("alpha must be positive")
    area = 0.0
    level = 0.0
    prev = 0.0
    for e, f in points:
        if e >= alpha:
            break
        area += level * (e - prev)
        prev, level = e, f
    area += level * (alpha - prev)
    return area / alpha


def nauc_table(errors, alphas=DEFAULT_ALPHAS) -> dict:
    return {float(a): nauc(errors, a) for a in alphas}
