"""Shapes, 2-D affine transforms, and image warping.

A shape is a float array of shape ``(p, 2)`` holding landmark ``(x, y)``
pixel coordinates; ``shape.reshape(-1)`` gives the interleaved
``(x1, y1, ..., xp, yp)`` vector. Images are 2-D float arrays indexed
``[row, col]`` with the pixel at column ``c``, row ``r`` located at ``(c, r)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import DegenerateShape, InvalidArg, LengthMismatch, SingularTransform

#: Design matrices with a larger condition number count as degenerate.
MAX_CONDITION = 1e12

TRANSFORMS = ("affine", "identity")


def as_shape(points) -> np.ndarray:
    """Coerce ``points`` to a ``(p, 2)`` float array, flat input accepted."""
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 1:
        if arr.size % 2:
            raise InvalidArg(f"flat shape vector has odd length {arr.size}")
        arr = arr.reshape(-1, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise InvalidArg(f"expected (p, 2) landmark array, got {arr.shape}")
    if arr.shape[0] < 3:
        raise InvalidArg(f"a shape needs at least 3 landmarks, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArg("shape has non-finite coordinates")
    return arr


def stack_shapes(shapes) -> np.ndarray:
    """Stack a sequence of shapes (or an ``(n, p, 2)`` array) into ``(n, p, 2)``."""
    if isinstance(shapes, np.ndarray) and shapes.ndim == 3:
        arr = np.asarray(shapes, dtype=float)
        if arr.shape[2] != 2:
            raise InvalidArg(f"expected (n, p, 2) shapes, got {arr.shape}")
        return arr
    shapes = [as_shape(s) for s in shapes]
    if not shapes:
        return np.zeros((0, 0, 2))
    if len({s.shape for s in shapes}) != 1:
        raise LengthMismatch("shapes have differing landmark counts")
    return np.stack(shapes)


def as_image(img) -> np.ndarray:
    arr = np.ascontiguousarray(img, dtype=float)
    if arr.ndim != 2 or arr.size == 0:
        raise InvalidArg(f"expected a non-empty 2-D grayscale image, got {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class AffineTransform:
    """``x -> linear @ x + translation`` acting on points in the plane."""

    linear: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        linear = np.array(self.linear, dtype=float).reshape(2, 2)
        translation = np.array(self.translation, dtype=float).reshape(2)
        if not (np.all(np.isfinite(linear)) and np.all(np.isfinite(translation))):
            raise InvalidArg("affine transform has non-finite entries")
        linear.flags.writeable = False
        translation.flags.writeable = False
        object.__setattr__(self, "linear", linear)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> AffineTransform:
        return cls(np.eye(2), np.zeros(2))

    @classmethod
    def from_matrix(cls, matrix) -> AffineTransform:
        m = np.asarray(matrix, dtype=float)
        if m.shape not in ((2, 3), (3, 3)):
            raise InvalidArg(f"expected a 2x3 or 3x3 matrix, got {m.shape}")
        return cls(m[:2, :2], m[:2, 2])

    @property
    def matrix(self) -> np.ndarray:
        """The 2x3 parameter matrix ``[linear | translation]``."""
        return np.hstack([self.linear, self.translation[:, None]])

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.linear))

    def __call__(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return pts @ self.linear.T + self.translation

    def apply_vector(self, displacement) -> np.ndarray:
        """Map displacement vectors (linear part only)."""
        return np.asarray(displacement, dtype=float) @ self.linear.T

    def __matmul__(self, other: AffineTransform) -> AffineTransform:
        return compose(self, other)

    def allclose(self, other: AffineTransform, atol=1e-9) -> bool:
        return bool(np.allclose(self.matrix, other.matrix, rtol=0.0, atol=atol))

    def __repr__(self):
        return f"AffineTransform(matrix={self.matrix.tolist()!r})"


def apply_to_shape(t: AffineTransform, s) -> np.ndarray:
    return t(as_shape(s))


def compose(outer: AffineTransform, inner: AffineTransform) -> AffineTransform:
    """Transform equal to applying ``inner`` first, then ``outer``."""
    return AffineTransform(outer.linear @ inner.linear, outer.linear @ inner.translation + outer.translation)


def invert(t: AffineTransform) -> AffineTransform:
    if np.linalg.cond(t.linear) > MAX_CONDITION:
        raise SingularTransform(f"transform is not invertible (det={t.det:.3g})")
    inv = np.linalg.inv(t.linear)
    return AffineTransform(inv, -inv @ t.translation)


def _design_svd(shapes: np.ndarray):
    """Batched thin SVD of the ``[x, y, 1]`` design matrices of ``(n, p, 2)`` shapes."""
    ones = np.ones(shapes.shape[:-1] + (1,))
    design = np.concatenate([shapes, ones], axis=-1)
    u, sv, _ = np.linalg.svd(design, full_matrices=False)
    return u, sv


def _check_conditioning(sv: np.ndarray):
    with np.errstate(divide="ignore"):
        cond = sv[..., 0] / sv[..., -1]
    bad = ~(cond <= MAX_CONDITION)
    if np.any(bad):
        idx = np.flatnonzero(np.atleast_1d(bad))
        raise DegenerateShape(
            f"landmarks are collinear or coincident (design condition number above {MAX_CONDITION:.0e}"
            + (f"; shape index {idx[0]})" if np.ndim(bad) else ")")
        )


def fit_affine_batch(src, dst):
    """Least-squares affine maps taking each ``src[n]`` onto ``dst[n]``.

    ``src`` is ``(n, p, 2)``; ``dst`` is ``(p, 2)`` or ``(n, p, 2)``.
    Returns ``(linear, translation)`` arrays of shapes ``(n, 2, 2)`` and ``(n, 2)``.
    """
    src = np.asarray(src, dtype=float)
    dst = np.broadcast_to(np.asarray(dst, dtype=float), src.shape)
    _, sv = _design_svd(src)
    _check_conditioning(sv)
    src_mean = src.mean(axis=1, keepdims=True)
    dst_mean = dst.mean(axis=1, keepdims=True)
    sc = src - src_mean
    dc = dst - dst_mean
    gram = np.einsum("npi,npj->nij", sc, sc)
    cross = np.einsum("npi,npj->nij", sc, dc)
    # solves gram @ X = cross, X = linear.T
    linear = np.swapaxes(np.linalg.solve(gram, cross), 1, 2)
    translation = dst_mean[:, 0, :] - np.einsum("nij,nj->ni", linear, src_mean[:, 0, :])
    return linear, translation


def fit_affine(src, dst) -> AffineTransform:
    """The affine transform minimizing ``sum ||A(src_i) - dst_i||^2``.

    Raises ``DegenerateShape`` when the ``[x, y, 1]`` design of ``src`` is
    rank deficient.
    """
    src = as_shape(src)
    dst = as_shape(dst)
    if src.shape != dst.shape:
        raise LengthMismatch(f"shapes have {src.shape[0]} and {dst.shape[0]} landmarks")
    linear, translation = fit_affine_batch(src[None], dst)
    return AffineTransform(linear[0], translation[0])


def fit_transform(src, dst, transform: str = "affine") -> AffineTransform:
    """Best transform of the given class; ``"identity"`` always returns the identity."""
    if transform == "identity":
        return AffineTransform.identity()
    if transform != "affine":
        raise InvalidArg(f"unknown transform class {transform!r}")
    return fit_affine(src, dst)


def alignment_residuals(shapes, prototypes, transform: str = "affine") -> np.ndarray:
    """Raw residuals ``min_A ||A(shapes[n]) - prototypes[l]||^2`` as an ``(n, L)`` array."""
    shapes = np.asarray(shapes, dtype=float)
    prototypes = np.asarray(prototypes, dtype=float)
    if shapes.shape[1:] != prototypes.shape[1:]:
        raise LengthMismatch(f"landmark counts differ: {shapes.shape[1]} vs {prototypes.shape[1]}")
    if transform == "identity":
        diff = shapes[:, None] - prototypes[None]
        return np.einsum("nlpc,nlpc->nl", diff, diff)
    if transform != "affine":
        raise InvalidArg(f"unknown transform class {transform!r}")
    u, sv = _design_svd(shapes)
    _check_conditioning(sv)
    # residual of projecting each prototype column onto span{x_n, y_n, 1}
    coef = np.einsum("npk,lpc->nlkc", u, prototypes)
    proj = np.einsum("npk,nlkc->nlpc", u, coef)
    resid = prototypes[None] - proj
    return np.einsum("nlpc,nlpc->nl", resid, resid)


def alignment_error(s, prototype, transform: str = "affine") -> float:
    """Per-landmark residual after the best transform of ``s`` onto ``prototype``."""
    s = as_shape(s)
    prototype = as_shape(prototype)
    if s.shape != prototype.shape:
        raise LengthMismatch(f"shapes have {s.shape[0]} and {prototype.shape[0]} landmarks")
    t = fit_transform(s, prototype, transform)
    r = t(s) - prototype
    return float(np.sum(r * r)) / s.shape[0]


def rms_radius(s) -> float:
    s = np.asarray(s, dtype=float)
    c = s - s.mean(axis=0)
    return float(np.sqrt(np.mean(np.sum(c * c, axis=1))))


def canonical_normalize(shapes):
    """Center each shape at the origin and scale it to unit RMS point radius.

    Returns ``(normalized, mean)`` where ``normalized`` is an ``(n, p, 2)``
    array and ``mean`` the per-landmark average of the normalized shapes.
    """
    arr = stack_shapes(shapes)
    if arr.shape[0] < 1:
        raise InvalidArg("canonical_normalize needs at least one shape")
    centered = arr - arr.mean(axis=1, keepdims=True)
    radius = np.sqrt(np.mean(np.sum(centered * centered, axis=2), axis=1))
    if np.any(~(radius > 0)):
        raise DegenerateShape("shape has zero RMS radius")
    normalized = centered / radius[:, None, None]
    return normalized, normalized.mean(axis=0)


def whiten(s) -> np.ndarray:
    """Affine-standardize a shape: zero mean, identity second-moment matrix.

    Any two affine images of a shape whiten to rotations/reflections of each
    other, which makes the result a pose-free target for alignment.
    """
    s = as_shape(s)
    c = s - s.mean(axis=0)
    cov = c.T @ c / len(c)
    vals, vecs = np.linalg.eigh(cov)
    if vals[0] <= vals[-1] / MAX_CONDITION:
        raise DegenerateShape("cannot whiten a collinear shape")
    return c @ (vecs / np.sqrt(vals)) @ vecs.T


def warp_image(t: AffineTransform, img, out_w: int | None = None, out_h: int | None = None) -> np.ndarray:
    """Warp ``img`` by ``t``: output pixel ``q`` reads ``img`` at ``t^-1(q)``.

    Bilinear interpolation; samples outside the source read as 0.
    """
    img = as_image(img)
    out_h = img.shape[0] if out_h is None else int(out_h)
    out_w = img.shape[1] if out_w is None else int(out_w)
    if out_w < 1 or out_h < 1:
        raise InvalidArg(f"invalid output size {out_w}x{out_h}")
    inv = invert(t)
    return _kernels.warp_inverse_map(img, np.ascontiguousarray(inv.linear), np.ascontiguousarray(inv.translation), out_h, out_w)


def sample_image(img, points) -> np.ndarray:
    """Bilinear intensity readback at ``(n, 2)`` points (zero outside)."""
    img = as_image(img)
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    return _kernels.sample_points(img, np.ascontiguousarray(pts[:, 0]), np.ascontiguousarray(pts[:, 1]))


def bounding_box(s) -> tuple[float, float, float, float]:
    s = np.asarray(s, dtype=float)
    lo = s.min(axis=0)
    hi = s.max(axis=0)
    return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])
