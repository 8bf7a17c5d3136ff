"""Local gradient-orientation descriptors and the landmark feature vector.

The descriptor is an upright SIFT-like histogram: a ``2R x 2R`` patch split
into ``cells x cells`` spatial cells with ``bins`` orientation bins each,
votes interpolated linearly across bins and cells, then L2-normalized,
clipped and renormalized. No keypoint detection, dominant-orientation
assignment or scale pyramid is involved; the cascade warps every image
into a canonical frame before extraction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import InvalidArg, LengthMismatch
from .geometry import as_image, as_shape

# Histograms with a smaller L2 norm are treated as empty.
_ZERO_NORM = 1e-12


@dataclass(frozen=True)
class DescriptorParams:
    patch_cells: int = 4
    orientation_bins: int = 8
    patch_radius: int = 16
    clip_threshold: float = 0.2

    def __post_init__(self):
        if self.patch_cells < 1 or self.orientation_bins < 1 or self.patch_radius < 1:
            raise InvalidArg(f"descriptor sizes must be positive: {self}")
        if not self.clip_threshold > 0:
            raise InvalidArg("clip_threshold must be positive")

    @property
    def dim(self) -> int:
        return self.patch_cells**2 * self.orientation_bins


def normalize_blocks(hist: np.ndarray, clip: float) -> np.ndarray:
    """L2-normalize, clip at ``clip`` and renormalize each row; empty rows stay zero."""
    hist = np.asarray(hist, dtype=float)
    out = np.zeros_like(hist)
    norms = np.linalg.norm(hist, axis=-1)
    ok = norms > _ZERO_NORM
    if np.any(ok):
        v = np.minimum(hist[ok] / norms[ok, None], clip)
        out[ok] = v / np.linalg.norm(v, axis=-1, keepdims=True)
    return out


def descriptors(img, centers, params: DescriptorParams = DescriptorParams()) -> np.ndarray:
    """Descriptors at every ``(n, 2)`` center, as an ``(n, d)`` array."""
    img = as_image(img)
    centers = np.ascontiguousarray(np.asarray(centers, dtype=float).reshape(-1, 2))
    raw = _kernels.orientation_histograms(
        img, centers, int(params.patch_radius), int(params.patch_cells), int(params.orientation_bins)
    )
    return normalize_blocks(raw, params.clip_threshold)


def extract_descriptor(img, center, params: DescriptorParams = DescriptorParams()) -> np.ndarray:
    center = np.asarray(center, dtype=float).reshape(2)
    if not np.all(np.isfinite(center)):
        raise InvalidArg("descriptor center must be finite")
    return descriptors(img, center[None], params)[0]


def extract_features(img, s, params: DescriptorParams = DescriptorParams()) -> np.ndarray:
    """Concatenated per-landmark descriptors, length ``p * d``, in landmark order."""
    s = as_shape(s)
    return descriptors(img, s, params).reshape(-1)


def extend_constrained(features, s, prototype, lam: float) -> np.ndarray:
    """Append ``lam * (s - prototype)`` (interleaved x/y) to a plain feature vector."""
    s = as_shape(s)
    prototype = as_shape(prototype)
    if s.shape != prototype.shape:
        raise LengthMismatch(f"shape has {s.shape[0]} landmarks, prototype {prototype.shape[0]}")
    features = np.asarray(features, dtype=float).reshape(-1)
    if features.size % s.shape[0]:
        raise LengthMismatch(f"feature length {features.size} is not a multiple of p={s.shape[0]}")
    if lam < 0:
        raise InvalidArg("constraint weight must be non-negative")
    return np.concatenate([features, lam * (s - prototype).reshape(-1)])


def feature_length(p: int, params: DescriptorParams, constrained: bool) -> int:
    return p * params.dim + (2 * p if constrained else 0)
