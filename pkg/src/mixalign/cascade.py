"""Mixture-of-invariant-experts cascade: model types and inference.

Each expert owns a prototype shape (in prototype-frame pixels) and one
regression stage per cascade level. A stage aligns the current estimate to
the prototype with the best affine map, warps the image into the prototype
frame, regresses a landmark update from local descriptors there, and maps
the result back. The mixture averages the experts' outputs with softmax
weights of the negative per-landmark alignment errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArg, LengthMismatch
from .features import DescriptorParams, descriptors, extend_constrained, feature_length
from .geometry import (
    TRANSFORMS,
    AffineTransform,
    alignment_residuals,
    as_image,
    as_shape,
    bounding_box,
    fit_affine_batch,
    invert,
    warp_image,
)
from .regression import RegressionStage


@dataclass(eq=False)
class Expert:
    prototype: np.ndarray
    stages: list = field(default_factory=list)

    def __post_init__(self):
        self.prototype = as_shape(self.prototype)


@dataclass(eq=False)
class MixModel:
    """A trained (or hand-built) cascade.

    ``frame_size`` is the ``(width, height)`` of the prototype-frame canvas
    images are warped into. ``frame_scale`` is the number of frame pixels
    per canonical shape unit; constraint features are expressed in
    canonical units, i.e. divided by it. ``bbox_scale`` is the typical ratio
    between a face's landmark extent and its detector box.
    """

    experts: list
    descriptor_params: DescriptorParams = field(default_factory=DescriptorParams)
    mean_shape: np.ndarray | None = None
    lam: float = 0.0
    gating_temperature: float = 1.0
    transform: str = "affine"
    frame_size: tuple = (128, 128)
    frame_scale: float = 1.0
    bbox_scale: float = 1.0
    config_text: str = ""

    def __post_init__(self):
        if self.mean_shape is None and self.experts:
            self.mean_shape = self.experts[0].prototype.copy()
        self.mean_shape = as_shape(self.mean_shape)
        self.frame_size = (int(self.frame_size[0]), int(self.frame_size[1]))
        self.validate()

    @property
    def feature_mode(self) -> str:
        return "constrained" if self.lam > 0 else "plain"

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @property
    def n_landmarks(self) -> int:
        return self.mean_shape.shape[0]

    @property
    def n_stages(self) -> int:
        return len(self.experts[0].stages) if self.experts else 0

    @property
    def n_features(self) -> int:
        return feature_length(self.n_landmarks, self.descriptor_params, self.lam > 0)

    @property
    def prototypes(self) -> np.ndarray:
        return np.stack([e.prototype for e in self.experts])

    def validate(self):
        if not self.experts:
            raise InvalidArg("a model needs at least one expert")
        if self.transform not in TRANSFORMS:
            raise InvalidArg(f"unknown transform class {self.transform!r}")
        if not self.gating_temperature > 0:
            raise InvalidArg("gating temperature must be positive")
        if not self.lam >= 0:
            raise InvalidArg("constraint weight must be non-negative")
        if not self.frame_scale > 0 or not self.bbox_scale > 0:
            raise InvalidArg("frame_scale and bbox_scale must be positive")
        if min(self.frame_size) < 1:
            raise InvalidArg(f"invalid frame size {self.frame_size}")
        p = self.n_landmarks
        K = len(self.experts[0].stages)
        for e in self.experts:
            if e.prototype.shape != (p, 2):
                raise LengthMismatch(f"prototype has {e.prototype.shape[0]} landmarks, model has {p}")
            if len(e.stages) != K:
                raise LengthMismatch("experts have different numbers of stages")
            for st in e.stages:
                if st.W.shape != (2 * p, self.n_features):
                    raise LengthMismatch(
                        f"stage weights {st.W.shape} do not match (2p, F)=({2 * p}, {self.n_features})"
                    )


def softmax_gate(errors, temperature: float = 1.0) -> np.ndarray:
    """``exp(-e/T) / sum exp(-e/T)`` along the last axis, max-shifted for stability."""
    e = np.asarray(errors, dtype=float)
    if not temperature > 0:
        raise InvalidArg("temperature must be positive")
    z = -e / temperature
    z = z - z.max(axis=-1, keepdims=True)
    w = np.exp(z)
    return w / w.sum(axis=-1, keepdims=True)


def gating_matrix(shapes, model: MixModel) -> np.ndarray:
    """Gating vectors for a batch of ``(n, p, 2)`` shapes."""
    shapes = np.asarray(shapes, dtype=float)
    if model.n_experts == 1:
        return np.ones((shapes.shape[0], 1))
    eps = alignment_residuals(shapes, model.prototypes, model.transform) / model.n_landmarks
    return softmax_gate(eps, model.gating_temperature)


def gating_weights(s, model: MixModel) -> np.ndarray:
    return gating_matrix(as_shape(s)[None], model)[0]


def frame_features(img, s, transform: AffineTransform | None, prototype, model: MixModel):
    """Features of ``img`` at ``s`` in the frame given by ``transform``.

    Returns ``(s_frame, phi)``. ``transform=None`` means no warping (the
    plain-SDM path): features come straight from ``img``.
    """
    params = model.descriptor_params
    if transform is None:
        frame_img, s_frame = img, s
    else:
        w, h = model.frame_size
        frame_img = warp_image(transform, img, w, h)
        s_frame = transform(s)
    phi = descriptors(frame_img, s_frame, params).reshape(-1)
    if model.lam > 0:
        scale = model.frame_scale
        phi = extend_constrained(phi, s_frame / scale, prototype / scale, model.lam)
    return s_frame, phi


def stage_transform(s, prototype, model: MixModel) -> AffineTransform | None:
    if model.transform == "identity":
        return None
    linear, translation = fit_affine_batch(s[None], prototype)
    return AffineTransform(linear[0], translation[0])


def ti_sdm_stage(img, s, prototype, stage: RegressionStage, model: MixModel) -> np.ndarray:
    """One transformation-invariant regression step for a single expert."""
    img = as_image(img)
    s = as_shape(s)
    prototype = as_shape(prototype)
    A = stage_transform(s, prototype, model)
    s_frame, phi = frame_features(img, s, A, prototype, model)
    s_next = s_frame + stage.predict(phi).reshape(-1, 2)
    return s_next if A is None else invert(A)(s_next)


@dataclass(eq=False)
class AlignTrace:
    shapes: list = field(default_factory=list)
    gatings: list = field(default_factory=list)


def mix_align(img, s0, model: MixModel):
    """Run the full cascade from ``s0``; returns ``(shape, AlignTrace)``.

    At every level each expert runs :func:`ti_sdm_stage`; outputs are
    averaged in expert order with the gating weights of the level's input.
    """
    img = as_image(img)
    x = as_shape(s0).copy()
    if x.shape[0] != model.n_landmarks:
        raise LengthMismatch(f"initial shape has {x.shape[0]} landmarks, model expects {model.n_landmarks}")
    trace = AlignTrace([x.copy()], [])
    for k in range(model.n_stages):
        alpha = gating_weights(x, model)
        out = np.zeros_like(x)
        for a, expert in zip(alpha, model.experts):
            out += a * ti_sdm_stage(img, x, expert.prototype, expert.stages[k], model)
        x = out
        trace.gatings.append(alpha)
        trace.shapes.append(x.copy())
    return x, trace


def init_from_bbox(bbox, model: MixModel) -> np.ndarray:
    """Mean shape placed in a detector box ``(left, top, right, bottom)``.

    The mean shape's bounding box is centered on the box and its larger side
    is scaled to ``bbox_scale`` times the box's larger side.
    """
    left, top, right, bottom = (float(v) for v in bbox)
    w, h = right - left, bottom - top
    if not (w > 0 and h > 0) or not np.all(np.isfinite([left, top, right, bottom])):
        raise InvalidArg(f"bounding box {tuple(bbox)} has no area")
    ms = model.mean_shape
    ml, mt, mr, mb = bounding_box(ms)
    ms_center = np.array([(ml + mr) / 2, (mt + mb) / 2])
    scale = max(w, h) * model.bbox_scale / max(mr - ml, mb - mt)
    return (ms - ms_center) * scale + np.array([(left + right) / 2, (top + bottom) / 2])
