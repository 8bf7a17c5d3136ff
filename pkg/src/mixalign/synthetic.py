"""Deterministic synthetic "faces": deformable landmark shapes with rendered images.

Every landmark is drawn as an elongated Gaussian blob whose orientation
depends on the landmark index, on top of a soft elliptical face region and
a noisy background. Shapes come from a base layout plus one of several
discrete expression presets, small orthogonal deformation modes, and a
random affine pose. Rendering evaluates the patterns analytically in the
pose-free frame, so images are exact affine images of each other.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArg
from .geometry import AffineTransform, as_shape

# Hand layout for 20 landmarks at 64 px inter-ocular distance (y points down).
_FACE20 = np.array(
    [
        (-48, -20), (-32, -26), (-16, -20), (-32, -14),  # left eye
        (16, -20), (32, -26), (48, -20), (32, -14),  # right eye
        (-52, -40), (-34, -46), (-16, -42),  # left brow
        (16, -42), (34, -46), (52, -40),  # right brow
        (0, -2), (0, 16),  # nose
        (-24, 40), (0, 34), (24, 40), (0, 48),  # mouth
    ],
    dtype=float,
)
_EYE_Y = -20.0


def face_layout(p: int = 20) -> np.ndarray:
    """Base landmark layout centered on the origin.

    ``p=20`` gives the hand layout; other ``p >= 8`` keep the two 4-point
    eyes and spread the remaining points over brow and mouth arcs.
    """
    if p == 20:
        return _FACE20.copy()
    if p < 8:
        raise InvalidArg("synthetic faces need at least 8 landmarks")
    pts = list(map(tuple, _FACE20[:8]))
    rest = p - 8
    n_brow = rest // 3
    n_mouth = rest - n_brow
    for i in range(n_brow):
        t = (i + 0.5) / n_brow
        x = -56 + 112 * t
        pts.append((x, -40 - 6 * np.cos((t - 0.5) * 2 * np.pi) ** 2))
    for i in range(n_mouth):
        a = 2 * np.pi * i / n_mouth
        pts.append((26 * np.cos(a), 41 + 10 * np.sin(a)))
    return np.array(pts, dtype=float)


def _region_masks(base):
    y = base[:, 1]
    brow = y < -32
    eye = (y >= -32) & (y < -8)
    mouth = y > 25
    return brow, eye, mouth


def expression_presets(base: np.ndarray) -> np.ndarray:
    """Three presets as landmark offsets: neutral, surprise, smile."""
    brow, eye, mouth = _region_masks(base)
    x, y = base[:, 0], base[:, 1]
    neutral = np.zeros_like(base)

    surprise = np.zeros_like(base)
    surprise[brow, 1] -= 10.0
    upper = eye & (y < _EYE_Y - 1)
    lower = eye & (y > _EYE_Y + 1)
    surprise[upper, 1] -= 4.0
    surprise[lower, 1] += 4.0
    mouth_cy = y[mouth].mean() if mouth.any() else 0.0
    surprise[mouth, 0] -= 0.3 * x[mouth]
    surprise[mouth, 1] += 0.9 * (y[mouth] - mouth_cy) + 3.0

    smile = np.zeros_like(base)
    half_width = np.abs(x[mouth]).max() if mouth.any() else 1.0
    smile[mouth, 0] += 0.4 * x[mouth]
    smile[mouth, 1] -= 9.0 * (x[mouth] / half_width) ** 2
    smile[mouth, 1] += 0.4 * (y[mouth] - mouth_cy)
    smile[upper, 1] += 3.0
    smile[lower, 1] -= 2.0
    smile[brow, 1] += 4.0
    return np.stack([neutral, surprise, smile])


def _deformation_modes(base: np.ndarray, n_modes: int, rng) -> np.ndarray:
    """Orthonormal random modes orthogonal to the affine images of ``base``."""
    p = base.shape[0]
    affine = []
    for a in range(2):
        for col in (base[:, 0], base[:, 1], np.ones(p)):
            v = np.zeros((p, 2))
            v[:, a] = col
            affine.append(v.reshape(-1))
    basis = np.linalg.qr(np.array(affine).T)[0]
    raw = rng.standard_normal((2 * p, n_modes))
    raw -= basis @ (basis.T @ raw)
    q = np.linalg.qr(raw)[0]
    return q.T


@dataclass
class SynthModel:
    base_shape: np.ndarray
    modes: np.ndarray
    mode_sigmas: np.ndarray
    presets: np.ndarray
    left_pupil: tuple = (0, 1, 2, 3)
    right_pupil: tuple = (4, 5, 6, 7)
    constraint_groups: list = field(default_factory=list)
    image_size: tuple = (200, 200)
    rotation_range: float = 25.0
    scale_range: tuple = (0.9, 1.1)
    anisotropy: float = 0.08
    shear: float = 0.06
    translation: float = 8.0
    blob_sigmas: tuple = (4.0, 2.0)
    blob_amplitude: float = 0.5
    preset_orientation: tuple = (0.0, 0.6, -0.6)
    background: float = 0.25
    face_contrast: float = 0.12
    face_radii: tuple = (70.0, 82.0)
    noise_sigma: float = 0.02
    bbox_inflate: float = 0.2
    bbox_jitter: float = 0.05

    def __post_init__(self):
        self.base_shape = as_shape(self.base_shape)
        self.modes = np.asarray(self.modes, dtype=float).reshape(-1, self.base_shape.size)
        self.mode_sigmas = np.asarray(self.mode_sigmas, dtype=float).reshape(-1)
        self.presets = np.asarray(self.presets, dtype=float).reshape(-1, *self.base_shape.shape)
        if self.mode_sigmas.size != self.modes.shape[0]:
            raise InvalidArg("need one sigma per deformation mode")
        if self.presets.shape[0] < 1:
            raise InvalidArg("need at least one expression preset")

    @property
    def n_landmarks(self) -> int:
        return self.base_shape.shape[0]

    @property
    def n_presets(self) -> int:
        return self.presets.shape[0]

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, np.ndarray):
                d[k] = v.tolist()
            elif isinstance(v, tuple):
                d[k] = list(v)
        return d


def make_synth_model(p: int = 20, n_modes: int = 4, mode_sigma: float = 4.0, seed: int = 0, **overrides) -> SynthModel:
    """Default synthetic face model with three expression presets.

    ``mode_sigma`` is the standard deviation of each mode coefficient; modes
    are unit vectors over all ``2p`` coordinates. The base shape is placed at
    the image center.
    """
    rng = np.random.default_rng(seed)
    layout = face_layout(p)
    image_size = tuple(overrides.pop("image_size", (200, 200)))
    center = np.array([(image_size[0] - 1) / 2.0, (image_size[1] - 1) / 2.0])
    base = layout + center
    brow, _, mouth = _region_masks(layout)
    left_brow = np.flatnonzero(brow & (layout[:, 0] < 0)).tolist()
    right_brow = np.flatnonzero(brow & (layout[:, 0] > 0)).tolist()
    groups = [(left_brow, "xy"), (right_brow, "xy"), (np.flatnonzero(mouth).tolist(), "y")]
    return SynthModel(
        base_shape=base,
        modes=_deformation_modes(layout, n_modes, rng),
        mode_sigmas=np.full(n_modes, float(mode_sigma)),
        presets=expression_presets(layout),
        constraint_groups=groups,
        image_size=image_size,
        **overrides,
    )


@dataclass(eq=False)
class SynthInstance:
    image: np.ndarray
    shape: np.ndarray
    bbox: tuple
    preset: int
    pose: AffineTransform


def random_pose(model: SynthModel, rng) -> AffineTransform:
    """Random affine pose about the base-shape centroid (identity when all ranges are 0)."""
    theta = np.deg2rad(rng.uniform(-model.rotation_range, model.rotation_range))
    s = rng.uniform(*model.scale_range)
    a = rng.uniform(-model.anisotropy, model.anisotropy)
    h = rng.uniform(-model.shear, model.shear)
    t = rng.uniform(-model.translation, model.translation, size=2)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    linear = s * rot @ np.diag([1.0 + a, 1.0 - a]) @ np.array([[1.0, h], [0.0, 1.0]])
    c = model.base_shape.mean(axis=0)
    return AffineTransform(linear, c - linear @ c + t)


def render(model: SynthModel, deformed: np.ndarray, pose: AffineTransform, rng=None, preset: int = 0) -> np.ndarray:
    """Render the pose-free shape ``deformed`` seen through ``pose``.

    Landmark ``i`` is a Gaussian blob elongated at angle ``pi * i / p`` plus
    the preset's orientation offset, so expressions also change local
    appearance. Without ``rng`` no noise is added.
    """
    w, h = model.image_size
    cols, rows = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    inv = np.linalg.inv(pose.linear)
    q = np.stack([cols - pose.translation[0], rows - pose.translation[1]], axis=-1)
    u = q @ inv.T
    img = np.full((h, w), model.background)
    center = model.base_shape.mean(axis=0)
    rx, ry = model.face_radii
    d = (u[..., 0] - center[0]) ** 2 / rx**2 + (u[..., 1] - center[1]) ** 2 / ry**2
    img += model.face_contrast / (1.0 + np.exp((np.sqrt(d) - 1.0) * 12.0))
    s_major, s_minor = model.blob_sigmas
    p = deformed.shape[0]
    reach = 4.0 * s_major
    offsets = model.preset_orientation
    offset = offsets[preset % len(offsets)] if len(offsets) else 0.0
    for i, (lx, ly) in enumerate(deformed):
        ang = np.pi * i / p + offset
        ca, sa = np.cos(ang), np.sin(ang)
        du = u[..., 0] - lx
        dv = u[..., 1] - ly
        near = (np.abs(du) < reach) & (np.abs(dv) < reach)
        a = ca * du[near] + sa * dv[near]
        b = -sa * du[near] + ca * dv[near]
        img[near] += model.blob_amplitude * np.exp(-0.5 * ((a / s_major) ** 2 + (b / s_minor) ** 2))
    if rng is not None and model.noise_sigma > 0:
        img += rng.normal(0.0, model.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def detector_bbox(model: SynthModel, shape: np.ndarray, rng) -> tuple:
    lo = shape.min(axis=0)
    hi = shape.max(axis=0)
    center = (lo + hi) / 2
    size = (hi - lo) * (1.0 + model.bbox_inflate)
    side = size.max()
    center = center + rng.normal(0.0, model.bbox_jitter * side, size=2)
    size = size * (1.0 + rng.normal(0.0, model.bbox_jitter))
    return (
        float(center[0] - size[0] / 2),
        float(center[1] - size[1] / 2),
        float(center[0] + size[0] / 2),
        float(center[1] + size[1] / 2),
    )


def sample_shape(model: SynthModel, rng, preset: int | None = None):
    """Draw ``(shape, preset, pose, deformed)`` without rendering."""
    k = int(rng.integers(model.n_presets)) if preset is None else int(preset)
    coeffs = rng.standard_normal(model.modes.shape[0]) * model.mode_sigmas
    deformed = model.base_shape + model.presets[k] + (coeffs @ model.modes).reshape(-1, 2)
    pose = random_pose(model, rng)
    return pose(deformed), k, pose, deformed


def sample_instance(model: SynthModel, rng, preset: int | None = None) -> SynthInstance:
    shape, k, pose, deformed = sample_shape(model, rng, preset)
    image = render(model, deformed, pose, rng, k)
    bbox = detector_bbox(model, shape, rng)
    return SynthInstance(image, shape, bbox, k, pose)


def generate(model: SynthModel, n: int, seed) -> list:
    rng = np.random.default_rng(seed)
    return [sample_instance(model, rng) for _ in range(n)]


def split_seeds(seed: int):
    """Disjoint train/test random streams derived from one seed."""
    return [int(seed), 0], [int(seed), 1]


def make_benchmark(model: SynthModel, n_train: int, n_test: int, seed: int, out_dir) -> Path:
    """Write a train/test corpus (PGM images, .pts, .bbox) plus ``manifest.json``."""
    from .io import write_bbox, write_pgm, write_pts

    out = Path(out_dir)
    manifest = {
        "format": "mixalign-synthetic",
        "seed": int(seed),
        "n_landmarks": model.n_landmarks,
        "left_pupil": list(model.left_pupil),
        "right_pupil": list(model.right_pupil),
        "constraint_groups": [[list(map(int, g)), axes] for g, axes in model.constraint_groups],
        "splits": {},
        "model": model.to_dict(),
    }
    for split, n, s in (("train", n_train, split_seeds(seed)[0]), ("test", n_test, split_seeds(seed)[1])):
        d = out / split
        d.mkdir(parents=True, exist_ok=True)
        presets = []
        for i, inst in enumerate(generate(model, n, s)):
            stem = d / f"{i:05d}"
            write_pgm(stem.with_suffix(".pgm"), inst.image)
            write_pts(stem.with_suffix(".pts"), inst.shape)
            write_bbox(stem.with_suffix(".bbox"), inst.bbox)
            presets.append(inst.preset)
        manifest["splits"][split] = {"count": n, "presets": presets}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out
