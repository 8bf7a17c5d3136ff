"""Training of SDM, TI-SDM and mixture cascades from annotated images.

Pipeline: normalize the ground-truth shapes, learn the expert prototypes,
sample ``M`` perturbed initializations per image, then grow the cascade one
level at a time. Each level fits one weighted ridge regression per expert in
that expert's frame, applies the gated mixture to every training estimate,
and trims the worst-fitting samples before the next level. Levels are added
until cross-validation error stops improving; a short fine cascade trained
from small i.i.d. perturbations is appended at the end.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .cascade import Expert, MixModel, frame_features, gating_matrix, stage_transform
from .clustering import build_constraints, cluster_shapes, default_groups
from .errors import InsufficientData, InvalidArg, LengthMismatch
from .features import DescriptorParams
from .geometry import (
    TRANSFORMS,
    as_image,
    bounding_box,
    canonical_normalize,
    fit_affine_batch,
    invert,
    rms_radius,
    stack_shapes,
)
from .regression import DEFAULT_GAMMA_GRID, CrossValidation, RegressionStage, fit_ridge, trim_outliers

log = logging.getLogger(__name__)

MODES = ("SDM", "TI-SDM", "MIX")


@dataclass
class TrainConfig:
    """Training hyperparameters.

    Perturbation sigmas are relative to each face's RMS landmark radius,
    except ``sigma_rotation`` (degrees), ``sigma_scale`` (log-scale per axis)
    and ``sigma_pca`` (multiples of each deformation mode's standard
    deviation).
    """

    M: int = 15
    L: int = 1
    K_max: int = 4
    fine_stages: int = 1
    pca_modes: int = 4
    sigma_pca: float = 1.0
    sigma_rotation: float = 14.0
    sigma_translation: float = 0.15
    sigma_scale: float = 0.1
    sigma_iid: float = 0.03
    fine_stage_sigma: float = 0.02
    trim_fraction: float = 0.05
    stop_ratio: float = 0.995
    gamma_grid: tuple = DEFAULT_GAMMA_GRID
    lam: float = 0.0
    gating_temperature: float = 1.0
    transform: str = "affine"
    constraint_groups: list | None = None
    cluster_max_iter: int = 50
    frame_margin: int = 4
    cross_fit: bool = True
    descriptor: DescriptorParams = field(default_factory=DescriptorParams)
    seed: int = 0

    def __post_init__(self):
        self.gamma_grid = tuple(float(g) for g in self.gamma_grid)
        self.validate()

    def validate(self):
        if self.M < 1 or self.L < 1 or self.K_max < 1 or self.fine_stages < 0 or self.pca_modes < 0:
            raise InvalidArg("M, L and K_max must be positive; fine_stages and pca_modes non-negative")
        sigmas = (self.sigma_pca, self.sigma_rotation, self.sigma_translation, self.sigma_scale,
                  self.sigma_iid, self.fine_stage_sigma)
        if any(not s >= 0 for s in sigmas):
            raise InvalidArg("perturbation sigmas must be non-negative")
        if not 0 <= self.trim_fraction < 1:
            raise InvalidArg("trim_fraction must be in [0, 1)")
        if not self.gamma_grid or any(not g >= 0 for g in self.gamma_grid):
            raise InvalidArg("gamma grid must be non-empty and non-negative")
        if not self.lam >= 0 or not self.gating_temperature > 0:
            raise InvalidArg("lam must be >= 0 and gating_temperature > 0")
        if self.transform not in TRANSFORMS:
            raise InvalidArg(f"unknown transform class {self.transform!r}")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def variant_config(mode: str, constrained: bool, base: TrainConfig | None = None, L: int = 3,
                   lam: float = 1.0) -> TrainConfig:
    """Config for one ablation variant.

    ``SDM`` uses one expert and no alignment step, ``TI-SDM`` one affine
    expert and ``MIX`` ``L`` affine experts. ``constrained`` turns on the
    shape-difference features with weight ``lam``.
    """
    base = TrainConfig() if base is None else base
    if mode not in MODES:
        raise InvalidArg(f"unknown variant {mode!r}; expected one of {MODES}")
    transform = "identity" if mode == "SDM" else "affine"
    n_experts = L if mode == "MIX" else 1
    return replace(base, L=n_experts, transform=transform, lam=lam if constrained else 0.0)


class ShapePCA:
    """Principal deformation directions of ``(n, p, 2)`` shapes."""

    def __init__(self, shapes, n_modes: int):
        X = stack_shapes(shapes).reshape(len(shapes), -1)
        self.mean = X.mean(axis=0)
        n_modes = int(min(n_modes, max(X.shape[0] - 1, 0), X.shape[1]))
        if n_modes > 0:
            _, sv, vt = np.linalg.svd(X - self.mean, full_matrices=False)
            self.components = vt[:n_modes]
            self.stds = sv[:n_modes] / math.sqrt(max(X.shape[0] - 1, 1))
        else:
            self.components = np.zeros((0, X.shape[1]))
            self.stds = np.zeros(0)

    @property
    def n_modes(self) -> int:
        return self.components.shape[0]


def sample_perturbation(gt, pca: ShapePCA, config: TrainConfig, rng) -> np.ndarray:
    """Random training initialization around ``gt``.

    Applied in order: a deformation along the PCA modes, an affine jitter
    about the centroid (rotation, per-axis log-scale, translation), then
    i.i.d. point noise. The number of random draws does not depend on the
    sigmas, so streams stay aligned across configs.
    """
    gt = np.asarray(gt, dtype=float)
    r = rms_radius(gt)
    coeffs = rng.standard_normal(pca.n_modes)
    theta = np.deg2rad(config.sigma_rotation) * rng.standard_normal()
    log_scale = config.sigma_scale * rng.standard_normal(2)
    shift = config.sigma_translation * r * rng.standard_normal(2)
    noise = config.sigma_iid * r * rng.standard_normal(gt.shape)

    deform = (config.sigma_pca * coeffs * pca.stds) @ pca.components
    x = gt + r * deform.reshape(gt.shape)
    c = gt.mean(axis=0)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    linear = rot @ np.diag(np.exp(log_scale))
    x = (x - c) @ linear.T + c + shift
    return x + noise


def _iid_perturbation(gt, sigma: float, rng) -> np.ndarray:
    return gt + sigma * rms_radius(gt) * rng.standard_normal(gt.shape)


@dataclass(eq=False)
class TrainReport:
    """Diagnostics of one training run."""

    cv_trace: list = field(default_factory=list)
    gammas: list = field(default_factory=list)
    n_samples: list = field(default_factory=list)
    main_stages: int = 0
    fine_stages: int = 0
    cluster_assignments: np.ndarray | None = None


class _Samples:
    """Augmented training set: image index, ground truth and current estimate per sample."""

    def __init__(self, img_idx, gt, x):
        self.img_idx = np.asarray(img_idx, dtype=int)
        self.gt = np.asarray(gt, dtype=float)
        self.x = np.asarray(x, dtype=float)

    def subset(self, keep) -> _Samples:
        return _Samples(self.img_idx[keep], self.gt[keep], self.x[keep])

    def __len__(self):
        return len(self.img_idx)


def _expert_design(images, samples: _Samples, prototype, model: MixModel):
    """Features, frame targets and transforms of every sample for one expert."""
    n = len(samples)
    Phi = np.empty((n, model.n_features))
    T = np.empty((n, 2 * model.n_landmarks))
    transforms = []
    for i in range(n):
        A = stage_transform(samples.x[i], prototype, model)
        s_frame, Phi[i] = frame_features(images[samples.img_idx[i]], samples.x[i], A, prototype, model)
        gt_frame = samples.gt[i] if A is None else A(samples.gt[i])
        T[i] = (gt_frame - s_frame).reshape(-1)
        transforms.append(A)
    return Phi, T, transforms


def _apply_expert(pred, samples: _Samples, transforms) -> np.ndarray:
    """Map frame-space updates ``pred`` back to image space for every sample."""
    out = np.empty_like(samples.x)
    pred = pred.reshape(len(samples), -1, 2)
    for i, A in enumerate(transforms):
        if A is None:
            out[i] = samples.x[i] + pred[i]
        else:
            out[i] = invert(A)(A(samples.x[i]) + pred[i])
    return out


def _fit_level(images, samples: _Samples, alpha, model: MixModel, config: TrainConfig, seed):
    """Fit one cascade level; returns ``(stages, cv, new_estimates, gammas)``."""
    stages, cvs, masses, gammas = [], [], [], []
    gate = gating_matrix(samples.x, model)
    x_next = np.zeros_like(samples.x)
    for l, expert in enumerate(model.experts):
        Phi, T, transforms = _expert_design(images, samples, expert.prototype, model)
        w = alpha[:, l]
        if np.count_nonzero(w > 0) < 4:
            stage = RegressionStage.zeros(T.shape[1], Phi.shape[1])
            cv = float(np.sum(w * np.sum(T * T, axis=1)) / max(w.sum(), 1e-300))
            pred = np.zeros_like(T)
        else:
            cross = CrossValidation(Phi, T, w, config.gamma_grid, seed=[*seed, l], groups=samples.img_idx)
            gamma, cv = cross.best()
            stage = fit_ridge(Phi, T, w, gamma=gamma, lam=model.lam)
            # in-sample updates are optimistic once F approaches the sample count
            pred = cross.heldout(gamma) if config.cross_fit else stage.predict(Phi)
        stages.append(stage)
        cvs.append(cv)
        masses.append(float(w.sum()))
        gammas.append(stage.gamma)
        x_next += gate[:, l, None, None] * _apply_expert(pred, samples, transforms)
    masses = np.asarray(masses)
    cv = float(np.dot(cvs, masses) / masses.sum())
    return stages, cv, x_next, gammas


def _grow_cascade(images, samples: _Samples, model: MixModel, config: TrainConfig, n_levels: int,
                  seed, report: TrainReport, stop_early: bool) -> int:
    """Append up to ``n_levels`` levels to ``model``; returns the number added."""
    # responsibilities come from the initial perturbed shapes and stay fixed
    alpha = gating_matrix(samples.x, model)
    prev_cv = None
    added = 0
    for k in range(n_levels):
        stages, cv, x_next, gammas = _fit_level(images, samples, alpha, model, config, [*seed, k])
        if stop_early and prev_cv is not None and cv > config.stop_ratio * prev_cv:
            log.info("level %d cv %.6g did not improve on %.6g; stopping", k, cv, prev_cv)
            break
        for expert, stage in zip(model.experts, stages):
            expert.stages.append(stage)
        report.cv_trace.append(cv)
        report.gammas.append(gammas)
        report.n_samples.append(len(samples))
        added += 1
        prev_cv = cv
        log.info("level %d: %d samples, cv %.6g, gammas %s", k, len(samples), cv, gammas)
        samples.x = x_next
        if k + 1 < n_levels and config.trim_fraction > 0:
            resid = np.sqrt(np.sum((samples.x - samples.gt) ** 2, axis=(1, 2)))
            scale = np.array([rms_radius(g) for g in samples.gt])
            keep = trim_outliers(resid / scale, config.trim_fraction)
            samples = samples.subset(keep)
            alpha = alpha[keep]
    return added


def _frame_layout(canonical_protos, frame_scale: float, config: TrainConfig):
    extent = float(np.abs(canonical_protos).max()) * frame_scale
    half = extent + config.descriptor.patch_radius + config.frame_margin
    side = int(math.ceil(2 * half)) + 1
    center = np.array([(side - 1) / 2.0, (side - 1) / 2.0])
    return (side, side), center


def bbox_ratio(shapes, bboxes) -> float:
    """Median ratio of landmark-extent side to detector-box side (larger sides)."""
    ratios = []
    for s, (l, t, r, b) in zip(shapes, bboxes):
        sl, st, sr, sb = bounding_box(s)
        box = max(r - l, b - t)
        if box > 0:
            ratios.append(max(sr - sl, sb - st) / box)
    return float(np.median(ratios)) if ratios else 1.0


def learn_prototypes(canonical, config: TrainConfig, seed=None):
    """Canonical-frame prototypes ``(L, p, 2)`` and per-shape assignments."""
    n, p, _ = canonical.shape
    seed = config.seed if seed is None else seed
    mean = canonical.mean(axis=0)
    if config.L == 1:
        return mean[None].copy(), np.zeros(n, dtype=int)
    if config.transform == "identity":
        res = cluster_shapes(canonical, config.L, None, seed=seed, max_iter=config.cluster_max_iter,
                             transform="identity")
    else:
        groups = config.constraint_groups if config.constraint_groups else default_groups(p)
        constraints = build_constraints(canonical, groups)
        res = cluster_shapes(canonical, config.L, constraints, seed=seed, max_iter=config.cluster_max_iter)
        # the constrained optimum is shrunk along unpinned directions; register
        # every prototype onto the mean so expert frames share a common scale
        lin, tr = fit_affine_batch(res.prototypes, mean)
        return np.einsum("lij,lpj->lpi", lin, res.prototypes) + tr[:, None, :], res.assignments
    return res.prototypes, res.assignments


def train(images, shapes, config: TrainConfig, bboxes=None, report: TrainReport | None = None) -> MixModel:
    """Train a cascade on ``images`` with ground-truth ``shapes``.

    ``bboxes`` (detector boxes, optional) calibrate how the mean shape is
    placed in a box at test time.
    """
    config.validate()
    images = [as_image(im) for im in images]
    gts = stack_shapes(shapes)
    if len(images) != len(gts):
        raise LengthMismatch(f"{len(images)} images but {len(gts)} shapes")
    n = len(gts)
    if n < max(5 * config.L, 4):
        raise InsufficientData(f"need at least {max(5 * config.L, 4)} annotated images, got {n}")
    report = TrainReport() if report is None else report

    canonical, _ = canonical_normalize(gts)
    frame_scale = float(np.median([rms_radius(g) for g in gts]))
    protos, assignments = learn_prototypes(canonical, config)
    report.cluster_assignments = assignments
    frame_size, center = _frame_layout(protos, frame_scale, config)
    experts = [Expert(pr * frame_scale + center) for pr in protos]
    model = MixModel(
        experts,
        descriptor_params=config.descriptor,
        mean_shape=canonical.mean(axis=0) * frame_scale + center,
        lam=config.lam,
        gating_temperature=config.gating_temperature,
        transform=config.transform,
        frame_size=frame_size,
        frame_scale=frame_scale,
        bbox_scale=bbox_ratio(gts, bboxes) if bboxes is not None else 1.0,
    )

    rng = np.random.default_rng([config.seed, 1])
    pca = ShapePCA(canonical, config.pca_modes)
    img_idx = np.repeat(np.arange(n), config.M)
    x0 = np.array([sample_perturbation(gts[i], pca, config, rng) for i in img_idx])
    samples = _Samples(img_idx, gts[img_idx], x0)
    report.main_stages = _grow_cascade(images, samples, model, config, config.K_max, [config.seed, 2],
                                       report, stop_early=True)

    if config.fine_stages > 0:
        rng = np.random.default_rng([config.seed, 3])
        x0 = np.array([_iid_perturbation(gts[i], config.fine_stage_sigma, rng) for i in img_idx])
        samples = _Samples(img_idx, gts[img_idx], x0)
        report.fine_stages = _grow_cascade(images, samples, model, config, config.fine_stages,
                                           [config.seed, 4], report, stop_early=True)
    model.validate()
    return model
