"""Ablation benchmark: SDM, TI-SDM and mixture variants on a synthetic corpus."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .cascade import MixModel, init_from_bbox, mix_align
from .evaluation import DEFAULT_ALPHAS, nauc, normalized_error
from .synthetic import SynthModel, generate, make_synth_model, split_seeds
from .training import TrainConfig, train, variant_config

log = logging.getLogger(__name__)

#: (label, mode, constrained) in table order.
VARIANTS = (
    ("SDM", "SDM", False),
    ("TI-SDM", "TI-SDM", False),
    ("MIX(3) w/o constraint", "MIX", False),
    ("MIX(3) w/ constraint", "MIX", True),
)


@dataclass
class BenchSettings:
    n_train: int = 500
    n_test: int = 200
    M: int = 6
    K_max: int = 4
    L: int = 3
    # both picked on a validation split disjoint from the test seeds
    lam: float = 10.0
    gating_temperature: float = 10.0
    alphas: tuple = DEFAULT_ALPHAS
    seed: int = 0
    base: TrainConfig = field(default_factory=TrainConfig)


@dataclass(eq=False)
class BenchResult:
    label: str
    model: MixModel
    errors: np.ndarray
    nauc: dict
    train_seconds: float
    eval_seconds: float


def evaluate(model: MixModel, instances, left_pupil, right_pupil) -> np.ndarray:
    """Normalized error of every instance aligned from its detector box."""
    errs = []
    for inst in instances:
        pred, _ = mix_align(inst.image, init_from_bbox(inst.bbox, model), model)
        errs.append(normalized_error(pred, inst.shape, left_pupil, right_pupil))
    return np.array(errs)


def bench_data(settings: BenchSettings, synth: SynthModel | None = None):
    synth = make_synth_model(seed=settings.seed) if synth is None else synth
    tr_seed, te_seed = split_seeds(settings.seed)
    return synth, generate(synth, settings.n_train, tr_seed), generate(synth, settings.n_test, te_seed)


def train_variant(mode: str, constrained: bool, train_set, synth: SynthModel, settings: BenchSettings):
    base = replace(settings.base, M=settings.M, K_max=settings.K_max, seed=settings.seed,
                   gating_temperature=settings.gating_temperature, constraint_groups=synth.constraint_groups)
    cfg = variant_config(mode, constrained, base, L=settings.L, lam=settings.lam)
    return train([i.image for i in train_set], [i.shape for i in train_set], cfg,
                 bboxes=[i.bbox for i in train_set])


def run_bench(settings: BenchSettings | None = None, variants=VARIANTS, data=None) -> list[BenchResult]:
    settings = BenchSettings() if settings is None else settings
    synth, train_set, test_set = bench_data(settings) if data is None else data
    results = []
    for label, mode, constrained in variants:
        t0 = time.perf_counter()
        model = train_variant(mode, constrained, train_set, synth, settings)
        t1 = time.perf_counter()
        errs = evaluate(model, test_set, synth.left_pupil, synth.right_pupil)
        t2 = time.perf_counter()
        table = {a: nauc(errs, a) for a in settings.alphas}
        log.info("%s: nauc %s (train %.1fs, eval %.1fs)", label, table, t1 - t0, t2 - t1)
        results.append(BenchResult(label, model, errs, table, t1 - t0, t2 - t1))
    return results


def format_table(results, alphas=DEFAULT_ALPHAS) -> str:
    width = max(len(r.label) for r in results) if results else 8
    head = f"{'method':<{width}}  " + "  ".join(f"NAUC{a:<5g}" for a in alphas)
    lines = [head]
    for r in results:
        lines.append(f"{r.label:<{width}}  " + "  ".join(f"{r.nauc[a]:<9.4f}" for a in alphas))
    return "\n".join(lines)
