"""Command-line interface: ``mixalign {train,align,cluster,eval,synth,bench}``."""

from __future__ import annotations

import argparse
import csv
import io as _stdio
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import io
from .bench import BenchSettings, format_table, run_bench
from .cascade import init_from_bbox, mix_align
from .clustering import build_constraints, cluster_shapes, cluster_shapes_euclidean, default_groups
from .errors import InvalidArg, MixError
from .evaluation import DEFAULT_ALPHAS, cdf_points, nauc, normalized_error
from .geometry import canonical_normalize
from .synthetic import SynthModel, make_benchmark, make_synth_model
from .training import train

log = logging.getLogger("mixalign")


def _alphas(text: str) -> tuple:
    try:
        vals = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad alpha list {text!r}") from exc
    if not vals or any(not a > 0 for a in vals):
        raise argparse.ArgumentTypeError("alphas must be positive")
    return vals


def _indices(text: str) -> list:
    try:
        return [int(v) for v in text.replace(",", " ").split()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad index list {text!r}") from exc


def _bbox_arg(text: str) -> tuple:
    path = Path(text)
    if path.exists():
        return io.load_bbox(path)
    return io.parse_bbox(text)


def _load_images(samples):
    return [s.load_image() for s in samples]


def _pupils(args, p, data_dir):
    if args.left_pupil and args.right_pupil:
        return args.left_pupil, args.right_pupil
    return io.default_pupils(p, io.load_manifest(data_dir))


def cmd_train(args):
    cfg = io.train_config_from_dict(io.load_config(args.config)) if args.config else io.train_config_from_dict({})
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    samples = io.load_corpus(args.data)
    if not samples:
        raise InvalidArg(f"no annotated images in {args.data}")
    boxes = [s.bbox for s in samples]
    model = train(_load_images(samples), [s.shape for s in samples], cfg,
                  bboxes=boxes if all(b is not None for b in boxes) else None)
    model.config_text = io.format_train_config(cfg)
    io.save_model(args.out, model)
    print(f"trained {model.n_experts} expert(s) x {model.n_stages} stage(s) on {len(samples)} images -> {args.out}")


def cmd_align(args):
    model = io.load_model(args.model)
    img = io.load_image(args.image)
    x0 = init_from_bbox(args.bbox, model)
    shape, trace = mix_align(img, x0, model)
    text = io.format_pts(shape)
    if args.out:
        io.write_pts(args.out, shape)
    else:
        sys.stdout.write(text)
    if args.trace:
        record = {
            "shapes": [s.tolist() for s in trace.shapes],
            "gatings": [g.tolist() for g in trace.gatings],
        }
        payload = json.dumps(record, sort_keys=True)
        if args.out:
            Path(str(args.out) + ".trace.json").write_text(payload + "\n")
        else:
            sys.stderr.write(payload + "\n")


def cmd_cluster(args):
    samples = io.load_corpus(args.data)
    if not samples:
        raise InvalidArg(f"no annotated shapes in {args.data}")
    shapes = np.stack([s.shape for s in samples])
    canonical, _ = canonical_normalize(shapes)
    p = shapes.shape[1]
    if args.transform == "euclidean":
        res = cluster_shapes_euclidean(canonical, args.L, seed=args.seed or 0, max_iter=args.max_iter)
    elif args.transform == "identity":
        res = cluster_shapes(canonical, args.L, None, seed=args.seed or 0, max_iter=args.max_iter,
                             transform="identity")
    else:
        groups = default_groups(p)
        if args.constraints:
            conf = io.load_config(args.constraints)
            if "constraint_groups" not in conf:
                raise InvalidArg(f"{args.constraints} has no constraint_groups entry")
            groups = io.parse_groups(conf["constraint_groups"])
        constraints = build_constraints(canonical, groups)
        res = cluster_shapes(canonical, args.L, constraints, seed=args.seed or 0, max_iter=args.max_iter)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for l, proto in enumerate(res.prototypes):
        io.write_pts(out / f"prototype_{l}.pts", proto)
    buf = _stdio.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["image", "cluster"])
    for s, a in zip(samples, res.assignments):
        w.writerow([s.image_path.name, int(a)])
    (out / "assignments.csv").write_text(buf.getvalue())
    print(f"{args.L} clusters, {res.iterations} iterations, converged={res.converged}, "
          f"objective {res.objective_trace[-1]:.6g} -> {out}")


def eval_rows(errors: dict, alphas) -> list:
    """CSV rows: per-image errors, CDF vertices, then NAUC per alpha."""
    rows = [["record", "key", "value"]]
    for name, e in errors.items():
        rows.append(["image", name, repr(float(e))])
    vals = list(errors.values())
    for e, f in cdf_points(vals):
        rows.append(["cdf", repr(e), repr(f)])
    for a in alphas:
        rows.append(["nauc", repr(float(a)), repr(nauc(vals, a))])
    return rows


def cmd_eval(args):
    samples = io.load_corpus(args.data)
    if not samples:
        raise InvalidArg(f"no annotated images in {args.data}")
    left, right = _pupils(args, samples[0].shape.shape[0], args.data)
    model = io.load_model(args.model) if args.model else None
    errors = {}
    for s in samples:
        if model is not None:
            if s.bbox is None:
                raise InvalidArg(f"{s.image_path.name} has no .bbox file")
            pred, _ = mix_align(s.load_image(), init_from_bbox(s.bbox, model), model)
        else:
            pred = io.load_pts(Path(args.predictions) / s.image_path.with_suffix(".pts").name)
        errors[s.image_path.name] = normalized_error(pred, s.shape, left, right)
    buf = _stdio.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(eval_rows(errors, args.alphas))
    if args.out:
        io._atomic_write(args.out, buf.getvalue().encode())
    else:
        sys.stdout.write(buf.getvalue())


_SYNTH_BUILD_KEYS = {"p": int, "n_modes": int, "mode_sigma": float}
_SYNTH_RUN_KEYS = {"n_train": int, "n_test": int, "seed": int}


def synth_settings(conf: dict):
    """Split a synth config into ``(make_synth_model kwargs, run settings)``."""
    build, run = {}, {"n_train": 100, "n_test": 50, "seed": 0}
    model_fields = {f.name: f for f in fields(SynthModel)}
    for key, value in conf.items():
        try:
            if key in _SYNTH_BUILD_KEYS:
                build[key] = _SYNTH_BUILD_KEYS[key](value)
            elif key in _SYNTH_RUN_KEYS:
                run[key] = _SYNTH_RUN_KEYS[key](value)
            elif key in model_fields and key not in ("base_shape", "modes", "mode_sigmas", "presets",
                                                     "constraint_groups"):
                default = getattr(make_synth_model(), key)
                if isinstance(default, tuple):
                    parsed = tuple(type(default[0])(v) if default else float(v)
                                   for v in value.replace(",", " ").split())
                    build[key] = parsed
                else:
                    build[key] = type(default)(value)
            else:
                raise InvalidArg(f"unknown synth config key {key!r}")
        except ValueError as exc:
            if isinstance(exc, InvalidArg):
                raise
            raise InvalidArg(f"bad value for {key!r}: {value!r}") from exc
    return build, run


def cmd_synth(args):
    build, run = synth_settings(io.load_config(args.config) if args.config else {})
    if args.seed is not None:
        run["seed"] = args.seed
    model = make_synth_model(seed=run["seed"], **build)
    out = make_benchmark(model, run["n_train"], run["n_test"], run["seed"], args.out)
    print(f"wrote {run['n_train']} train / {run['n_test']} test instances -> {out}")


def cmd_bench(args):
    settings = BenchSettings(n_train=args.n_train, n_test=args.n_test, M=args.M, K_max=args.K_max,
                             lam=args.lam, alphas=args.alphas, seed=args.seed or 0,
                             gating_temperature=args.temperature)
    results = run_bench(settings)
    print(format_table(results, settings.alphas))
    if args.out:
        buf = _stdio.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", *[f"nauc_{a:g}" for a in settings.alphas], "train_seconds", "eval_seconds"])
        for r in results:
            w.writerow([r.label, *[repr(r.nauc[a]) for a in settings.alphas],
                        f"{r.train_seconds:.1f}", f"{r.eval_seconds:.1f}"])
        io._atomic_write(args.out, buf.getvalue().encode())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixalign", description=__doc__)
    parser.add_argument("--log-level", default="WARNING", help="logging level (default: WARNING)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=None, help="seed for all randomness")
        p.set_defaults(func=func)
        return p

    p = add("train", cmd_train, "train a cascade on a .pts/.pgm corpus")
    p.add_argument("--config", help="key = value training config")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="output model file")

    p = add("align", cmd_align, "align one image from a detector box")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--bbox", required=True, type=_bbox_arg, help="box file or 'l,t,r,b'")
    p.add_argument("--out", help="output .pts (default: stdout)")
    p.add_argument("--trace", action="store_true", help="also emit per-stage shapes and gatings as JSON")

    p = add("cluster", cmd_cluster, "cluster the annotated shapes of a corpus")
    p.add_argument("--data", required=True)
    p.add_argument("-L", type=int, required=True, help="number of clusters")
    p.add_argument("--constraints", help="config file with a constraint_groups entry")
    p.add_argument("--transform", choices=("affine", "identity", "euclidean"), default="affine")
    p.add_argument("--max-iter", type=int, default=50)
    p.add_argument("--out", default="clusters", help="output directory")

    p = add("eval", cmd_eval, "normalized errors, CDF and NAUC of a model or of predictions")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--model")
    src.add_argument("--predictions", help="directory of predicted .pts files named like the corpus")
    p.add_argument("--data", required=True)
    p.add_argument("--alphas", type=_alphas, default=DEFAULT_ALPHAS)
    p.add_argument("--left-pupil", type=_indices)
    p.add_argument("--right-pupil", type=_indices)
    p.add_argument("--out", help="CSV output (default: stdout)")

    p = add("synth", cmd_synth, "write a synthetic train/test corpus")
    p.add_argument("--config", help="key = value synth config")
    p.add_argument("--out", required=True)

    p = add("bench", cmd_bench, "SDM / TI-SDM / MIX ablation on a synthetic corpus")
    p.add_argument("--n-train", type=int, default=500)
    p.add_argument("--n-test", type=int, default=200)
    p.add_argument("--M", type=int, default=6)
    p.add_argument("--K-max", type=int, default=4)
    p.add_argument("--lam", type=float, default=10.0)
    p.add_argument("--temperature", type=float, default=10.0)
    p.add_argument("--alphas", type=_alphas, default=DEFAULT_ALPHAS)
    p.add_argument("--out", help="also write the table as CSV")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (MixError, OSError, json.JSONDecodeError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
