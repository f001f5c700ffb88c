"""Command-line surface: explain single images, run the pointing game and
ablation studies, emit heatmaps and reports.

Exit codes: 0 success, 1 usage error, 2 I/O error, 3 numerical refusal.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluation
from .contrastive import CLRP1, CLRP2, clrp_explain, neuron_explain
from .evaluation import (METHODS, ablation_report_csv, ablation_report_json,
                         ablation_study, load_annotations, mean_pixel_image,
                         neuron_ablation_matrix, pointing_report_csv,
                         pointing_report_json, run_pointing)
from .imaging import load_rgb, render_u8, resize_rgb, write_pgm, write_png_heatmap
from .inference import forward, predict_topk, preprocess
from .model import ModelFormatError, load_model, model_info
from .relevance import (ExplanationRefused, NumericalError, OutputRelevance,
                        RuleConfig, guided_backprop, lrp_explain, vanilla_gradient)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_NUMERICAL = 3

MODEL_DIR_ENV = "CLRP_MODEL_DIR"

log = logging.getLogger("clrp")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _sig9(value: float) -> float:
    return float(f"{value:.9g}")


def _resolve_model_path(arg: str | None) -> Path:
    if arg:
        return Path(arg)
    env = os.environ.get(MODEL_DIR_ENV)
    if env:
        return Path(env)
    raise CliError(f"no model given: pass --model or set {MODEL_DIR_ENV}", EXIT_USAGE)


def _load_model(arg: str | None):
    path = _resolve_model_path(arg)
    try:
        return load_model(path)
    except FileNotFoundError as exc:
        raise CliError(str(exc), EXIT_IO) from exc
    except ModelFormatError as exc:
        raise CliError(f"bad model container: {exc}", EXIT_IO) from exc


def _load_input(model, image_path: str, resize: str) -> np.ndarray:
    try:
        image = load_rgb(image_path)
    except (FileNotFoundError, OSError) as exc:
        raise CliError(f"cannot read image {image_path}: {exc}", EXIT_IO) from exc
    _, h, w = model.input_shape
    if image.shape[0] != h or image.shape[1] != w:
        image = resize_rgb(image, h, w, method=resize)
    return preprocess(image, model)


def _rules(args) -> RuleConfig:
    return RuleConfig(default_rule=args.rule,
                      first_conv_rule=None if args.no_zbeta else "zbeta",
                      epsilon=args.epsilon)


def _parse_targets(args, trace, model) -> list[int]:
    spec = args.target
    if spec.startswith("top"):
        k = int(spec[3:] or "1")
        return [p.class_index for p in predict_topk(trace, k)]
    try:
        targets = [int(t) for t in spec.split(",")]
    except ValueError as exc:
        raise CliError(f"bad --target {spec!r}", EXIT_USAGE) from exc
    for t in targets:
        if not 0 <= t < model.num_classes:
            raise CliError(f"target {t} out of range", EXIT_USAGE)
    return targets


def _safe_name(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in name)


def cmd_explain(args) -> int:
    model = _load_model(args.model)
    x = _load_input(model, args.image, args.resize)
    trace = forward(model, x)
    rules = _rules(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = _safe_name(Path(args.image).stem)

    jobs: list[tuple[str, object]] = []
    if args.multi_class:
        try:
            targets = [int(t) for t in args.multi_class.split(",")]
        except ValueError as exc:
            raise CliError(f"bad --multi-class {args.multi_class!r}", EXIT_USAGE) from exc
        jobs.append(("multi", targets))
    else:
        for t in _parse_targets(args, trace, model):
            jobs.append(("single", t))

    written = []
    for kind, target in jobs:
        try:
            if kind == "multi":
                out_rel = OutputRelevance.multi_class(trace.logits, target)
                smap = lrp_explain(model, trace, out_rel, rules)
                label = "multi_" + "_".join(str(t) for t in target)
                logit = float(out_rel.values.sum())
            else:
                logit = float(trace.logits[target])
                if args.method == "lrp":
                    out_rel = OutputRelevance.single_class(trace.logits, target)
                    if logit <= 0:
                        raise ExplanationRefused(
                            f"class {target} has non-positive logit {logit}")
                    smap = lrp_explain(model, trace, out_rel, rules)
                elif args.method == "clrp1":
                    smap = clrp_explain(model, trace, target, CLRP1, rules)
                elif args.method == "clrp2":
                    smap = clrp_explain(model, trace, target, CLRP2, rules)
                elif args.method == "grad":
                    smap = vanilla_gradient(model, trace, target)
                else:
                    smap = guided_backprop(model, trace, target)
                label = _safe_name(model.class_names[target])
        except ExplanationRefused as exc:
            raise CliError(str(exc), EXIT_NUMERICAL) from exc
        except NumericalError as exc:
            raise CliError(str(exc), EXIT_NUMERICAL) from exc

        sidecar = {
            "method": smap.method,
            "target": smap.target,
            "logit": _sig9(logit),
            "total_relevance": _sig9(smap.total_relevance),
        }
        if smap.diagnostics is not None:
            sidecar["conservation_residual"] = _sig9(
                smap.diagnostics.conservation_residual)
            sidecar["padding_leakage"] = _sig9(smap.diagnostics.padding_leakage)
        base = out_dir / f"{stem}_{args.method}_{label}"
        gray = render_u8(smap.values)
        write_pgm(base.with_suffix(".pgm"), gray)
        if args.png:
            write_png_heatmap(base.with_suffix(".png"), gray, colormap=args.colormap)
        base.with_suffix(".json").write_text(
            json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
        written.append(base.with_suffix(".pgm"))
    for path in written:
        print(path)
    return EXIT_OK


def cmd_info(args) -> int:
    model = _load_model(args.model)
    print(model_info(model))
    return EXIT_OK


def _load_dataset(args):
    try:
        return load_annotations(args.annotations)
    except FileNotFoundError as exc:
        raise CliError(str(exc), EXIT_IO) from exc
    except evaluation.AnnotationError as exc:
        raise CliError(str(exc), EXIT_IO) from exc


def _methods(args) -> list[str]:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m not in METHODS:
            raise CliError(f"unknown method {m!r}; choose from {METHODS}", EXIT_USAGE)
    return methods


def _center_pointing(model, dataset, p_levels):
    """Naive baseline: the foreground is the single center pixel at every p."""
    _, h, w = model.input_shape
    center = np.zeros((h, w), dtype=bool)
    center[h // 2, w // 2] = True
    hits = sum(evaluation.pointing_hit(center, s) for s in dataset.samples)
    return evaluation.PointingResult("center", list(p_levels),
                                     [hits] * len(p_levels),
                                     [len(dataset) - hits] * len(p_levels))


def cmd_pointing(args) -> int:
    model = _load_model(args.model)
    dataset = _load_dataset(args)
    p_levels = [float(p) for p in args.energy.split(",")]
    results = run_pointing(model, dataset, _methods(args), p_levels, _rules(args),
                           mode=args.mode, workers=args.workers)
    if args.center_baseline:
        results.append(_center_pointing(model, dataset, p_levels))
    Path(args.out_json).write_text(pointing_report_json(results))
    Path(args.out_csv).write_text(pointing_report_csv(results))
    for r in results:
        accs = " ".join(f"{p:g}:{a:.3f}" for p, a in zip(r.levels, r.accuracy))
        log.info("pointing %-8s %s", r.method, accs)
    return EXIT_OK


def cmd_ablate(args) -> int:
    model = _load_model(args.model)
    dataset = _load_dataset(args)
    results = ablation_study(model, dataset, _methods(args), _rules(args),
                             patch_size=args.patch, seed=args.seed)
    Path(args.out_json).write_text(ablation_report_json(results))
    Path(args.out_csv).write_text(ablation_report_csv(results))
    for r in results:
        log.info("ablation %-8s mean drop %.4f", r.method, r.mean_drop)
    return EXIT_OK


def cmd_neurons(args) -> int:
    model = _load_model(args.model)
    dataset = _load_dataset(args)
    x = _load_input(model, args.image, args.resize)
    neurons = [int(n) for n in args.neurons.split(",")]
    mean_image = mean_pixel_image(model, dataset)
    rules = _rules(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        matrix = neuron_ablation_matrix(model, x, args.layer, neurons, rules,
                                        mean_image, patch_size=args.patch)
        trace = forward(model, x)
        for n in neurons:
            smap = neuron_explain(model, trace, args.layer, n, rules)
            write_pgm(out_dir / f"neuron_{args.layer}_{n}.pgm",
                      render_u8(smap.values))
    except ExplanationRefused as exc:
        raise CliError(str(exc), EXIT_NUMERICAL) from exc
    lines = ["ablated\\observed," + ",".join(str(n) for n in neurons)]
    for i, n in enumerate(neurons):
        row = ",".join(f"{_sig9(v)}" for v in matrix[i])
        lines.append(f"{n},{row}")
    (out_dir / "ablation_matrix.csv").write_text("\n".join(lines) + "\n")
    print(out_dir / "ablation_matrix.csv")
    return EXIT_OK


def _add_common(parser):
    parser.add_argument("--model", help=f"model container directory "
                        f"(default: ${MODEL_DIR_ENV})")
    parser.add_argument("--rule", choices=["zplus", "z"], default="zplus")
    parser.add_argument("--no-zbeta", action="store_true",
                        help="use the default rule at the first conv layer too")
    parser.add_argument("--epsilon", type=float, default=1e-9)
    parser.add_argument("--resize", choices=["bilinear", "nearest"],
                        default="bilinear")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clrp")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("info", help="describe a model container")
    p.add_argument("--model")
    p.set_defaults(func=cmd_info)

    p = sub.add_parser("explain", help="explain one image")
    _add_common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--method", choices=list(METHODS), default="lrp")
    p.add_argument("--target", default="top1",
                   help="topK or comma-separated class indices")
    p.add_argument("--multi-class", default=None,
                   help="comma-separated class indices for one multi-class map")
    p.add_argument("--out", default=".")
    p.add_argument("--png", action="store_true")
    p.add_argument("--colormap", action="store_true")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("pointing", help="energy-thresholded pointing game")
    _add_common(p)
    p.add_argument("--annotations", required=True)
    p.add_argument("--methods", default="lrp,clrp1,clrp2,grad,guided")
    p.add_argument("--energy", default="0.25,0.5,0.75")
    p.add_argument("--mode", choices=["containment", "overlap"],
                   default="containment")
    p.add_argument("--center-baseline", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out-json", default="pointing.json")
    p.add_argument("--out-csv", default="pointing.csv")
    p.set_defaults(func=cmd_pointing)

    p = sub.add_parser("ablate", help="mean-patch ablation study")
    _add_common(p)
    p.add_argument("--annotations", required=True)
    p.add_argument("--methods", default="lrp,clrp1,clrp2,grad,guided")
    p.add_argument("--patch", type=int, default=9)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out-json", default="ablation.json")
    p.add_argument("--out-csv", default="ablation.csv")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("neurons", help="per-neuron contrastive maps + ablation matrix")
    _add_common(p)
    p.add_argument("--annotations", required=True,
                   help="dataset used for the mean fill image")
    p.add_argument("--image", required=True)
    p.add_argument("--layer", required=True)
    p.add_argument("--neurons", required=True, help="comma-separated indices")
    p.add_argument("--patch", type=int, default=9)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_neurons)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ExplanationRefused as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
