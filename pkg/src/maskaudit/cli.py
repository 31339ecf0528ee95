"""Command-line entry point: ``maskaudit <command> ...``."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import clever, harness, masking, network, oracles


def _load_config(path):
    if path is None:
        return harness.reference_config("ramp")
    with open(path) as fh:
        return harness.ExperimentConfig.from_dict(json.load(fh))


def _load_model(path):
    with open(path) as fh:
        return network.loads(fh.read())


def _parse_point(text):
    if os.path.exists(text):
        with open(text) as fh:
            text = fh.read().strip().splitlines()[0]
    try:
        return np.array([float(v) for v in text.replace(";", ",").split(",")])
    except ValueError:
        raise ValueError(f"cannot parse point {text!r}") from None


def _emit(text, out):
    if out:
        harness.atomic_write(out, text)
    else:
        sys.stdout.write(text)


def _point_setup(args):
    cfg = _load_config(args.config)
    model = _load_model(args.model)
    x0 = _parse_point(args.point)
    if x0.shape[0] != model.input_dim:
        raise ValueError(f"point has dimension {x0.shape[0]}, model expects {model.input_dim}")
    y = args.true_class
    if y is None:
        y = int(network.predict(model, x0)[0])
    return cfg, model, x0, y


def _radius(cfg, model, x0, y, explicit=None):
    if explicit is not None:
        return float(explicit)
    if cfg.clever.R is not None:
        return float(cfg.clever.R)
    dist = harness.analytic_distance(model, x0, y, cfg.clever.p)
    if dist is None:
        raise ValueError("config gives no clever.R and the model is not Dense-only")
    return cfg.clever.R_factor * dist


def cmd_clever(args):
    cfg, model, x0, y = _point_setup(args)
    score = clever.clever_score(model, x0, y, cfg.clever_params(_radius(cfg, model, x0, y)))
    doc = score.to_dict()
    doc["diagnostic"] = clever.masking_diagnostic(score, cfg.clever.threshold)._asdict() \
        if not score.misclassified else None
    _emit(harness.dump_json(doc), args.out)


def cmd_attack(args):
    cfg, model, x0, y = _point_setup(args)
    eps_hi = args.eps_hi if args.eps_hi is not None else cfg.attack.eps_hi
    eps_hi = _radius(cfg, model, x0, y, eps_hi)
    params = cfg.attack_params(eps_hi, args.mode)
    result = oracles.min_perturbation_bisect(model, x0, y, params)
    _emit(harness.dump_json(result.to_dict()), args.out)


def cmd_demo(args):
    cfg = _load_config(args.config)
    report = harness.cmd_demo_masking(cfg)
    csv_path = args.csv or cfg.output.csv
    json_path = args.json or cfg.output.json
    harness.write_report(report, csv_path, json_path)
    for rep in report.reports:
        agg = rep.aggregate
        print(f"{rep.name}: inflation_ratio={agg['inflation_ratio']} "
              f"contradictions={agg['contradiction_count']}/{agg['n_points']} "
              f"flagged={agg['flagged_count']}")


def cmd_plot_ramps(args):
    lo, hi = 0.0, 1.0
    if args.zoom:
        try:
            lo, hi = (float(v) for v in args.zoom.split(","))
        except ValueError:
            raise ValueError(f"--zoom expects 'lo,hi', got {args.zoom!r}") from None
    x, h, hhat = masking.ramp_curve(args.c, args.delta, args.resolution, lo, hi)
    _emit(harness.format_tsv_rows(x, h, hhat), args.out)


def build_parser():
    parser = argparse.ArgumentParser(prog="maskaudit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    demo = sub.add_parser("demo-masking", help="train, mask and audit a toy model")
    demo.add_argument("--config")
    demo.add_argument("--csv", help="row report path (overrides config)")
    demo.add_argument("--json", help="aggregate report path (overrides config)")
    demo.set_defaults(func=cmd_demo)

    for name, func in (("clever", cmd_clever), ("attack", cmd_attack)):
        p = sub.add_parser(name)
        p.add_argument("--model", required=True)
        p.add_argument("--point", required=True, help="comma-separated values or a CSV file")
        p.add_argument("--config")
        p.add_argument("--true-class", type=int)
        p.add_argument("--out")
        p.set_defaults(func=func)
        if name == "attack":
            p.add_argument("--mode", choices=("vanilla", "bpda"), default="vanilla")
            p.add_argument("--eps-hi", type=float)

    plot = sub.add_parser("plot-ramps", help="emit x, h(x), hhat(x) as TSV")
    plot.add_argument("--c", type=int, default=255)
    plot.add_argument("--delta", type=float, default=0.2)
    plot.add_argument("--resolution", type=int, default=10001)
    plot.add_argument("--zoom")
    plot.add_argument("--out")
    plot.set_defaults(func=cmd_plot_ramps)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (OSError, ValueError, TypeError, KeyError, RuntimeError) as exc:
        print(f"maskaudit: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
