"""Command-line entry point.

Subcommands: gen-data, train, eval, sweep, plot. One JSON experiment config
drives everything; a few flags (--seed, --mode, --label-fraction, --out)
override it for scripted sweeps. Exit codes: 0 success, 2 config error,
3 numerical/simulation failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import constraints as cn
from .gridsim import (
    Dataset,
    GridCase,
    InstabilityError,
    generate_dataset,
    load_case,
    read_dataset,
    relabel,
    write_dataset,
)
from .neural import load_checkpoint, save_checkpoint
from .numkit import Rng
from .trainer import (
    TAG_RELABEL,
    TrainConfig,
    TrainingDivergence,
    evaluate,
    read_metrics,
    sweep,
    train,
    write_metrics,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


class ConfigError(ValueError):
    pass


_NUMBER = {"type": "number"}
_OPT_NUMBER = {"type": ["number", "null"]}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["output_dir"],
    "properties": {
        "output_dir": {"type": "string"},
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "grid_file": {"type": ["string", "null"]},
                "samples_per_class": {"type": "integer", "minimum": 1},
                "window": {"type": "integer", "minimum": 3},
                "label_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "val_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "dt": {"type": "number", "exclusiveMinimum": 0},
                "duration": {"type": "number", "exclusiveMinimum": 0},
                "event_time": {"type": "number", "minimum": 0},
                "pm_jitter": {"type": "number", "minimum": 0},
                "seed": {"type": "integer", "minimum": 0},
                "format": {"enum": ["bin", "csv"]},
            },
        },
        "constraints": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "c_swing": _NUMBER,
                "c_sync": _OPT_NUMBER,
                "c_phase": _OPT_NUMBER,
                "gamma": _NUMBER,
                "norm": {"enum": ["l1", "l2"]},
                "per_sample": {"type": "boolean"},
                "tree": {"type": "array"},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["hybrid", "baseline_meanteacher", "baseline_pseudolabel", "supervised_only"]},
                "epochs": {"type": "integer", "minimum": 1},
                "batch_size": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "optimizer": {"enum": ["adam", "sgd_momentum"]},
                "learning_rate": _NUMBER,
                "momentum": _NUMBER,
                "adam_beta1": _NUMBER,
                "adam_beta2": _NUMBER,
                "adam_epsilon": _NUMBER,
                "alpha_max": _NUMBER,
                "ramp_epochs": {"type": "integer", "minimum": 0},
                "ramp_shape": {"enum": ["sigmoid_exp", "linear"]},
                "ema_beta": _NUMBER,
                "ema_step6_literal": {"type": "boolean"},
                "gamma": _NUMBER,
                "sigma": _NUMBER,
                "k_e": {"type": "integer", "minimum": 0},
                "k_m": {"type": "integer", "minimum": 0},
                "dropout": _NUMBER,
                "dropconnect": _NUMBER,
                "augment_noise": _NUMBER,
                "augment_shift": {"type": "integer", "minimum": 0},
                "hidden": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "enc_hidden": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "z_dim": {"type": "integer", "minimum": 1},
                "early_stop_window": {"type": "integer", "minimum": 1},
                "early_stop_tol": _OPT_NUMBER,
                "label_fraction": _OPT_NUMBER,
            },
        },
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "label_fractions": {"type": "array", "items": _NUMBER, "minItems": 1},
                "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
                "modes": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                "jobs": {"type": "integer", "minimum": 1},
            },
        },
    },
}


def load_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"config {path} failed validation: {exc.message}") from exc
    return raw


def _train_config(config: dict, args) -> TrainConfig:
    kwargs = dict(config.get("train", {}))
    for key, value in config.get("constraints", {}).items():
        if key in ("c_swing", "c_sync", "c_phase", "gamma"):
            kwargs[key] = value
        elif key == "norm":
            kwargs["constraint_norm"] = value
        elif key == "per_sample":
            kwargs["per_sample_constraints"] = value
    cfg = TrainConfig(**kwargs)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "mode", None) is not None:
        cfg.mode = args.mode
    if getattr(args, "label_fraction", None) is not None:
        cfg.label_fraction = args.label_fraction
    return cfg


def _dataset_dir(config: dict, args) -> Path:
    if getattr(args, "data", None) is not None:
        return Path(args.data)
    return Path(config["output_dir"]) / "dataset"


def _load_dataset(config: dict, args) -> Dataset:
    d = _dataset_dir(config, args)
    if not (d / "manifest.json").exists():
        raise FileNotFoundError(f"dataset not found under {d}; run gen-data first")
    return read_dataset(d)


def cmd_gen_data(args) -> int:
    config = load_config(args.config)
    data_cfg = dict(config.get("data", {}))
    if args.seed is not None:
        data_cfg["seed"] = args.seed
    grid_file = data_cfg.pop("grid_file", None)
    fmt = data_cfg.pop("format", "bin")
    seed = data_cfg.pop("seed", 0)
    event_time = data_cfg.pop("event_time", 0.5)
    case = load_case(grid_file, event_time=event_time)
    dataset = generate_dataset(case, Rng(seed), **data_cfg)
    outdir = Path(args.out) if args.out else Path(config["output_dir"]) / "dataset"
    manifest_path = write_dataset(dataset, outdir, fmt=fmt)
    counts = np.bincount(dataset.labels_true(), minlength=dataset.class_count)
    labeled = np.bincount(
        dataset.labels_true()[dataset.labeled_indices()], minlength=dataset.class_count
    )
    print(f"wrote {manifest_path}")
    print(f"samples per class: {counts.tolist()}")
    print(f"labeled train samples per class: {labeled.tolist()} (total {labeled.sum()})")
    print(f"validation samples: {len(dataset.val_indices())}, unlabeled sentinel count: {int((dataset.labels < 0).sum())}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = load_config(args.config)
    cfg = _train_config(config, args)
    dataset = _load_dataset(config, args)
    if cfg.label_fraction is not None and cfg.label_fraction != dataset.manifest["label_fraction"]:
        dataset = relabel(dataset, cfg.label_fraction, Rng(cfg.seed, TAG_RELABEL))
    model, metrics = train(dataset, cfg)
    outdir = Path(args.out) if args.out else Path(config["output_dir"])
    outdir.mkdir(parents=True, exist_ok=True)
    ckpt = outdir / "checkpoint.bin"
    save_checkpoint(
        ckpt,
        {
            "primary": model.primary,
            "secondary": model.secondary,
            "latent_encoder": model.latent_encoder,
            "latent_decoder": model.latent_decoder,
        },
    )
    metrics_path = outdir / "metrics.jsonl"
    write_metrics(
        metrics_path,
        metrics,
        header={"mode": cfg.mode, "label_fraction": dataset.manifest["label_fraction"], "seed": cfg.seed},
    )
    last = metrics[-1]
    print(f"trained {cfg.mode} for {len(metrics)} epochs; final val accuracy {last.accuracy:.4f}")
    print(f"checkpoint: {ckpt}")
    print(f"metrics: {metrics_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    nets = load_checkpoint(args.checkpoint)
    if "primary" not in nets:
        raise ValueError("checkpoint does not contain a primary network")
    dataset = read_dataset(args.data)
    result = evaluate(nets["primary"], dataset, split=args.split)
    print(json.dumps(result, indent=1))
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = load_config(args.config)
    cfg = _train_config(config, args)
    dataset = _load_dataset(config, args)
    sweep_cfg = config.get("sweep", {})
    outdir = Path(args.out) if args.out else Path(config["output_dir"]) / "sweep"
    rows, _ = sweep(
        dataset,
        cfg,
        label_fractions=tuple(sweep_cfg.get("label_fractions", (0.0125, 0.025, 0.05, 0.10))),
        seeds=tuple(sweep_cfg.get("seeds", (0, 1, 2, 3, 4))),
        modes=tuple(sweep_cfg.get("modes", ("baseline_meanteacher", "hybrid"))),
        jobs=args.jobs if args.jobs else sweep_cfg.get("jobs", 1),
        outdir=outdir,
    )
    for r in rows:
        print(
            f"{r['mode']:22s} fraction={r['label_fraction']:<7g} n={r['n_labels']:<5d} "
            f"acc={r['mean_acc']:.4f} +/- {r['std_acc']:.4f}"
        )
    print(f"results: {outdir / 'results.csv'}")
    return EXIT_OK


def _svg_plot(curves: list[tuple[str, list[float]]], width=720, height=480) -> str:
    """Error-rate-vs-epoch figure as plain SVG markup (one polyline per run)."""
    margin = 60
    pw, ph = width - 2 * margin, height - 2 * margin
    max_epoch = max(max(len(c[1]) - 1, 1) for c in curves)
    max_err = max(max(c[1]) for c in curves) or 1.0
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]

    def sx(e):
        return margin + pw * e / max_epoch

    def sy(v):
        return margin + ph * (1.0 - v / max_err)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
        f'<text x="{width / 2:.0f}" y="{height - 15}" text-anchor="middle" font-size="14">epoch</text>',
        f'<text x="18" y="{height / 2:.0f}" text-anchor="middle" font-size="14" '
        f'transform="rotate(-90 18 {height / 2:.0f})">validation error rate</text>',
    ]
    for k in range(5):
        v = max_err * k / 4
        y = sy(v)
        parts.append(f'<line x1="{margin - 4}" y1="{y:.1f}" x2="{margin}" y2="{y:.1f}" stroke="black"/>')
        parts.append(f'<text x="{margin - 8}" y="{y + 4:.1f}" text-anchor="end" font-size="11">{v:.3f}</text>')
    for k in range(5):
        e = max_epoch * k / 4
        x = sx(e)
        parts.append(
            f'<line x1="{x:.1f}" y1="{height - margin}" x2="{x:.1f}" y2="{height - margin + 4}" stroke="black"/>'
        )
        parts.append(
            f'<text x="{x:.1f}" y="{height - margin + 18}" text-anchor="middle" font-size="11">{e:.0f}</text>'
        )
    for i, (label, errs) in enumerate(curves):
        color = colors[i % len(colors)]
        pts = " ".join(f"{sx(e):.2f},{sy(v):.2f}" for e, v in enumerate(errs))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = margin + 18 + 18 * i
        parts.append(
            f'<line x1="{width - margin - 150}" y1="{ly - 4}" x2="{width - margin - 120}" y2="{ly - 4}" '
            f'stroke="{color}" stroke-width="1.5"/>'
        )
        parts.append(f'<text x="{width - margin - 112}" y="{ly}" font-size="12">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def cmd_plot(args) -> int:
    curves = []
    for path in args.metrics:
        header, records = read_metrics(path)
        if not records:
            raise ValueError(f"no metric records in {path}")
        label = header.get("mode", Path(path).stem)
        curves.append((label, [r["error_rate"] for r in records]))
    svg = _svg_plot(curves)
    Path(args.out).write_text(svg)
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridssl", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="simulate outages and write the dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one model and write checkpoint + metrics")
    t.add_argument("--config", required=True)
    t.add_argument("--data", help="dataset directory (default: <output_dir>/dataset)")
    t.add_argument("--seed", type=int)
    t.add_argument("--mode", choices=["hybrid", "baseline_meanteacher", "baseline_pseudolabel", "supervised_only"])
    t.add_argument("--label-fraction", dest="label_fraction", type=float)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val", choices=["val", "train", "all"])
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="mode x label-fraction x seed grid; writes results.csv")
    s.add_argument("--config", required=True)
    s.add_argument("--data")
    s.add_argument("--seed", type=int)
    s.add_argument("--jobs", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    pl = sub.add_parser("plot", help="overlay error-rate curves from metrics files as SVG")
    pl.add_argument("metrics", nargs="+")
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InstabilityError, TrainingDivergence) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
