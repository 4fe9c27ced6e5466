"""Command-line entry point: ``neurofuse {gen,cv,ablate,missing,attribute}``.

Training subcommands take a cohort directory written by ``gen`` (``--cohort``)
or generate one in memory from the ``--mode/--n/--data-seed`` options.  The
training configuration comes from ``--config`` (JSON with ``TrainConfig``
field names), then ``--set key=value`` overrides, then the
``NEUROFUSE_SEED`` environment variable for the seed.

Exit codes: 0 success, 2 configuration or validation error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import attribution as attr
from . import encoders as enc
from .cohort import MODES, Cohort, generate_cohort, load_cohort, save_cohort
from .config import TrainConfig
from .errors import (CapacityError, ConfigError, FormatError, InputError, NeurofuseError,
                     ParcellationError, StratificationError)
from .metrics import METRICS, write_metrics_csv
from .trainer import CVResult, prepare_inputs, run_cv

logger = logging.getLogger("neurofuse")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
CONFIG_ERRORS = (ConfigError, InputError, StratificationError, FormatError,
                 CapacityError, ParcellationError)

SEED_ENV = "NEUROFUSE_SEED"
MASK_RATES = (0.0, 0.1, 0.3, 0.5)
OVERLAP_FRACTION = 0.25
ROI_KEYS = ("roi_encoder", "d_roi", "gcn_hidden", "mlp_hidden", "quantiles")
IMG_KEYS = ("d_img", "img_channels")


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _seed_from_env() -> Optional[int]:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def build_config(args, extra: Sequence[str] = ()) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    cfg = cfg.with_overrides(list(extra) + list(args.set or []))
    env_seed = _seed_from_env()
    if env_seed is not None:
        cfg = cfg.replace(seed=env_seed)
    return cfg


def _dims(raw: str):
    try:
        dims = tuple(int(x) for x in raw.split(","))
    except ValueError:
        raise ConfigError(f"--dims must look like 16,16,16, got {raw!r}") from None
    if len(dims) != 3:
        raise ConfigError(f"--dims needs three extents, got {raw!r}")
    return dims


def obtain_cohort(args) -> Cohort:
    if args.cohort:
        return load_cohort(args.cohort)
    return generate_cohort(args.n, args.rois, _dims(args.dims), args.mode, args.noise,
                           args.data_seed)


def _cohort_echo(args, cohort: Cohort) -> Dict:
    if args.cohort:
        return {"path": str(args.cohort), "n": len(cohort.subjects)}
    return {"mode": args.mode, "n": args.n, "rois": args.rois, "dims": list(_dims(args.dims)),
            "noise": args.noise, "seed": args.data_seed}


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _agg_dict(result: CVResult) -> Dict:
    return {m: {"mean": result.aggregate[m][0], "std": result.aggregate[m][1]} for m in METRICS}


def _notice_ignored(cfg: TrainConfig, explicit: Sequence[str]) -> None:
    """Single-branch runs ignore the other branch's settings; say so."""
    if cfg.branches == "joint":
        return
    unused = ROI_KEYS if cfg.branches == "img" else IMG_KEYS
    keys = {s.split("=", 1)[0].strip() for s in explicit}
    ignored = sorted(keys & set(unused))
    kind = "ROI" if cfg.branches == "img" else "imaging"
    if ignored:
        logger.warning("%s-only run: ignoring %s settings %s", cfg.branches, kind, ", ".join(ignored))
    else:
        logger.info("%s-only run: %s settings are ignored", cfg.branches, kind)
    if cfg.lam > 0:
        logger.info("single-branch run: lam=%g is not applied", cfg.lam)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    seed = _seed_from_env()
    seed = args.seed if seed is None else seed
    cohort = generate_cohort(args.n, args.rois, _dims(args.dims), args.mode, args.noise, seed)
    save_cohort(cohort, _out_dir(args))
    logger.info("wrote %d subjects to %s", len(cohort.subjects), args.out)
    return EXIT_OK


def _shortcut_overrides(args) -> List[str]:
    extra = []
    for key in ("branches", "fusion", "roi_encoder"):
        value = getattr(args, key, None)
        if value is not None:
            extra.append(f"{key}={value}")
    return extra


def cmd_cv(args) -> int:
    extra = _shortcut_overrides(args)
    cfg = build_config(args, extra)
    _notice_ignored(cfg, extra + list(args.set or []))
    cohort = obtain_cohort(args)
    out = _out_dir(args)
    result = run_cv(cohort, cfg, keep_params=args.checkpoints)
    write_metrics_csv(out / "metrics.csv", result.reports)
    _write_json(out / "summary.json", {
        "config": cfg.to_dict(),
        "cohort": _cohort_echo(args, cohort),
        "folds": [r.to_dict() for r in result.reports],
        "aggregate": _agg_dict(result),
        "alignment_gaps": [r.alignment_gap for r in result.reports],
    })
    if args.checkpoints:
        ckpt = out / "checkpoints"
        ckpt.mkdir(exist_ok=True)
        for f, params in enumerate(result.params):
            enc.write_checkpoint(ckpt / f"fold{f}.ckpt", params)
    logger.info("acc %.4f +- %.4f", *result.aggregate["acc"])
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = build_config(args)
    cohort = obtain_cohort(args)
    inputs = prepare_inputs(cohort, cfg.quantiles)
    out = _out_dir(args)
    lines = ["roi_encoder,fusion,acc_mean,acc_std,auc_mean,auc_std,f1_mean,f1_std"]
    cells = {}
    for roi_encoder in ("mlp", "gcn"):
        for fusion in ("concat", "contra"):
            cell = cfg.replace(roi_encoder=roi_encoder, fusion=fusion, branches="joint")
            result = run_cv(cohort, cell, inputs=inputs)
            agg = result.aggregate
            lines.append(f"{roi_encoder},{fusion}," + ",".join(
                f"{agg[m][0]:.4f},{agg[m][1]:.4f}" for m in METRICS))
            cells[f"{roi_encoder}-{fusion}"] = _agg_dict(result)
            logger.info("%s/%s acc %.4f", roi_encoder, fusion, agg["acc"][0])
    with open(out / "table.csv", "w") as fh:
        fh.write("\n".join(lines) + "\n")
    _write_json(out / "summary.json", {"config": cfg.to_dict(),
                                       "cohort": _cohort_echo(args, cohort), "cells": cells})
    return EXIT_OK


def curve_svg(rows: Sequence[Dict], width: int = 480, height: int = 320) -> str:
    """Line chart of accuracy against masking rate with shaded +-1 std bands."""
    left, right, top, bottom = 56, 16, 24, 44
    pw, ph = width - left - right, height - top - bottom
    rates = sorted({r["rate"] for r in rows})
    x_max = max(rates) if rates and max(rates) > 0 else 1.0

    def sx(rate):
        return left + pw * rate / x_max

    def sy(acc):
        return top + ph * (1.0 - min(max(acc, 0.0), 1.0))

    colors = {"img": "#1f77b4", "roi": "#d62728"}
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = sy(tick)
        parts.append(f'<text x="{left - 6}" y="{y + 4:.2f}" font-size="10" '
                     f'text-anchor="end">{tick:.2f}</text>')
    for rate in rates:
        parts.append(f'<text x="{sx(rate):.2f}" y="{top + ph + 14}" font-size="10" '
                     f'text-anchor="middle">{rate:g}</text>')
    parts.append(f'<text x="{left + pw / 2:.2f}" y="{height - 8}" font-size="11" '
                 f'text-anchor="middle">masking rate</text>')
    parts.append(f'<text x="14" y="{top + ph / 2:.2f}" font-size="11" text-anchor="middle" '
                 f'transform="rotate(-90 14 {top + ph / 2:.2f})">accuracy</text>')
    for i, branch in enumerate(("img", "roi")):
        series = sorted((r for r in rows if r["branch"] == branch), key=lambda r: r["rate"])
        if not series:
            continue
        upper = [f"{sx(r['rate']):.2f},{sy(r['acc_mean'] + r['acc_std']):.2f}" for r in series]
        lower = [f"{sx(r['rate']):.2f},{sy(r['acc_mean'] - r['acc_std']):.2f}"
                 for r in reversed(series)]
        line = [f"{sx(r['rate']):.2f},{sy(r['acc_mean']):.2f}" for r in series]
        color = colors[branch]
        parts.append(f'<polygon points="{" ".join(upper + lower)}" fill="{color}" '
                     f'fill-opacity="0.2" stroke="none"/>')
        parts.append(f'<polyline points="{" ".join(line)}" fill="none" stroke="{color}" '
                     f'stroke-width="2"/>')
        parts.append(f'<text x="{left + pw - 4}" y="{top + 12 + 14 * i}" font-size="10" '
                     f'text-anchor="end" fill="{color}">{branch} masked</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_missing(args) -> int:
    cfg = build_config(args).replace(branches="joint")
    cohort = obtain_cohort(args)
    inputs = prepare_inputs(cohort, cfg.quantiles)
    out = _out_dir(args)
    rows = []
    for branch in ("img", "roi"):
        for rate in MASK_RATES:
            result = run_cv(cohort, cfg.replace(mask_branch=branch, mask_rate=rate), inputs=inputs)
            mean, std = result.aggregate["acc"]
            rows.append({"branch": branch, "rate": rate, "acc_mean": mean, "acc_std": std})
            logger.info("%s masked at %.1f: acc %.4f +- %.4f", branch, rate, mean, std)
    lines = ["branch,rate,acc_mean,acc_std"] + [
        f"{r['branch']},{r['rate']:.1f},{r['acc_mean']:.4f},{r['acc_std']:.4f}" for r in rows]
    with open(out / "curve.csv", "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(out / "curve.svg", "w") as fh:
        fh.write(curve_svg(rows))
    return EXIT_OK


def cmd_attribute(args) -> int:
    cfg = build_config(args)
    cohort = obtain_cohort(args)
    inputs = prepare_inputs(cohort, cfg.quantiles)
    out = _out_dir(args)
    averaged: Dict[str, Dict[str, attr.ContributionMap]] = {}
    for branches, tag in (("joint", "joint"), ("img", "imaging"), ("roi", "roi")):
        maps, _ = attr.cv_maps(cohort, cfg.replace(branches=branches), inputs=inputs)
        averaged[tag] = {}
        for cls in attr.CLASS_TAGS:
            cmap = attr.class_average_map(maps, cls)
            averaged[tag][cls] = cmap
            attr.write_map_csv(out / f"map_{tag}_{cls}.csv", cmap)
    overlaps = {}
    for a, b in (("joint", "imaging"), ("joint", "roi"), ("imaging", "roi")):
        overlaps[f"{a}-{b}"] = {cls: attr.branch_overlap(averaged[a][cls], averaged[b][cls],
                                                         OVERLAP_FRACTION)
                                for cls in attr.CLASS_TAGS}
    _write_json(out / "overlap.json", {"top_fraction": OVERLAP_FRACTION, "pairs": overlaps})
    attr.write_summary_json(out / "summary.json",
                            [m for per in averaged.values() for m in per.values()])
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_cohort_options(p: argparse.ArgumentParser, gen: bool = False) -> None:
    p.add_argument("--mode", default="easy", choices=MODES, help="synthetic cohort mode")
    p.add_argument("--n", type=int, default=200, help="number of subjects")
    p.add_argument("--rois", type=int, default=16, help="number of ROIs in the atlas")
    p.add_argument("--dims", default="16,16,16", help="volume extents, comma separated")
    p.add_argument("--noise", type=float, default=0.1, help="voxel noise level")
    if gen:
        p.add_argument("--seed", type=int, default=0, help="generator seed")
    else:
        p.add_argument("--cohort", help="cohort directory written by gen")
        p.add_argument("--data-seed", type=int, default=0,
                       help="generator seed when no --cohort is given")


def _add_train_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of TrainConfig fields")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config field (repeatable)")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="neurofuse",
                                     description="Dual-view contrastive fusion experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic cohort on disk")
    _add_cohort_options(p, gen=True)
    p.add_argument("--out", required=True, help="output cohort directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("cv", help="cross-validate one configuration")
    _add_cohort_options(p)
    _add_train_options(p)
    p.add_argument("--branches", choices=("joint", "img", "roi"))
    p.add_argument("--fusion", choices=("concat", "contra"))
    p.add_argument("--roi-encoder", dest="roi_encoder", choices=("gcn", "mlp"))
    p.add_argument("--checkpoints", action="store_true", help="also write per-fold checkpoints")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cv)

    for name, func, text in (("ablate", cmd_ablate, "ROI encoder x fusion ablation table"),
                             ("missing", cmd_missing, "accuracy under missing-view masking"),
                             ("attribute", cmd_attribute, "class-average contribution maps")):
        p = sub.add_parser(name, help=text)
        _add_cohort_options(p)
        _add_train_options(p)
        p.add_argument("--out", required=True)
        p.set_defaults(func=func)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CONFIG_ERRORS as exc:
        print(f"neurofuse {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NeurofuseError, ArithmeticError, ValueError, OSError) as exc:
        print(f"neurofuse {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
