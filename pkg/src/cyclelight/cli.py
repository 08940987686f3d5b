"""Operator entry points: fixture | train | enhance | eval | ablate.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure,
5 unmet acceptance threshold.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import __version__, evalkit, fixtures, imaging
from .adapter import ADAPTER_MODES
from .config import ConfigError, TrainerConfig, config_from_dict, config_to_dict, load_config
from .losses import read_trace
from .trainer import CheckpointError, DataError, NumericError, load_checkpoint, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_THRESHOLD = 5

OUTPUT_ROOT_ENV = "CYCLELIGHT_OUTPUT_ROOT"


class ThresholdError(Exception):
    """An acceptance threshold requested on the command line was not met."""


def _resolve_out(path: str) -> str:
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _prepare_out_dir(path: str, overwrite: bool) -> str:
    path = _resolve_out(path)
    if os.path.isdir(path) and os.listdir(path) and not overwrite:
        raise DataError(
            f"output directory {path} exists and is not empty; pass --overwrite to replace its contents"
        )
    os.makedirs(path, exist_ok=True)
    return path


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    """One flag per TrainerConfig field; unset flags fall through to the config file."""
    for f in dataclasses.fields(TrainerConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool":
            parser.add_argument(flag, default=None, action=argparse.BooleanOptionalAction)
        elif f.type == "int":
            parser.add_argument(flag, default=None, type=int)
        elif f.type == "float":
            parser.add_argument(flag, default=None, type=float)
        else:
            parser.add_argument(flag, default=None, type=str)


def _config_from_args(args: argparse.Namespace) -> TrainerConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else TrainerConfig()
    data = config_to_dict(cfg)
    for f in dataclasses.fields(TrainerConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            data[f.name] = value
    return config_from_dict(data, source="<command line>")


def _plot_loss_curves(trace_paths: dict[str, str], out_path: str, column: str = "cycle") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    for label, path in trace_paths.items():
        reports = read_trace(path)
        ax.plot([r.step for r in reports], [getattr(r, column) for r in reports], label=label)
    ax.set_xlabel("step")
    ax.set_ylabel(column)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)


def _save_grid(rows: list[list[np.ndarray]], labels: list[str], out_path: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = len(rows)
    cols = len(rows[0])
    fig, axes = plt.subplots(n, cols, figsize=(2.0 * cols, 2.0 * n), squeeze=False)
    for r in range(n):
        for c in range(cols):
            axes[r][c].imshow(rows[r][c])
            axes[r][c].axis("off")
            if r == 0:
                axes[r][c].set_title(labels[c], fontsize=9)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)


# -- subcommands --------------------------------------------------------------

def cmd_fixture(args) -> int:
    out_dir = _prepare_out_dir(args.out_dir, args.overwrite)
    if args.gamma_min > args.gamma_max:
        raise ConfigError(f"field gamma range: min {args.gamma_min} > max {args.gamma_max}")
    manifest = fixtures.generate_fixture_tree(
        out_dir,
        train_per_side=args.train_per_side,
        eval_count=args.eval_count,
        classifier_count=args.classifier_count,
        gamma_range=(args.gamma_min, args.gamma_max),
        noise_sigma=args.noise_sigma,
        seed=args.seed,
        size=args.size,
    )
    print(f"fixture tree written to {out_dir} "
          f"({manifest['counts']['low']}+{manifest['counts']['normal']} train, "
          f"{manifest['counts']['eval']} eval, {manifest['counts']['classifier']} classifier)")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    out_dir = _prepare_out_dir(args.out, args.overwrite)
    result = train(cfg, args.data, out_dir)
    _plot_loss_curves({"cycle": result.trace_path}, os.path.join(out_dir, "loss_curve.png"))
    print(f"training complete: checkpoint at {result.checkpoint_dir}")
    print(f"loss trace: {result.trace_path}")
    return EXIT_OK


def cmd_enhance(args) -> int:
    out_dir = _prepare_out_dir(args.out_dir, args.overwrite)
    enhancer = evalkit.load_enhancer(args.checkpoint)
    names = sorted(n for n in os.listdir(args.in_dir) if n.endswith(".png"))
    if not names:
        raise DataError(f"no .png images found in {args.in_dir}")
    for name in names:
        img = imaging.load_image(os.path.join(args.in_dir, name))
        imaging.save_image(enhancer(img), os.path.join(out_dir, name))
    print(f"enhanced {len(names)} images into {out_dir}")
    return EXIT_OK


def _evaluate_checkpoint(checkpoint: str, fixture_root: str, classifier_seed: int) -> dict:
    enhancer = evalkit.load_enhancer(checkpoint)
    darks, brights, labels = fixtures.load_eval_split(fixture_root)
    cls_images, cls_labels = fixtures.load_classifier_split(fixture_root)
    evaluator = evalkit.train_toy_classifier(cls_images, cls_labels,
                                             fixtures.CLASS_NAMES, seed=classifier_seed)
    enhanced = [enhancer(d) for d in darks]
    rows = []
    for i, (dark, bright, enh) in enumerate(zip(darks, brights, enhanced)):
        rows.append({
            "index": i,
            "dark_psnr": evalkit.psnr(dark, bright),
            "enhanced_psnr": evalkit.psnr(enh, bright),
            "dark_ssim": evalkit.ssim(dark, bright),
            "enhanced_ssim": evalkit.ssim(enh, bright),
        })
    gefu = evalkit.gefu_evaluate(darks, labels, enhancer, evaluator)
    bright_hits = sum(evaluator.predict(b) == y for b, y in zip(brights, labels))
    summary = {
        "checkpoint": checkpoint,
        "count": len(rows),
        "dark_psnr": float(np.mean([r["dark_psnr"] for r in rows])),
        "enhanced_psnr": float(np.mean([r["enhanced_psnr"] for r in rows])),
        "dark_ssim": float(np.mean([r["dark_ssim"] for r in rows])),
        "enhanced_ssim": float(np.mean([r["enhanced_ssim"] for r in rows])),
        "dark_top1": gefu.dark_top1,
        "enhanced_top1": gefu.enhanced_top1,
        "bright_top1": bright_hits / len(labels),
        "classifier_holdout_accuracy": evaluator.holdout_accuracy,
    }
    summary["psnr_gain"] = summary["enhanced_psnr"] - summary["dark_psnr"]
    return {"summary": summary, "images": rows, "gefu_rows": gefu.rows,
            "_artifacts": (darks, brights, enhanced)}


def cmd_eval(args) -> int:
    report = _evaluate_checkpoint(args.checkpoint, args.fixture, args.classifier_seed)
    darks, brights, enhanced = report.pop("_artifacts")
    summary = report["summary"]
    if args.report:
        path = _resolve_out(args.report)
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
    if args.grid:
        take = min(6, len(darks))
        _save_grid([[darks[i], enhanced[i], brights[i]] for i in range(take)],
                   ["dark input", "enhanced", "bright reference"], _resolve_out(args.grid))
    for key in ("dark_psnr", "enhanced_psnr", "psnr_gain", "dark_top1",
                "enhanced_top1", "bright_top1"):
        print(f"{key}: {summary[key]:.4f}")
    failures = []
    if args.min_psnr_gain is not None and summary["psnr_gain"] < args.min_psnr_gain:
        failures.append(f"psnr_gain {summary['psnr_gain']:.3f} < {args.min_psnr_gain}")
    if args.require_gefu_gain and summary["enhanced_top1"] <= summary["dark_top1"]:
        failures.append(
            f"enhanced_top1 {summary['enhanced_top1']:.3f} <= dark_top1 {summary['dark_top1']:.3f}"
        )
    if failures:
        raise ThresholdError("; ".join(failures))
    return EXIT_OK


def cmd_ablate(args) -> int:
    modes = args.modes.split(",") if args.modes else list(ADAPTER_MODES)
    for mode in modes:
        if mode not in ADAPTER_MODES:
            raise ConfigError(f"field modes: unknown adapter mode {mode!r}")
    cc_values = [v == "on" for v in (args.cc.split(",") if args.cc else ["on", "off"])]
    rc_values = [v == "on" for v in (args.rc.split(",") if args.rc else ["on", "off"])]
    out_dir = _prepare_out_dir(args.out, args.overwrite)
    base_cfg = _config_from_args(args)

    cells = []
    traces = {}
    for mode in modes:
        for cc in cc_values:
            for rc in rc_values:
                name = f"{mode}_cc{int(cc)}_rc{int(rc)}"
                cell_dir = os.path.join(out_dir, name)
                data = config_to_dict(base_cfg)
                data.update({"adapter_mode": mode, "caption_consistency": cc,
                             "reflectance_consistency": rc})
                cfg = config_from_dict(data, source=f"<ablation cell {name}>")
                cell = {"cell": name, "adapter_mode": mode, "caption_consistency": cc,
                        "reflectance_consistency": rc}
                try:
                    result = train(cfg, args.data, cell_dir)
                    traces[name] = result.trace_path
                    report = _evaluate_checkpoint(result.checkpoint_dir, args.data,
                                                  args.classifier_seed)
                    report.pop("_artifacts")
                    cell.update(report["summary"])
                except Exception as exc:  # persist partial results per cell
                    cell["error"] = f"{type(exc).__name__}: {exc}"
                with open(os.path.join(cell_dir, "cell.json"), "w") as fh:
                    json.dump(cell, fh, indent=2, sort_keys=True)
                cells.append(cell)
                status = cell.get("error", f"top1 {cell.get('enhanced_top1', float('nan')):.3f}")
                print(f"[{name}] {status}")

    table_path = os.path.join(out_dir, "ablation_table.json")
    with open(table_path, "w") as fh:
        json.dump(cells, fh, indent=2, sort_keys=True)
    with open(os.path.join(out_dir, "ablation_table.txt"), "w") as fh:
        header = f"{'cell':34s} {'psnr_gain':>10s} {'dark_top1':>10s} {'enh_top1':>10s}"
        fh.write(header + "\n")
        for cell in cells:
            if "error" in cell:
                fh.write(f"{cell['cell']:34s} ERROR {cell['error']}\n")
            else:
                fh.write(f"{cell['cell']:34s} {cell['psnr_gain']:10.3f} "
                         f"{cell['dark_top1']:10.3f} {cell['enhanced_top1']:10.3f}\n")
    if traces:
        _plot_loss_curves(traces, os.path.join(out_dir, "ablation_loss_curves.png"))
    print(f"ablation table ({len(cells)} cells) written to {table_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cyclelight",
                                     description="low-light enhancement trainer and evaluation harness")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fixture", help="generate a synthetic labeled fixture tree")
    p.add_argument("out_dir")
    p.add_argument("--train-per-side", type=int, default=32)
    p.add_argument("--eval-count", type=int, default=48)
    p.add_argument("--classifier-count", type=int, default=200)
    p.add_argument("--gamma-min", type=float, default=3.0)
    p.add_argument("--gamma-max", type=float, default=5.0)
    p.add_argument("--noise-sigma", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_fixture)

    p = sub.add_parser("train", help="run the unsupervised training loop")
    p.add_argument("--config", default=None, help="YAML config file (flags override it)")
    p.add_argument("--data", required=True, help="fixture root with low/ and normal/")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--overwrite", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance every PNG in a directory")
    p.add_argument("checkpoint")
    p.add_argument("in_dir")
    p.add_argument("out_dir")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a fixture")
    p.add_argument("checkpoint")
    p.add_argument("fixture")
    p.add_argument("--report", default=None, help="write the JSON report here")
    p.add_argument("--grid", default=None, help="write a before/after image grid here")
    p.add_argument("--classifier-seed", type=int, default=0)
    p.add_argument("--min-psnr-gain", type=float, default=None)
    p.add_argument("--require-gefu-gain", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the component ablation matrix")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--modes", default=None, help="comma list of adapter modes (default: all)")
    p.add_argument("--cc", default=None, help="comma list from {on,off} (default: on,off)")
    p.add_argument("--rc", default=None, help="comma list from {on,off} (default: on,off)")
    p.add_argument("--classifier-seed", type=int, default=0)
    p.add_argument("--overwrite", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, imaging.ImageIOError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, evalkit.EvaluatorTrainingError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ThresholdError as exc:
        print(f"acceptance threshold unmet: {exc}", file=sys.stderr)
        return EXIT_THRESHOLD


if __name__ == "__main__":
    sys.exit(main())
