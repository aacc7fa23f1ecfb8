"""Command-line entry point: one subcommand per pipeline stage.

Every subcommand reads a declarative YAML run file (``--config``) resolved
against a profile (``paper`` or ``toy``); ``--seed``, ``--out``, and
``--profile`` override the file. Artifacts land under the run's output
directory with the fully resolved configuration frozen alongside, so a rerun
of the same frozen config reproduces the same reports.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Sequence

from .config import RunConfig, Workflow, freeze_config, load_run_config
from .errors import CartosegError, ConfigError
from .reporting import load_json, report_from_dict, report_table
from .segnet import resolve_device
from .workflows import (
    load_manifest_for,
    run_evaluate,
    run_forest_density,
    run_infer,
    run_make_folds,
    run_stylize,
    run_supervised_cv,
    run_toygen,
    run_train_translate,
    run_weak,
)

_COMMANDS = (
    "toygen",
    "stylize",
    "make-folds",
    "train-supervised",
    "train-weak",
    "train-translate",
    "infer",
    "evaluate",
    "forest-density",
    "report",
)

_REQUIRED_WORKFLOWS = {
    "toygen": {Workflow.TOYGEN},
    "stylize": {Workflow.STYLIZE},
    "train-supervised": {Workflow.SUPERVISED_CV},
    "train-weak": {Workflow.WEAK_DIRECT, Workflow.WEAK_TRANSLATE},
    "train-translate": {Workflow.WEAK_TRANSLATE},
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cartoseg",
        description="Historical-map segmentation baselines, evaluation, and tools.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True, type=Path, help="run config YAML")
        cmd.add_argument("--seed", type=int, default=None, help="override the seed list")
        cmd.add_argument("--out", type=Path, default=None, help="override the output directory")
        cmd.add_argument(
            "--profile", choices=("paper", "toy"), default=None, help="override the profile"
        )
    return parser


def _require_output(cfg: RunConfig) -> Path:
    if cfg.output is None:
        raise ConfigError("an output directory is required (set 'output' or pass --out)")
    return Path(cfg.output)


def _check_workflow(command: str, cfg: RunConfig) -> None:
    allowed = _REQUIRED_WORKFLOWS.get(command)
    if allowed is not None and cfg.workflow not in allowed:
        names = sorted(w.value for w in allowed)
        raise ConfigError(
            f"subcommand {command!r} expects workflow {names}, got {cfg.workflow.value!r}"
        )


def _cmd_report(cfg: RunConfig, output: Path) -> str:
    if not cfg.reports:
        raise ConfigError("report needs a nonempty 'reports' list of JSON files")
    rows = []
    for path in cfg.reports:
        payload = load_json(path)
        entries = payload if isinstance(payload, list) else [payload]
        for entry in entries:
            rows.append((str(entry.get("label", Path(path).stem)), report_from_dict(entry)))
    table = report_table(rows)
    (output / "table.txt").write_text(table + "\n")
    return table


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config, profile=args.profile, seed=args.seed, out=args.out)
        _check_workflow(args.command, cfg)
        output = _require_output(cfg)
        output.mkdir(parents=True, exist_ok=True)
        freeze_config(cfg, output / "config.yaml")
        device = resolve_device()

        if args.command == "toygen":
            manifest = run_toygen(cfg, output)
            print(f"wrote {len(manifest.entries)} tiles under {output}")
        elif args.command == "stylize":
            image_path, labels_path = run_stylize(cfg, output)
            print(f"wrote {image_path} and {labels_path}")
        elif args.command == "make-folds":
            folds = run_make_folds(load_manifest_for(cfg), cfg, output)
            print(f"wrote {folds.k}-fold assignment to {output / 'folds.json'}")
        elif args.command == "train-supervised":
            result = run_supervised_cv(load_manifest_for(cfg), cfg, device, output)
            print(report_table([("all", result.aggregate)]))
        elif args.command == "train-weak":
            mode = "translate" if cfg.workflow == Workflow.WEAK_TRANSLATE else "direct"
            result = run_weak(load_manifest_for(cfg), cfg, mode, device, output)
            print(report_table([("all", result.aggregate)]))
            if result.single_run:
                print("single run: dispersion reported as 0")
        elif args.command == "train-translate":
            summary = run_train_translate(load_manifest_for(cfg), cfg, device, output)
            for name, info in summary.items():
                print(f"{name}: {info['steps']} steps, aligned L1 {info['aligned_l1']:.4f}")
        elif args.command == "infer":
            pred_dir = run_infer(load_manifest_for(cfg), cfg, device, output)
            print(f"wrote predictions to {pred_dir}")
        elif args.command == "evaluate":
            report = run_evaluate(load_manifest_for(cfg), cfg, output)
            print(report_table([("all", report)]))
        elif args.command == "forest-density":
            dmap = run_forest_density(load_manifest_for(cfg), cfg, output)
            ny, nx = dmap.covered_px.shape
            print(f"wrote {ny}x{nx} density grid to {output / 'density.json'}")
        elif args.command == "report":
            print(_cmd_report(cfg, output))
    except CartosegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
