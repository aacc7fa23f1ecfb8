"""Baseline workflows: supervised CV, weak direct/translate, and utilities.

Everything here is deterministic given a :class:`RunConfig`: folds and splits
derive from manifest geometry and the first seed, per-model randomness comes
from the configured seed list, and artifacts (checkpoints, reports, rendered
tables) land under one output directory per run. Fold training can optionally
fan out across processes; each fold is an independent training stream with an
isolated output subdirectory, so parallel and sequential runs produce the
same reports.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from multiprocessing import get_context
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from . import segnet, translator
from .config import RunConfig
from .corpus import (
    Collection,
    FoldSplit,
    Manifest,
    load_labels,
    load_manifest,
    load_tile,
    make_folds,
    split_supervised,
    split_weak,
)
from .density import DensityMap, forest_density, render_density, save_density
from .errors import ConfigError, EmptySplitError, ManifestError
from .metrics import MetricReport, aggregate_reports, evaluate_pair
from .rasters import AffineGeoref, read_labels, write_image, write_labels, write_world_file
from .reporting import report_table, report_to_dict, save_json
from .stylizer import (
    DEFAULT_STYLE_SPECS,
    colorize,
    load_features,
    load_style_spec,
    rasterize_array,
)
from .toygen import generate_corpus, write_corpus

SCORE_KEYS = ("oa", "mean_diou", "forest", "hydrography", "roads", "buildings")


def historical_collection(manifest: Manifest, override: Collection | None = None) -> Collection:
    """The manifest's single non-modern image collection (or the override)."""
    if override is not None:
        return override
    found = {
        coll
        for entry in manifest.entries
        for coll in entry.images
        if coll != Collection.MODERN
    }
    if len(found) != 1:
        raise ManifestError(
            f"expected exactly one historical collection, found {sorted(c.value for c in found)}"
        )
    return found.pop()


def _image(manifest: Manifest, tile_id: str, coll: Collection) -> np.ndarray:
    return load_tile(manifest, tile_id, coll).image


def _labels(manifest: Manifest, tile_id: str, coll: Collection) -> np.ndarray:
    return load_labels(manifest, tile_id, coll).data


def _samples(
    manifest: Manifest, ids: Sequence[str], image_coll: Collection, label_coll: Collection
) -> list[segnet.LabeledSample]:
    return [
        segnet.LabeledSample(
            tid, _image(manifest, tid, image_coll), _labels(manifest, tid, label_coll)
        )
        for tid in ids
    ]


def _scores(report: MetricReport) -> dict[str, float]:
    raw = report_to_dict(report)
    flat = {"oa": float(raw["oa"]), "mean_diou": float(raw["mean_diou"])}
    for name, value in raw["per_class_diou"].items():
        flat[name] = float(value)
    return {k: flat[k] for k in SCORE_KEYS if k in flat}


def _evaluate_predictions(
    manifest: Manifest,
    predict: Callable[[np.ndarray], np.ndarray],
    tile_ids: Sequence[str],
    coll: Collection,
    cfg: RunConfig,
) -> MetricReport:
    reports = []
    for tid in tile_ids:
        pred = predict(_image(manifest, tid, coll))
        reports.append(evaluate_pair(pred, _labels(manifest, tid, coll), cfg.metric))
    return aggregate_reports(reports)


# ---------------------------------------------------------------------------
# Supervised cross-validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SupervisedCvResult:
    fold_reports: tuple[MetricReport, ...]
    aggregate: MetricReport


def _train_one_fold(
    manifest: Manifest,
    cfg: RunConfig,
    fold: int,
    device_str: str | None,
    output_str: str | None,
) -> dict:
    """Train/evaluate one fold; module-level so process pools can run it."""
    device = torch.device(device_str) if device_str else None
    coll = historical_collection(manifest, cfg.collection)
    folds = make_folds(manifest, cfg.folds)
    seed = cfg.seeds[0] + fold
    train_ids, val_ids, test_ids = split_supervised(folds, fold, seed=cfg.seeds[0])
    model = segnet.build_model(cfg.seg, seed=seed)
    state = segnet.train_supervised(
        model,
        _samples(manifest, train_ids, coll, coll),
        _samples(manifest, val_ids, coll, coll),
        cfg.seg,
        seed=seed,
        metric_cfg=cfg.metric,
        device=device,
    )
    report = _evaluate_predictions(
        manifest,
        lambda img: segnet.predict_tile(model, img, cfg.seg.crop_px, device=device),
        test_ids,
        coll,
        cfg,
    )
    if output_str:
        fold_dir = Path(output_str) / f"fold{fold}"
        fold_dir.mkdir(parents=True, exist_ok=True)
        segnet.save_checkpoint(fold_dir / "checkpoint.pt", model, state)
        save_json(report_to_dict(report, label=f"fold{fold}"), fold_dir / "report.json")
    return report_to_dict(report)


def run_supervised_cv(
    manifest: Manifest,
    cfg: RunConfig,
    device: torch.device | None = None,
    output: Path | None = None,
) -> SupervisedCvResult:
    """Train one model per fold and micro-aggregate the held-out reports."""
    device_str = str(device) if device is not None else None
    output_str = str(output) if output is not None else None
    fold_ids = range(cfg.folds)
    if cfg.parallel:
        ctx = get_context("spawn")
        with ProcessPoolExecutor(mp_context=ctx) as pool:
            raw = list(
                pool.map(
                    _train_one_fold,
                    [manifest] * cfg.folds,
                    [cfg] * cfg.folds,
                    fold_ids,
                    [device_str] * cfg.folds,
                    [output_str] * cfg.folds,
                )
            )
    else:
        raw = [_train_one_fold(manifest, cfg, f, device_str, output_str) for f in fold_ids]
    fold_reports = tuple(MetricReport.from_dict(r["counts"]) for r in raw)
    aggregate = aggregate_reports(fold_reports)
    if output is not None:
        _write_report_artifacts(
            output,
            [(f"fold{f}", rep) for f, rep in enumerate(fold_reports)] + [("all", aggregate)],
        )
    return SupervisedCvResult(fold_reports=fold_reports, aggregate=aggregate)


# ---------------------------------------------------------------------------
# Weakly supervised baselines
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WeakResult:
    mode: str
    per_seed: tuple[MetricReport, ...]
    mean_scores: Mapping[str, float]
    std_scores: Mapping[str, float]
    aggregate: MetricReport
    single_run: bool


def run_weak(
    manifest: Manifest,
    cfg: RunConfig,
    mode: str,
    device: torch.device | None = None,
    output: Path | None = None,
) -> WeakResult:
    """Train one model per seed on weak modern labels; evaluate on annotations.

    ``direct`` trains the segmentation network on historical images against
    modern label rasters. ``translate`` first trains the style translators on
    aligned (historical, modern-render) tiles, trains the segmentation network
    on the modern renders themselves, and segments translated tiles.
    """
    if mode not in ("direct", "translate"):
        raise ConfigError(f"unknown weak mode {mode!r}")
    coll = historical_collection(manifest, cfg.collection)
    train_ids, val_ids = split_weak(manifest, seed=cfg.seeds[0])
    eval_ids = manifest.annotated_ids
    if not eval_ids:
        raise EmptySplitError("weak evaluation needs annotated tiles")

    per_seed: list[MetricReport] = []
    for seed in cfg.seeds:
        model = segnet.build_model(cfg.seg, seed=seed)
        if mode == "direct":
            modern_labels = {
                tid: _labels(manifest, tid, Collection.MODERN) for tid in (*train_ids, *val_ids)
            }
            segnet.train_weak(
                model,
                [(tid, _image(manifest, tid, coll)) for tid in train_ids],
                modern_labels,
                cfg.seg,
                seed=seed,
                val_historical=[(tid, _image(manifest, tid, coll)) for tid in val_ids],
                metric_cfg=cfg.metric,
                device=device,
            )
            predict = lambda img: segnet.predict_tile(model, img, cfg.seg.crop_px, device=device)
            pair = None
        else:
            pair = translator.train_translation(
                [(tid, _image(manifest, tid, coll)) for tid in train_ids],
                [(tid, _image(manifest, tid, Collection.MODERN)) for tid in train_ids],
                cfg.trans,
                cfg.weights,
                seed=seed,
                device=device,
            )
            segnet.train_supervised(
                model,
                _samples(manifest, train_ids, Collection.MODERN, Collection.MODERN),
                _samples(manifest, val_ids, Collection.MODERN, Collection.MODERN),
                cfg.seg,
                seed=seed,
                metric_cfg=cfg.metric,
                device=device,
            )
            predict = lambda img: translator.translate_then_segment(
                pair, model, img, cfg.trans.crop_px, device=device
            )
        report = _evaluate_predictions(manifest, predict, eval_ids, coll, cfg)
        per_seed.append(report)
        if output is not None:
            seed_dir = Path(output) / f"seed{seed}"
            seed_dir.mkdir(parents=True, exist_ok=True)
            save_json(report_to_dict(report, label=f"seed{seed}"), seed_dir / "report.json")
            if pair is not None:
                translator.save_checkpoint(seed_dir / "translation.pt", pair)

    table = {key: [(_scores(r).get(key)) for r in per_seed] for key in SCORE_KEYS}
    mean_scores = {k: float(np.mean(v)) for k, v in table.items() if v[0] is not None}
    if len(per_seed) == 1:
        std_scores = {k: 0.0 for k in mean_scores}
    else:
        std_scores = {
            k: float(np.std(table[k]))  # population std over the seed runs
            for k in mean_scores
        }
    result = WeakResult(
        mode=mode,
        per_seed=tuple(per_seed),
        mean_scores=mean_scores,
        std_scores=std_scores,
        aggregate=aggregate_reports(per_seed),
        single_run=len(per_seed) == 1,
    )
    if output is not None:
        summary = {
            "mode": mode,
            "seeds": list(cfg.seeds),
            "single_run": result.single_run,
            "mean": mean_scores,
            "std": std_scores,
        }
        save_json(summary, Path(output) / "summary.json")
        _write_report_artifacts(
            output,
            [(f"seed{s}", rep) for s, rep in zip(cfg.seeds, per_seed)]
            + [("all", result.aggregate)],
        )
    return result


def run_train_translate(
    manifest: Manifest,
    cfg: RunConfig,
    device: torch.device | None = None,
    output: Path | None = None,
) -> dict[str, dict]:
    """Train the style translators alone, one independent run per seed."""
    coll = historical_collection(manifest, cfg.collection)
    train_ids, val_ids = split_weak(manifest, seed=cfg.seeds[0])
    summary: dict[str, dict] = {}
    for seed in cfg.seeds:
        pair = translator.train_translation(
            [(tid, _image(manifest, tid, coll)) for tid in train_ids],
            [(tid, _image(manifest, tid, Collection.MODERN)) for tid in train_ids],
            cfg.trans,
            cfg.weights,
            seed=seed,
            device=device,
        )
        preview_ids = (val_ids or train_ids)[:4]
        aligned = [
            (tid, _image(manifest, tid, coll), _image(manifest, tid, Collection.MODERN))
            for tid in preview_ids
        ]
        l1 = translator.aligned_l1(pair, aligned, device=device)
        summary[f"seed{seed}"] = {"steps": pair.step_count, "aligned_l1": l1}
        if output is not None:
            seed_dir = Path(output) / f"seed{seed}"
            seed_dir.mkdir(parents=True, exist_ok=True)
            translator.save_checkpoint(seed_dir / "translation.pt", pair)
            write_image(seed_dir / "preview.png", translator.preview_grid(pair, aligned))
            save_json(summary[f"seed{seed}"], seed_dir / "summary.json")
    if output is not None:
        save_json(summary, Path(output) / "summary.json")
    return summary


# ---------------------------------------------------------------------------
# Utility workflows
# ---------------------------------------------------------------------------


def run_toygen(cfg: RunConfig, output: Path) -> Manifest:
    corpus = generate_corpus(cfg.toy)
    return write_corpus(corpus, output)


def run_stylize(cfg: RunConfig, output: Path) -> tuple[Path, Path]:
    """Render one synthetic map (image + labels) from a vector feature file."""
    if cfg.features is None:
        raise ConfigError("stylize needs a 'features' path")
    spec = cfg.stylize
    features = load_features(cfg.features)
    style = (
        load_style_spec(spec.style_path)
        if spec.style_path is not None
        else DEFAULT_STYLE_SPECS[spec.collection]
    )
    georef = AffineGeoref.north_up(spec.origin_x, spec.origin_y, spec.resolution_m)
    labels = rasterize_array(features, (spec.size_px, spec.size_px), georef, style)
    image = colorize(labels, style)
    output.mkdir(parents=True, exist_ok=True)
    image_path = output / "synthetic.png"
    labels_path = output / "labels.png"
    write_image(image_path, image)
    write_labels(labels_path, labels)
    write_world_file(image_path.with_suffix(".wld"), georef)
    write_world_file(labels_path.with_suffix(".wld"), georef)
    return image_path, labels_path


def run_make_folds(manifest: Manifest, cfg: RunConfig, output: Path) -> FoldSplit:
    folds = make_folds(manifest, cfg.folds)
    output.mkdir(parents=True, exist_ok=True)
    payload = {"k": folds.k, "assignment": dict(sorted(folds.assignment.items()))}
    (output / "folds.json").write_text(json.dumps(payload, indent=2) + "\n")
    return folds


def run_infer(
    manifest: Manifest,
    cfg: RunConfig,
    device: torch.device | None = None,
    output: Path | None = None,
) -> Path:
    """Predict labels for every tile carrying the historical collection."""
    if cfg.checkpoint is None:
        raise ConfigError("infer needs a 'checkpoint' path")
    if output is None:
        raise ConfigError("infer needs an output directory")
    coll = historical_collection(manifest, cfg.collection)
    model, _state = segnet.load_checkpoint(cfg.checkpoint)
    if device is not None:
        model.to(device)
    pair = None
    patch_px = model.config.crop_px
    if cfg.translation_checkpoint is not None:
        pair = translator.load_checkpoint(cfg.translation_checkpoint)
        if device is not None:
            for net in pair.modules():
                net.to(device)
        patch_px = pair.config.crop_px
    pred_dir = output / "predictions"
    pred_dir.mkdir(parents=True, exist_ok=True)
    for entry in manifest.entries:
        if coll not in entry.images:
            continue
        tile = load_tile(manifest, entry.tile_id, coll)
        if pair is not None:
            pred = translator.translate_then_segment(pair, model, tile.image, patch_px, device)
        else:
            pred = segnet.predict_tile(model, tile.image, patch_px, device=device)
        write_labels(pred_dir / f"{entry.tile_id}.png", pred)
        write_world_file(pred_dir / f"{entry.tile_id}.wld", tile.georef)
    return pred_dir


def _load_predictions(
    manifest: Manifest, cfg: RunConfig, tile_ids: Sequence[str]
) -> dict[str, np.ndarray]:
    if cfg.predictions is None:
        raise ConfigError("this workflow needs a 'predictions' directory")
    pred_dir = Path(cfg.predictions)
    out = {}
    for tid in tile_ids:
        path = pred_dir / f"{tid}.png"
        if not path.exists():
            raise ManifestError(f"missing prediction for tile {tid!r}: {path}")
        out[tid] = read_labels(path)
    return out


def run_evaluate(manifest: Manifest, cfg: RunConfig, output: Path | None = None) -> MetricReport:
    """Score stored predictions against historical annotations."""
    coll = historical_collection(manifest, cfg.collection)
    eval_ids = manifest.annotated_ids
    if not eval_ids:
        raise EmptySplitError("evaluation needs annotated tiles")
    preds = _load_predictions(manifest, cfg, eval_ids)
    reports = [
        evaluate_pair(preds[tid], _labels(manifest, tid, coll), cfg.metric) for tid in eval_ids
    ]
    aggregate = aggregate_reports(reports)
    if output is not None:
        _write_report_artifacts(output, [("all", aggregate)])
    return aggregate


def run_forest_density(
    manifest: Manifest, cfg: RunConfig, output: Path | None = None
) -> DensityMap:
    """Aggregate stored predictions into a forest-density grid."""
    coll = historical_collection(manifest, cfg.collection)
    ids = [e.tile_id for e in manifest.entries if coll in e.images]
    preds = _load_predictions(manifest, cfg, ids)
    tiles = [(preds[tid], load_tile(manifest, tid, coll).georef) for tid in ids]
    dmap = forest_density(tiles, cell_size_km=cfg.cell_size_km, era=coll.value)
    if output is not None:
        output.mkdir(parents=True, exist_ok=True)
        save_density(output / "density.json", dmap)
        write_image(output / "density.png", render_density(dmap))
    return dmap


def _write_report_artifacts(output: Path, rows: Sequence[tuple[str, MetricReport]]) -> None:
    output.mkdir(parents=True, exist_ok=True)
    save_json([report_to_dict(rep, label=name) for name, rep in rows], output / "reports.json")
    (output / "table.txt").write_text(report_table(rows) + "\n")


def load_manifest_for(cfg: RunConfig) -> Manifest:
    if cfg.manifest is None:
        raise ConfigError("this workflow needs a 'manifest' path")
    return load_manifest(cfg.manifest)
