"""Declarative run configuration: YAML files, profiles, and overrides.

A run is described by one YAML document with explicit sub-sections (``seg``,
``trans``, ``weights``, ``metric``, ``toy``, ``stylize``). A profile picks the
base values for the network/training sub-configs (``paper`` for full-scale
runs, ``toy`` for the small procedural corpus); the file's sub-sections then
override individual fields, and command-line ``--seed``/``--out``/``--profile``
override the file. Unknown keys anywhere are configuration errors, and the
fully resolved configuration is frozen alongside each run's artifacts.
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from .corpus import Collection
from .errors import ConfigError
from .metrics import MetricConfig
from .segnet import SegConfig
from .toygen import ToySpec
from .translator import LossWeights, TransConfig


class Workflow(str, enum.Enum):
    SUPERVISED_CV = "supervised_cv"
    WEAK_DIRECT = "weak_direct"
    WEAK_TRANSLATE = "weak_translate"
    EVALUATE = "evaluate"
    FOREST_DENSITY = "forest_density"
    TOYGEN = "toygen"
    STYLIZE = "stylize"


@dataclass(frozen=True)
class StylizeSpec:
    """Inputs for rendering one synthetic map from a vector feature file."""

    collection: Collection = Collection.MODERN
    size_px: int = 256
    origin_x: float = 0.0
    origin_y: float = 0.0
    resolution_m: float = 1.0
    style_path: Path | None = None

    def __post_init__(self) -> None:
        if self.size_px < 1:
            raise ConfigError("stylize size_px must be >= 1")
        if self.resolution_m <= 0:
            raise ConfigError("stylize resolution_m must be > 0")


@dataclass(frozen=True)
class Profile:
    seg: SegConfig
    trans: TransConfig


PROFILES: dict[str, Profile] = {
    "paper": Profile(seg=SegConfig(), trans=TransConfig()),
    "toy": Profile(
        seg=SegConfig(
            stages=5,
            base_channels=16,
            max_channels=256,
            crop_px=128,
            epochs=20,
            batch_size=8,
        ),
        trans=TransConfig(
            crop_px=64,
            res_blocks=3,
            gen_features=16,
            disc_features=16,
            disc_layers=2,
            max_steps=4000,
        ),
    ),
}


@dataclass(frozen=True)
class RunConfig:
    """Everything one workflow invocation needs, fully resolved."""

    workflow: Workflow
    manifest: Path | None = None
    output: Path | None = None
    checkpoint: Path | None = None
    translation_checkpoint: Path | None = None
    predictions: Path | None = None
    features: Path | None = None
    reports: tuple[Path, ...] = ()
    seeds: tuple[int, ...] = (0, 1, 2)
    folds: int = 7
    parallel: bool = False
    profile: str = "paper"
    collection: Collection | None = None
    cell_size_km: float = 10.0
    seg: SegConfig = field(default_factory=SegConfig)
    trans: TransConfig = field(default_factory=TransConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    metric: MetricConfig = field(default_factory=MetricConfig)
    toy: ToySpec = field(default_factory=ToySpec)
    stylize: StylizeSpec = field(default_factory=StylizeSpec)

    def __post_init__(self) -> None:
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if any(int(s) != s for s in self.seeds):
            raise ConfigError("seeds must be integers")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if self.cell_size_km <= 0:
            raise ConfigError("cell_size_km must be > 0")
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}")


_TOP_KEYS = {
    "workflow",
    "manifest",
    "output",
    "checkpoint",
    "translation_checkpoint",
    "predictions",
    "features",
    "reports",
    "seeds",
    "folds",
    "parallel",
    "profile",
    "collection",
    "cell_size_km",
    "seg",
    "trans",
    "weights",
    "metric",
    "toy",
    "stylize",
}


def _build_section(cls, base, raw: Mapping[str, Any] | None, section: str):
    """Apply a YAML mapping's fields on top of a base dataclass instance."""
    if raw is None:
        return base
    if not isinstance(raw, Mapping):
        raise ConfigError(f"section {section!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    updates: dict[str, Any] = {}
    for key, value in raw.items():
        if key not in names:
            raise ConfigError(f"unknown key {key!r} in section {section!r}")
        updates[key] = value
    if "scale_range" in updates:
        updates["scale_range"] = tuple(updates["scale_range"])
    if "historical_collection" in updates:
        updates["historical_collection"] = Collection(updates["historical_collection"])
    if "collection" in updates:
        updates["collection"] = Collection(updates["collection"])
    if "style_path" in updates and updates["style_path"] is not None:
        updates["style_path"] = Path(updates["style_path"])
    try:
        return replace(base, **updates)
    except TypeError as exc:
        raise ConfigError(f"bad section {section!r}: {exc}") from exc


def _opt_path(raw: Mapping[str, Any], key: str) -> Path | None:
    value = raw.get(key)
    return None if value is None else Path(str(value))


def load_run_config(
    path: Path | str,
    profile: str | None = None,
    seed: int | None = None,
    out: Path | str | None = None,
) -> RunConfig:
    """Read a YAML run file and resolve profiles plus CLI overrides."""
    raw = yaml.safe_load(Path(path).read_text())
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{path}: run config must be a YAML mapping")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    if "workflow" not in raw:
        raise ConfigError(f"{path}: 'workflow' is required")
    try:
        workflow = Workflow(str(raw["workflow"]))
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    profile_name = profile or str(raw.get("profile", "paper"))
    if profile_name not in PROFILES:
        raise ConfigError(f"unknown profile {profile_name!r}")
    base = PROFILES[profile_name]

    seeds_raw = raw.get("seeds", [0, 1, 2])
    if not isinstance(seeds_raw, (list, tuple)) or not seeds_raw:
        raise ConfigError("seeds must be a nonempty list")
    seeds = tuple(int(s) for s in seeds_raw)
    if seed is not None:
        seeds = (int(seed),)

    toy = _build_section(ToySpec, ToySpec(), raw.get("toy"), "toy")
    if seed is not None:
        toy = replace(toy, seed=int(seed))

    collection = raw.get("collection")
    output = Path(out) if out is not None else _opt_path(raw, "output")
    return RunConfig(
        workflow=workflow,
        manifest=_opt_path(raw, "manifest"),
        output=output,
        checkpoint=_opt_path(raw, "checkpoint"),
        translation_checkpoint=_opt_path(raw, "translation_checkpoint"),
        predictions=_opt_path(raw, "predictions"),
        features=_opt_path(raw, "features"),
        reports=tuple(Path(str(p)) for p in raw.get("reports", [])),
        seeds=seeds,
        folds=int(raw.get("folds", 7)),
        parallel=bool(raw.get("parallel", False)),
        profile=profile_name,
        collection=None if collection is None else Collection(str(collection)),
        cell_size_km=float(raw.get("cell_size_km", 10.0)),
        seg=_build_section(SegConfig, base.seg, raw.get("seg"), "seg"),
        trans=_build_section(TransConfig, base.trans, raw.get("trans"), "trans"),
        weights=_build_section(LossWeights, LossWeights(), raw.get("weights"), "weights"),
        metric=_build_section(MetricConfig, MetricConfig(), raw.get("metric"), "metric"),
        toy=toy,
        stylize=_build_section(StylizeSpec, StylizeSpec(), raw.get("stylize"), "stylize"),
    )


def _plain(value: Any) -> Any:
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, Path):
        return str(value)
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, Mapping):
        return {_plain(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def config_to_dict(cfg: RunConfig) -> dict[str, Any]:
    return _plain(cfg)


def freeze_config(cfg: RunConfig, path: Path | str) -> None:
    """Write the fully resolved configuration next to the run's artifacts."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=False))
