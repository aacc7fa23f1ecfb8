from pathlib import Path

import pytest
import yaml

from cartoseg.config import (
    PROFILES,
    RunConfig,
    StylizeSpec,
    Workflow,
    config_to_dict,
    freeze_config,
    load_run_config,
)
from cartoseg.corpus import Collection
from cartoseg.errors import ConfigError


def _write(tmp_path: Path, payload: dict) -> Path:
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(payload))
    return path


def test_minimal_config_resolves_paper_profile(tmp_path):
    cfg = load_run_config(_write(tmp_path, {"workflow": "supervised_cv"}))
    assert cfg.workflow is Workflow.SUPERVISED_CV
    assert cfg.profile == "paper"
    assert cfg.seg == PROFILES["paper"].seg
    assert cfg.trans == PROFILES["paper"].trans
    assert cfg.seeds == (0, 1, 2)
    assert cfg.folds == 7


def test_toy_profile_changes_network_scale(tmp_path):
    cfg = load_run_config(_write(tmp_path, {"workflow": "weak_direct", "profile": "toy"}))
    assert cfg.seg.stages == 5
    assert cfg.seg.epochs == 20
    assert cfg.trans.res_blocks == 3
    assert cfg.trans.max_steps == 4000


def test_section_overrides_apply_on_top_of_profile(tmp_path):
    cfg = load_run_config(
        _write(
            tmp_path,
            {
                "workflow": "weak_translate",
                "profile": "toy",
                "seg": {"epochs": 3, "batch_size": 2},
                "trans": {"max_steps": 10},
                "weights": {"lambda_tran": 0.0},
                "metric": {"dilation_radius_w": 1},
            },
        )
    )
    assert cfg.seg.epochs == 3 and cfg.seg.batch_size == 2
    assert cfg.seg.stages == 5  # untouched profile value
    assert cfg.trans.max_steps == 10
    assert cfg.weights.lambda_tran == 0.0
    assert cfg.metric.dilation_radius_w == 1


def test_unknown_top_level_key_rejected(tmp_path):
    with pytest.raises(ConfigError, match="unknown keys"):
        load_run_config(_write(tmp_path, {"workflow": "toygen", "bogus": 1}))


def test_unknown_section_key_rejected(tmp_path):
    with pytest.raises(ConfigError, match="unknown key"):
        load_run_config(_write(tmp_path, {"workflow": "toygen", "seg": {"depth": 3}}))


def test_missing_workflow_rejected(tmp_path):
    with pytest.raises(ConfigError, match="workflow"):
        load_run_config(_write(tmp_path, {"profile": "toy"}))


def test_bad_workflow_rejected(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(_write(tmp_path, {"workflow": "mystery"}))


def test_empty_seeds_rejected(tmp_path):
    with pytest.raises(ConfigError, match="seeds"):
        load_run_config(_write(tmp_path, {"workflow": "toygen", "seeds": []}))


def test_seed_override_wins_and_propagates_to_toygen(tmp_path):
    path = _write(
        tmp_path,
        {"workflow": "toygen", "seeds": [5, 6], "toy": {"n_tiles": 4, "seed": 9}},
    )
    cfg = load_run_config(path, seed=42)
    assert cfg.seeds == (42,)
    assert cfg.toy.seed == 42
    assert cfg.toy.n_tiles == 4
    untouched = load_run_config(path)
    assert untouched.seeds == (5, 6)
    assert untouched.toy.seed == 9


def test_out_and_profile_overrides(tmp_path):
    path = _write(tmp_path, {"workflow": "supervised_cv", "output": "a", "profile": "paper"})
    cfg = load_run_config(path, profile="toy", out=tmp_path / "b")
    assert cfg.profile == "toy"
    assert cfg.output == tmp_path / "b"
    assert cfg.seg.stages == 5


def test_collection_parsing(tmp_path):
    cfg = load_run_config(
        _write(tmp_path, {"workflow": "evaluate", "collection": "etatmajor"})
    )
    assert cfg.collection is Collection.ETATMAJOR


def test_stylize_section(tmp_path):
    cfg = load_run_config(
        _write(
            tmp_path,
            {
                "workflow": "stylize",
                "stylize": {"collection": "cassini", "size_px": 64, "origin_y": 64.0},
            },
        )
    )
    assert cfg.stylize.collection is Collection.CASSINI
    assert cfg.stylize.size_px == 64


def test_stylize_validation():
    with pytest.raises(ConfigError):
        StylizeSpec(size_px=0)
    with pytest.raises(ConfigError):
        StylizeSpec(resolution_m=0.0)


def test_runconfig_validation():
    with pytest.raises(ConfigError):
        RunConfig(workflow=Workflow.TOYGEN, seeds=())
    with pytest.raises(ConfigError):
        RunConfig(workflow=Workflow.TOYGEN, folds=1)
    with pytest.raises(ConfigError):
        RunConfig(workflow=Workflow.TOYGEN, cell_size_km=0)
    with pytest.raises(ConfigError):
        RunConfig(workflow=Workflow.TOYGEN, profile="huge")


def test_freeze_round_trips_through_loader(tmp_path):
    original = load_run_config(
        _write(
            tmp_path,
            {
                "workflow": "weak_translate",
                "profile": "toy",
                "manifest": "corpus/manifest.yaml",
                "output": "runs/x",
                "seeds": [1, 2, 3],
                "seg": {"epochs": 2},
                "toy": {"n_tiles": 8, "style_gap": 0.8},
            },
        )
    )
    frozen = tmp_path / "frozen.yaml"
    freeze_config(original, frozen)
    reloaded = load_run_config(frozen)
    assert reloaded == original


def test_config_to_dict_uses_plain_values(tmp_path):
    cfg = load_run_config(_write(tmp_path, {"workflow": "toygen", "profile": "toy"}))
    plain = config_to_dict(cfg)
    assert plain["workflow"] == "toygen"
    assert isinstance(plain["seg"]["scale_range"], list)
    assert plain["toy"]["historical_collection"] == "cassini"
