import json

import pytest

from src.config import PipelineConfig, apply_overrides, config_dict, load_config, parse_override
from src.errors import ConfigError, InputNotFound


def test_committed_default_matches_builtin_values():
    cfg = load_config("configs/default.yaml")
    assert cfg == PipelineConfig()
    assert cfg.lung.bone_seed_hu == 900 and cfg.lung.min_volume_mm3 == 10
    assert cfg.airway.diameter_range_mm == (5.5, 8.5)
    assert (cfg.airway.t_intensity, cfg.airway.alpha, cfg.airway.beta) == (-625, 1.4, 2.0)
    assert (cfg.refine.gac.alpha, cfg.refine.gac.beta, cfg.refine.gac.gamma) == (1.0, 0.25, 2.0)
    assert cfg.refine.sphericity_threshold == 0.85


def test_overrides_take_precedence(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("refine:\n  sphericity_threshold: 0.7\nquant:\n  seed: 3\n", encoding="utf-8")
    cfg = load_config(path, ["refine.sphericity_threshold=0.5", "airway.diameter_range_mm=[5, 9]"])
    assert cfg.refine.sphericity_threshold == 0.5
    assert cfg.airway.diameter_range_mm == (5.0, 9.0)
    assert cfg.quant.seed == 3
    assert cfg.refine.gac.gamma == 2.0


def test_json_config_is_accepted(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"metrics": {"dsc_min": 0.8}}), encoding="utf-8")
    assert load_config(path).metrics.dsc_min == 0.8


def test_parse_override_types():
    assert parse_override("refine.gac.alpha=0.5") == (["refine", "gac", "alpha"], 0.5)
    assert parse_override("quant.init=quantile") == (["quant", "init"], "quantile")
    assert parse_override("classifier.cv.tomek=false") == (["classifier", "cv", "tomek"], False)
    assert apply_overrides({}, ["a.b=1", "a.c=x"]) == {"a": {"b": 1, "c": "x"}}


def test_invalid_configs_are_rejected(tmp_path):
    with pytest.raises(ConfigError):
        load_config(None, ["lung.no_such_key=1"])
    with pytest.raises(ConfigError):
        load_config(None, ["refine.sphericity_threshold=2.0"])
    with pytest.raises(ConfigError):
        load_config(None, ["missing_equals"])
    with pytest.raises(ConfigError):
        load_config(None, ["lung=3", "lung.otsu_bins=4"])
    bad = tmp_path / "list.yaml"
    bad.write_text("- 1\n- 2\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(InputNotFound):
        load_config(tmp_path / "nope.yaml")


def test_config_dict_reflects_overrides():
    cfg = load_config("configs/default.yaml", ["quant.seed=5", "paths.out_dir=out/x"])
    d = config_dict(cfg)
    assert d["quant"]["seed"] == 5
    assert d["paths"]["out_dir"] == "out/x"
    assert json.loads(json.dumps(d)) == d
    assert PipelineConfig(**d) == cfg
