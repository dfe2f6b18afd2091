"""
Pipeline configuration.

Precedence: ``--set section.key=value`` overrides, then the YAML/JSON file,
then the defaults of each module's parameter model.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from src.airway import AirwayParams
from src.boundary import RefineParams
from src.classifier import ClassifierParams
from src.errors import ConfigError, InputNotFound
from src.eval_metrics import MetricsParams
from src.lung_isolation import LungParams
from src.radiomics import RadiomicsParams
from src.tb_quant import GmmParams

logger = logging.getLogger(__name__)

DEFAULT_CONFIG = Path("configs/default.yaml")


class PathsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    data_dir: str = "data"
    out_dir: str = "reports"
    cases: str = "data/eval_cases.json"
    phantoms: str = "configs/phantoms.yaml"


class PipelineConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lung: LungParams = Field(default_factory=LungParams)
    airway: AirwayParams = Field(default_factory=AirwayParams)
    refine: RefineParams = Field(default_factory=RefineParams)
    quant: GmmParams = Field(default_factory=GmmParams)
    radiomics: RadiomicsParams = Field(default_factory=RadiomicsParams)
    classifier: ClassifierParams = Field(default_factory=ClassifierParams)
    metrics: MetricsParams = Field(default_factory=MetricsParams)
    paths: PathsConfig = Field(default_factory=PathsConfig)


def parse_override(item: str) -> tuple[list[str], Any]:
    """``refine.gac.alpha=0.5`` -> (["refine", "gac", "alpha"], 0.5)."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    keys = [k for k in key.strip().split(".") if k]
    if not keys:
        raise ConfigError(f"override {item!r} has an empty key")
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError as e:
        raise ConfigError(f"override {item!r}: {e}") from e
    return keys, value


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    for item in overrides:
        keys, value = parse_override(item)
        node = data
        for k in keys[:-1]:
            child = node.setdefault(k, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override {item!r}: {k} is not a section")
            node = child
        node[keys[-1]] = value
        logger.debug("config override %s = %r", ".".join(keys), value)
    return data


def _read_mapping(path: Path) -> Dict[str, Any]:
    if not path.is_file():
        raise InputNotFound(f"config not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def load_config(path: str | Path | None = None, overrides: Sequence[str] = ()) -> PipelineConfig:
    data = _read_mapping(Path(path)) if path is not None else {}
    apply_overrides(data, overrides)
    try:
        return PipelineConfig(**data)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def config_dict(cfg: Optional[PipelineConfig] = None) -> Dict[str, Any]:
    return (cfg or PipelineConfig()).model_dump(mode="json")
