"""
config.py
Run configuration loading, .env defaults and logger setup
"""
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

from utils.data_model import (
    BackboneConfig, BlockSpec, HeadSpec, ModelMode, OptimizerKind, RunConfig
)
from utils.errors import ConfigError

load_dotenv()

DEFAULT_RUNS_DIR = "./runs"
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

# Field name -> accepted python types, for one-pass validation
_RUN_FIELDS = {
    "dataset_path": (str,),
    "mode": (str,),
    "r_init": (int,),
    "r_target": (int,),
    "rank_fixed": (int, type(None)),
    "epochs": (int,),
    "warmup_epochs": (int,),
    "decay_end_epoch": (int,),
    "batch_size": (int,),
    "learning_rate": (int, float),
    "shared_learning_rate": (int, float, type(None)),
    "beta1": (int, float),
    "beta2": (int, float),
    "prune_interval": (int, type(None)),
    "optimizer": (str,),
    "seed": (int,),
    "output_dir": (str, type(None)),
    "checkpoint_every": (int,),
    "train_split": (str,),
    "val_split": (str,),
    "quiet": (bool,),
}
_BACKBONE_FIELDS = {
    "in_channels": (int,),
    "num_classes": (int,),
    "blocks": (list,),
    "taps": (dict,),
    "head": (dict,),
    "rank": (int,),
    "num_modalities": (int,),
    "modality_names": (list,),
}


def runs_dir() -> Path:
    """Default output root, overridable from .env"""
    return Path(os.getenv("LMA_RUNS_DIR", DEFAULT_RUNS_DIR))


def setup_logging(level: Optional[str] = None) -> None:
    """Configure the diagnostic logger once; level from LMA_LOG_LEVEL by default"""
    level_name = (level or os.getenv("LMA_LOG_LEVEL", "INFO")).upper()
    logging.basicConfig(level=getattr(logging, level_name, logging.INFO), format=LOG_FORMAT)


def read_json(path: str) -> Dict[str, Any]:
    """Read a JSON config file, turning syntax errors into ConfigError"""
    if not os.path.exists(path):
        raise FileNotFoundError(
            f"Config file not found at {path}. "
            "See configs/ for examples."
        )
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError([f"not valid JSON: {e}"], source=path) from e
    if not isinstance(data, dict):
        raise ConfigError(["top level must be an object"], source=path)
    return data


def _check_fields(data: Dict[str, Any], spec: Dict[str, tuple], prefix: str) -> List[str]:
    problems = []
    for key, value in data.items():
        if key not in spec:
            problems.append(f"{prefix}{key}: unknown field")
            continue
        allowed = spec[key]
        # bool is an int subclass; only accept it where bool is asked for
        if isinstance(value, bool) and bool not in allowed:
            problems.append(f"{prefix}{key}: expected {_type_names(allowed)}, got bool")
        elif not isinstance(value, allowed):
            problems.append(f"{prefix}{key}: expected {_type_names(allowed)}, got {type(value).__name__}")
    return problems


def _type_names(types: tuple) -> str:
    return " or ".join("null" if t is type(None) else t.__name__ for t in types)


def parse_backbone(data: Dict[str, Any], problems: List[str]) -> BackboneConfig:
    """Parse the nested backbone object, appending problems instead of raising"""
    problems.extend(_check_fields(data, _BACKBONE_FIELDS, "backbone."))
    clean = _well_typed(data, _BACKBONE_FIELDS)
    blocks_data = clean.pop("blocks", None)
    head_data = clean.pop("head", None)
    config = BackboneConfig(**clean)
    if blocks_data is not None:
        config.blocks = []
        for i, block in enumerate(blocks_data):
            try:
                config.blocks.append(BlockSpec(**block))
            except TypeError as e:
                problems.append(f"backbone.blocks[{i}]: {e}")
    if head_data is not None:
        try:
            config.head = HeadSpec(**head_data)
        except TypeError as e:
            problems.append(f"backbone.head: {e}")
    return config


def _well_typed(data: Dict[str, Any], spec: Dict[str, tuple]) -> Dict[str, Any]:
    """Keep only known fields whose values passed the type check"""
    return {
        k: v for k, v in data.items()
        if k in spec and isinstance(v, spec[k]) and not (isinstance(v, bool) and bool not in spec[k])
    }


def parse_run_config(data: Dict[str, Any], source: Optional[str] = None) -> RunConfig:
    """
    Build a RunConfig from a decoded JSON object.

    Args:
        data: decoded config document
        source: file name for error messages

    Returns:
        Validated RunConfig

    Raises:
        ConfigError listing every problem found
    """
    problems = []
    data = dict(data)
    backbone_data = data.pop("backbone", {})
    if not isinstance(backbone_data, dict):
        problems.append("backbone: expected object")
        backbone_data = {}
    problems.extend(_check_fields(data, _RUN_FIELDS, ""))
    if "dataset_path" not in data:
        problems.append("dataset_path: required")

    clean = _well_typed(data, _RUN_FIELDS)
    if "mode" in clean:
        try:
            clean["mode"] = ModelMode(clean["mode"])
        except ValueError:
            problems.append(
                f"mode: must be one of {[m.value for m in ModelMode]}, got {clean.pop('mode')!r}"
            )
    if "optimizer" in clean:
        try:
            clean["optimizer"] = OptimizerKind(clean["optimizer"])
        except ValueError:
            problems.append(
                f"optimizer: must be one of {[o.value for o in OptimizerKind]}, got {clean.pop('optimizer')!r}"
            )

    backbone = parse_backbone(backbone_data, problems)
    config = RunConfig(dataset_path=clean.pop("dataset_path", ""), backbone=backbone, **clean)
    # Ill-typed fields fell back to defaults above, so semantic checks still run
    try:
        problems.extend(config.validate())
    except TypeError as e:
        problems.append(f"backbone: {e}")
    if problems:
        raise ConfigError(problems, source=source)
    return config


def load_run_config(path: str, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Load a run config file; overrides (e.g. from CLI flags) win over file values"""
    data = read_json(path)
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    return parse_run_config(data, source=path)


def save_run_config(config: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
