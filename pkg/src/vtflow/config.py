"""Run configuration document: a JSON file with sections
{data, model, train, infer}. Unknown keys anywhere are rejected before any
work starts.
"""

import dataclasses
import json

from .errors import ConfigError, ContractError
from .infer import InferenceConfig
from .model import ModelConfig
from .train import TrainConfig

_DATA_KEYS = {"n": 256, "seed": 0, "split": "all"}
_SECTIONS = ("data", "model", "train", "infer")


def _build(section_name, cls, given):
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(given) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in section {section_name!r}: {sorted(unknown)}")
    return cls(**given)


def load_run_config(path):
    """Parse and validate a run config file.

    Returns a dict with keys data (plain dict), model (ModelConfig),
    train (TrainConfig), infer (InferenceConfig).
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read run config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: run config must be a JSON object")
    unknown = set(doc) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    data_given = doc.get("data", {})
    bad = set(data_given) - set(_DATA_KEYS)
    if bad:
        raise ConfigError(f"{path}: unknown keys in section 'data': {sorted(bad)}")
    data = dict(_DATA_KEYS)
    data.update(data_given)
    try:
        model = _build("model", ModelConfig, doc.get("model", {})).validate()
        train = _build("train", TrainConfig, doc.get("train", {})).validate()
        infer = _build("infer", InferenceConfig, doc.get("infer", {})).validate()
    except (TypeError, ContractError) as exc:
        raise ConfigError(f"{path}: bad config value: {exc}") from exc
    return {"data": data, "model": model, "train": train, "infer": infer}
