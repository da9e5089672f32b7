"""Experiment configuration: one YAML file, nested sections, ``CAMALKIT_`` environment overrides.

Schema (every key optional, defaults shown by ``default_config()``)::

    data:
      root: path of a dataset directory (images/, masks/, labels.csv)
      resize: null | int          # shorter-side resize before cropping
      crop: null | int            # centre crop size
      pseudo_masks: null | path   # masks/ directory for method 'prior'
    folds:
      k: 10
      seed: 0
    train:  any TrainConfig field (method, epochs, batch_size, learning_rate,
            weight_decay, lambda, seed, model, capture_layer, through_weights)
    evaluate:
      tau: 0.7
      k_step: 5                   # removal/insertion grid step in percent
      per_class: 1
      n_resamples: 10000
      seed: 0

Environment variables override file values: ``CAMALKIT_TRAIN__EPOCHS=5``
sets ``train.epochs``. Values are parsed as YAML scalars.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path

import yaml

from .errors import ValidationError
from .training import TrainConfig

ENV_PREFIX = "CAMALKIT_"

_DEFAULTS = {
    "data": {"root": None, "resize": None, "crop": None, "pseudo_masks": None},
    "folds": {"k": 10, "seed": 0},
    "train": {**TrainConfig().to_dict(), "mask_source": None},  # None: chosen by the method
    "evaluate": {"tau": 0.7, "k_step": 5, "per_class": 1, "n_resamples": 10_000, "seed": 0},
}


def default_config():
    return copy.deepcopy(_DEFAULTS)


def _merge(base, update, path=""):
    unknown = []
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            unknown.append(where)
        elif isinstance(base[key], dict):
            if not isinstance(value, dict):
                unknown.append(where)
            else:
                unknown += _merge(base[key], value, where + ".")
        else:
            base[key] = value
    return unknown


def env_overrides(environ=None):
    environ = os.environ if environ is None else environ
    out = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX) or "__" not in name:
            continue
        keys = name[len(ENV_PREFIX) :].lower().split("__")
        node = out
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = yaml.safe_load(raw)
    return out


def validate(cfg):
    bad = []
    if not isinstance(cfg["folds"]["k"], int) or cfg["folds"]["k"] < 2:
        bad.append("folds.k")
    ev = cfg["evaluate"]
    if not (isinstance(ev["tau"], (int, float)) and 0 < ev["tau"] < 1):
        bad.append("evaluate.tau")
    if not isinstance(ev["k_step"], int) or ev["k_step"] < 1 or 100 % ev["k_step"]:
        bad.append("evaluate.k_step")
    if not isinstance(ev["per_class"], int) or ev["per_class"] < 1:
        bad.append("evaluate.per_class")
    if not isinstance(ev["n_resamples"], int) or ev["n_resamples"] < 1000:
        bad.append("evaluate.n_resamples")
    if bad:
        raise ValidationError(f"invalid configuration values: {bad}", bad)
    try:
        train = TrainConfig.from_dict(cfg["train"])
    except ValidationError as exc:
        raise ValidationError(str(exc), [k if "." in k else f"train.{k}" for k in exc.keys]) from exc
    except TypeError as exc:
        raise ValidationError(f"invalid training values: {exc}", ["train"]) from exc
    if train.method == "prior" and not cfg["data"]["pseudo_masks"]:
        raise ValidationError("method 'prior' needs data.pseudo_masks", ["data.pseudo_masks"])
    return cfg


def load_config(path=None, environ=None, overrides=None):
    """Defaults <- file <- environment <- explicit ``overrides``; validated."""
    cfg = default_config()
    unknown = []
    if path is not None:
        try:
            content = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ValidationError(f"{path}: not valid YAML ({exc})", ["<file>"]) from exc
        if not isinstance(content, dict):
            raise ValidationError(f"{path}: top level must be a mapping", ["<file>"])
        unknown += _merge(cfg, content)
    unknown += _merge(cfg, env_overrides(environ))
    unknown += _merge(cfg, overrides or {})
    if unknown:
        raise ValidationError(f"unknown configuration keys: {unknown}", unknown)
    return validate(cfg)


def train_config(cfg):
    return TrainConfig.from_dict(cfg["train"])


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()
