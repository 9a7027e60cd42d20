"""Run configuration: one schema-validated JSON document drives the CLI.

The document has five sections (data, model, train, eval, detector) plus a
seed.  Unknown keys are rejected at every level so typos fail loudly, and
``key.path=value`` overrides let flags patch a config file.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema

from .attention import SELF_VARIANTS
from .matcher import PipelineConfig
from .training import STAGES, TrainConfig


class ConfigError(ValueError):
    pass


DETECTOR_KINDS = ("none", "nms", "grid", "threshold")

DEFAULTS: dict = {
    "seed": 0,
    "data": {
        "corpus": None,
        "holdout": None,
        "n_pairs": 50,
        "size": [256, 256],
        "mode": "homography",
        "noise_sigma": 0.02,
        "image_dir": None,
    },
    "model": {
        "scales": [8, 4, 2],
        "channels": [32, 64, 96],
        "heads": 4,
        "temperature": 0.1,
        "threshold": 0.2,
        "coarse_blocks": 6,
        "coarse_self_variant": "linear",
        "coarse_cross_kernel": "linear",
        "self_variant": "lsa",
        "cross_variant": "lw",
        "lw_window": 10,
        "mt_topt": 32,
        "refine": True,
        "train_hw": None,
    },
    "train": {
        "stage": "coarse_only",
        "steps": 200,
        "lr": 1e-3,
        "gamma": 2.0,
        "loss_kind": "focal",
        "cosine_decay": True,
        "weight_refine": 1.0,
        "refine_cap": 1024,
    },
    "eval": {
        "ransac_threshold": 3.0,
        "ransac_iters": 1000,
        "auc_px": [3.0, 5.0, 10.0],
        "auc_deg": [5.0, 10.0, 20.0],
    },
    "detector": {
        "kind": "none",
        "nms_kernel": 5,
        "grid_cell": 4,
        "conf_threshold": 0.5,
    },
}


def _obj(properties: dict) -> dict:
    return {"type": "object", "additionalProperties": False,
            "properties": properties}


SCHEMA = _obj({
    "seed": {"type": "integer", "minimum": 0},
    "data": _obj({
        "corpus": {"type": ["string", "null"]},
        "holdout": {"type": ["string", "null"]},
        "n_pairs": {"type": "integer", "minimum": 1},
        "size": {"type": "array", "minItems": 2, "maxItems": 2,
                 "items": {"type": "integer", "minimum": 16}},
        "mode": {"enum": ["homography", "two_view"]},
        "noise_sigma": {"type": "number", "minimum": 0},
        "image_dir": {"type": ["string", "null"]},
    }),
    "model": _obj({
        "scales": {"type": "array", "minItems": 1,
                   "items": {"enum": [16, 8, 4, 2]}},
        "channels": {"type": "array", "minItems": 3, "maxItems": 3,
                     "items": {"type": "integer", "minimum": 1}},
        "heads": {"type": "integer", "minimum": 1},
        "temperature": {"type": "number", "exclusiveMinimum": 0},
        "threshold": {"type": "number", "minimum": 0, "maximum": 1},
        "coarse_blocks": {"type": "integer", "minimum": 2},
        "coarse_self_variant": {"enum": list(SELF_VARIANTS)},
        "coarse_cross_kernel": {"enum": ["softmax", "linear"]},
        "self_variant": {"enum": list(SELF_VARIANTS)},
        "cross_variant": {"enum": ["lw", "mt"]},
        "lw_window": {"type": "integer", "minimum": 1},
        "mt_topt": {"type": "integer", "minimum": 1},
        "self_params": _obj({
            "lsa_window": {"type": "integer", "minimum": 1},
            "gsa_rate": {"type": "integer", "minimum": 1},
            "topk": {"type": "integer", "minimum": 1},
            "lka_local": {"type": "integer", "minimum": 1},
            "lka_dilated": {"type": "integer", "minimum": 1},
            "lka_dilation": {"type": "integer", "minimum": 1},
            "pola_query": {"type": "integer", "minimum": 1},
            "pola_key": {"type": "integer", "minimum": 1},
        }),
        "refine": {"type": "boolean"},
        "train_hw": {"type": ["array", "null"], "minItems": 2, "maxItems": 2,
                     "items": {"type": "integer", "minimum": 1}},
    }),
    "train": _obj({
        "stage": {"enum": list(STAGES) + ["progressive"]},
        "steps": {"type": "integer", "minimum": 1},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "gamma": {"type": "number", "minimum": 0},
        "loss_kind": {"enum": ["focal", "ce"]},
        "cosine_decay": {"type": "boolean"},
        "weight_refine": {"type": "number", "minimum": 0},
        "refine_cap": {"type": "integer", "minimum": 0},
    }),
    "eval": _obj({
        "ransac_threshold": {"type": "number", "exclusiveMinimum": 0},
        "ransac_iters": {"type": "integer", "minimum": 1},
        "auc_px": {"type": "array", "minItems": 1,
                   "items": {"type": "number", "exclusiveMinimum": 0}},
        "auc_deg": {"type": "array", "minItems": 1,
                    "items": {"type": "number", "exclusiveMinimum": 0}},
    }),
    "detector": _obj({
        "kind": {"enum": list(DETECTOR_KINDS)},
        "nms_kernel": {"type": "integer", "minimum": 3},
        "grid_cell": {"type": "integer", "minimum": 2},
        "conf_threshold": {"type": "number", "minimum": 0, "maximum": 1},
    }),
})


def _deep_merge(base: dict, patch: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in patch.items():
        where = f"{path}.{key}" if path else key
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key.path=value")
    key, raw = text.split("=", 1)
    keys = key.strip().split(".")
    if not all(keys):
        raise ConfigError(f"bad override key {key!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # unquoted strings (e.g. detector.kind=nms)
    return keys, value


def _apply_override(doc: dict, keys: list[str], value: object) -> None:
    node = doc
    for key in keys[:-1]:
        if not isinstance(node.get(key), dict):
            node[key] = {}
        node = node[key]
    node[keys[-1]] = value


@dataclass
class RunConfig:
    """Validated run document with typed views into each section."""

    doc: dict

    @property
    def seed(self) -> int:
        return self.doc["seed"]

    def section(self, name: str) -> dict:
        return self.doc[name]

    def pipeline_config(self) -> PipelineConfig:
        return PipelineConfig.from_dict(self.doc["model"])

    def train_config(self, stage: str | None = None,
                     steps: int | None = None) -> TrainConfig:
        t = self.doc["train"]
        return TrainConfig(stage=stage or t["stage"],
                           steps=steps or t["steps"], lr=t["lr"],
                           seed=self.seed, gamma=t["gamma"],
                           loss_kind=t["loss_kind"],
                           cosine_decay=t["cosine_decay"],
                           weight_refine=t["weight_refine"],
                           refine_cap=t["refine_cap"])

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.doc, fh, indent=1, sort_keys=True)


def validate_document(doc: dict) -> None:
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from exc


def load_run_config(path=None, overrides: tuple[str, ...] = ()) -> RunConfig:
    """Defaults <- config file <- key.path=value overrides, then validate."""
    doc = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path) as fh:
                loaded = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config document must be a JSON object")
        doc = _deep_merge(doc, loaded)
    for text in overrides:
        keys, value = _parse_override(text)
        _apply_override(doc, keys, value)
    validate_document(doc)
    # the dataclass layer re-validates cross-field constraints
    cfg = RunConfig(doc)
    try:
        cfg.pipeline_config()
        if doc["train"]["stage"] != "progressive":
            cfg.train_config()
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg
