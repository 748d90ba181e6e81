"""Experiment configuration: a nested JSON document with four sections.

Schema (every key optional; missing keys take the defaults below)::

    {
      "data":       {"seed", "num_train_ids", "num_test_ids", "per_modality", "img_h", "img_w"},
      "train":      {any TrainConfig field except img_h / img_w, which follow "data"},
      "eval":       {"mode", "shots", "groups", "trials", "seed", "direction"},
      "experiment": {"name", "axis", "values", "seeds", "jobs"}
    }

Resolution order: defaults, then the config file, then ``section.key=value``
overrides (the CLI maps its flags onto these). The resolved document is
echoed as ``config.json`` into every output directory.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

from ..data import toy_benchmark
from ..errors import ContractError
from ..evaluation import EvalProtocol
from ..training import TrainConfig

SECTIONS = ("data", "train", "eval", "experiment")


@dataclass(frozen=True)
class DataConfig:
    seed: int = 0
    num_train_ids: int = 20
    num_test_ids: int = 10
    per_modality: int = 12
    img_h: int = 64
    img_w: int = 32

    def build(self):
        """(train, test) datasets."""
        return toy_benchmark(self.seed, self.num_train_ids, self.num_test_ids, self.per_modality,
                             self.img_h, self.img_w)


# Toy-scale training preset: a narrower, shallower encoder than the model
# defaults so that a full ablation grid fits in minutes on one CPU core.
TOY_TRAIN = {"dim": 32, "depth": 2, "heads": 4, "shared_center": True}

DEFAULTS = {
    "data": asdict(DataConfig()),
    "train": TOY_TRAIN,
    "eval": {"mode": "single_shot", "shots": None, "groups": 2, "trials": 10, "seed": 0,
             "direction": "ir_to_vis"},
    "experiment": {"name": "run", "axis": "none", "values": None, "seeds": [1, 2, 3], "jobs": 1},
}


@dataclass
class ResolvedConfig:
    data: DataConfig
    train: dict  # TrainConfig keyword overrides (without img_h / img_w / seed)
    eval: EvalProtocol
    experiment: dict

    def train_config(self, seed: int, **overrides) -> TrainConfig:
        kw = dict(self.train)
        kw.update(overrides)
        kw.update(img_h=self.data.img_h, img_w=self.data.img_w, seed=int(seed))
        return TrainConfig(**kw)

    def to_dict(self) -> dict:
        return {"data": asdict(self.data), "train": dict(self.train), "eval": asdict(self.eval),
                "experiment": dict(self.experiment)}

    def echo(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "config.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def _merge(base: dict, extra: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value, f"{where}{key}.")
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_value(text: str):
    """JSON literal if it parses, otherwise the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_override(item: str) -> tuple:
    """``"train.lam=2"`` -> (("train", "lam"), 2)."""
    if "=" not in item:
        raise ContractError(f"override {item!r} is not of the form section.key=value")
    key, value = item.split("=", 1)
    parts = tuple(key.strip().split("."))
    if len(parts) != 2 or parts[0] not in SECTIONS:
        raise ContractError(f"override key {key!r} must be <section>.<key> with section in {SECTIONS}")
    return parts, parse_value(value)


def resolve(path=None, overrides: Optional[list] = None) -> ResolvedConfig:
    doc = copy.deepcopy(DEFAULTS)
    if path is not None:
        loaded = json.loads(Path(path).read_text())
        unknown = set(loaded) - set(SECTIONS)
        if unknown:
            raise ContractError(f"unknown config sections: {sorted(unknown)}")
        doc = _merge(doc, loaded)
    for item in overrides or []:
        (section, key), value = item if isinstance(item, tuple) else parse_override(item)
        doc[section][key] = value
    return from_dict(doc)


def from_dict(doc: dict) -> ResolvedConfig:
    data_keys = {f.name for f in fields(DataConfig)}
    bad = set(doc["data"]) - data_keys
    if bad:
        raise ContractError(f"unknown data keys: {sorted(bad)}")
    data = DataConfig(**doc["data"])
    train = dict(doc["train"])
    for key in ("img_h", "img_w", "seed"):
        if key in train:
            raise ContractError(f"train.{key} is set elsewhere (data section or seed list)")
    # validates keys and values once
    TrainConfig.from_dict({**train, "img_h": data.img_h, "img_w": data.img_w})
    ev = EvalProtocol(**doc["eval"])
    exp = _merge(DEFAULTS["experiment"], doc["experiment"])
    unknown = set(exp) - set(DEFAULTS["experiment"])
    if unknown:
        raise ContractError(f"unknown experiment keys: {sorted(unknown)}")
    seeds = exp["seeds"]
    exp["seeds"] = [int(s) for s in (seeds if isinstance(seeds, list) else [seeds])]
    if not exp["seeds"]:
        raise ContractError("seed list must be nonempty")
    if int(exp["jobs"]) < 1:
        raise ContractError("jobs must be >= 1")
    return ResolvedConfig(data, train, ev, exp)
