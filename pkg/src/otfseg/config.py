"""Experiment configuration: one YAML document with a section per module.

Precedence (highest first): command-line flags (``--seed``, ``--output-dir``,
``--set section.key=value``), then the ``--config`` file, then the
defaults below. Relative dataset and checkpoint paths resolve against
``output_dir``.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import yaml

from .baselines import TentConfig
from .data import SHIFT_PRESETS
from .dpg import DPGConfig
from .exceptions import ValidationError
from .experiment import CORPUS_DOMAINS, DESK_DPG_TRAIN, DESK_TRAIN
from .training import TrainConfig

SECTIONS = ("experiment", "data", "paths", "arch", "dpg", "dpg_train", "train", "tent", "regions")


def default_config() -> dict:
    """The committed desk-scale preset (64x64, 2 classes, strong shift)."""
    doc = {
        "experiment": {"name": "desk-strong-shift", "seed": 0, "output_dir": "runs/desk"},
        "data": {
            "size": [64, 64],
            "num_classes": 2,
            "n_train": 200,
            "n_test": 50,
            "shift": "strong",
            "corpus_domains": list(CORPUS_DOMAINS),
            "corpus_per_domain": 67,
        },
        "paths": {
            "source": "data/source",
            "target": "data/target",
            "dpg_corpus": [f"data/corpus_{d}" for d in CORPUS_DOMAINS],
            "checkpoints": "checkpoints",
            "runs": "runs",
        },
        "arch": {"base_channels": 16, "convs_per_block": 2, "track_running_stats": False},
        "dpg": {k: v for k, v in DPGConfig().to_dict().items() if k not in ("dimensionality", "code_channels")},
        "dpg_train": TrainConfig(**DESK_DPG_TRAIN).to_dict(),
        "train": TrainConfig(**DESK_TRAIN).to_dict(),
        "tent": TentConfig().to_dict(),
        "regions": None,
    }
    return json.loads(json.dumps(doc))  # tuples become lists so the document dumps as plain YAML


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in out:
            raise ValidationError(f"unknown config key {where}{k!r}")
        if isinstance(out[k], dict) and isinstance(v, dict) and k != "regions":
            out[k] = _merge(out[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def _parse_override(item: str):
    if "=" not in item:
        raise ValidationError(f"--set expects section.key=value, got {item!r}")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    if len(parts) < 2:
        raise ValidationError(f"--set key must name a section, got {key!r}")
    tree = value = yaml.safe_load(raw)
    for p in reversed(parts):
        tree = {p: tree}
    return tree, value


@dataclass
class ExperimentConfig:
    """Resolved experiment configuration; ``raw`` holds the merged document."""

    raw: dict = field(default_factory=default_config)

    def __post_init__(self):
        self.validate()

    # -------------------------------------------------------------- loading

    @classmethod
    def load(cls, path=None, seed: Optional[int] = None, output_dir=None, overrides: Optional[List[str]] = None):
        doc = default_config()
        if path is not None:
            text = Path(path).read_text()
            try:
                user = yaml.safe_load(text) or {}
            except yaml.YAMLError as exc:
                raise ValidationError(f"config {path} is not valid YAML: {exc}") from exc
            if not isinstance(user, dict):
                raise ValidationError(f"config {path} must be a mapping of sections")
            doc = _merge(doc, user)
        for item in overrides or []:
            tree, _ = _parse_override(item)
            doc = _merge(doc, tree)
        if seed is not None:
            doc["experiment"]["seed"] = int(seed)
        if output_dir is not None:
            doc["experiment"]["output_dir"] = str(output_dir)
        return cls(doc)

    def validate(self) -> None:
        d = self.raw
        missing = [s for s in SECTIONS if s not in d]
        if missing:
            raise ValidationError(f"config is missing sections {missing}")
        data = d["data"]
        if len(data["size"]) not in (2, 3):
            raise ValidationError("data.size must have 2 or 3 entries")
        if data["shift"] not in SHIFT_PRESETS:
            raise ValidationError(f"unknown shift preset {data['shift']!r}; known: {sorted(SHIFT_PRESETS)}")
        for name in data["corpus_domains"]:
            if name not in SHIFT_PRESETS:
                raise ValidationError(f"unknown corpus domain preset {name!r}")
        # constructing the typed sections validates them
        self.train_config, self.dpg_train_config, self.tent_config, self.dpg_config

    # -------------------------------------------------------------- views

    @property
    def seed(self) -> int:
        return int(self.raw["experiment"]["seed"])

    @property
    def name(self) -> str:
        return str(self.raw["experiment"]["name"])

    @property
    def output_dir(self) -> Path:
        return Path(self.raw["experiment"]["output_dir"])

    @property
    def dimensionality(self) -> int:
        return len(self.raw["data"]["size"])

    @property
    def num_classes(self) -> int:
        return int(self.raw["data"]["num_classes"])

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict({**self.raw["train"], "seed": self.seed})

    @property
    def dpg_train_config(self) -> TrainConfig:
        return TrainConfig.from_dict({**self.raw["dpg_train"], "seed": self.seed})

    @property
    def tent_config(self) -> TentConfig:
        return TentConfig(**self.raw["tent"])

    @property
    def dpg_config(self) -> DPGConfig:
        return DPGConfig.from_dict({**self.raw["dpg"], "dimensionality": self.dimensionality})

    @property
    def regions(self) -> Optional[Dict[str, List[int]]]:
        return self.raw["regions"] or None

    def path(self, key: str) -> Path:
        p = Path(self.raw["paths"][key])
        return p if p.is_absolute() else self.output_dir / p

    def corpus_paths(self) -> List[Path]:
        return [p if p.is_absolute() else self.output_dir / p for p in map(Path, self.raw["paths"]["dpg_corpus"])]

    def checkpoint_dir(self, name: str) -> Path:
        return self.path("checkpoints") / name

    def run_dir(self, name: str) -> Path:
        return self.path("runs") / name

    # -------------------------------------------------------------- identity

    def canonical(self) -> str:
        return json.dumps(self.raw, sort_keys=True, separators=(",", ":"))

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def dump(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.raw, sort_keys=False))
        return path
