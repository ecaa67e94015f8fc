"""Desk-scale synthetic domain-shift experiment.

Source and target domains are drawn from the same procedural generator with
different seeds; the target is then pushed through a :class:`ShiftSpec`
preset. The DPG corpus is a third, disjoint set of images spread over several
shift presets. Both segmenters get the same training budget.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple


from .baselines import direct_test
from .data import DatasetManifest, apply_domain_shift, synth_base_dataset
from .dpg import DPGConfig, pretrain_dpg
from .exceptions import ValidationError
from .inference import episodic_eval, instances_from_manifest
from .model import ArchConfig, build_model
from .training import TrainConfig, train_plain, train_source

log = logging.getLogger(__name__)

DESK_TRAIN = dict(lr_max=1e-3, lr_min=1e-5, epochs=30, batch_size=8)
DESK_DPG_TRAIN = dict(lr_max=2e-3, lr_min=1e-5, epochs=30, batch_size=8)
CORPUS_DOMAINS = ("identity", "bright", "lowres")


@dataclass
class ShiftExperiment:
    size: Tuple[int, ...] = (64, 64)
    num_classes: int = 2
    n_train: int = 200
    n_test: int = 50
    shift: str = "strong"
    corpus_domains: Sequence[str] = CORPUS_DOMAINS
    corpus_per_domain: int = 67
    base_channels: int = 16
    dpg: DPGConfig = field(default_factory=DPGConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(**DESK_TRAIN))
    dpg_train: TrainConfig = field(default_factory=lambda: TrainConfig(**DESK_DPG_TRAIN))
    seed: int = 0


def make_datasets(root, exp: ShiftExperiment, force: bool = False, paths: Optional[dict] = None) -> Dict[str, object]:
    """Write source, shifted target and the multi-domain DPG corpus under ``root``.

    ``paths`` may override the ``source``, ``target``, ``target_base`` and
    ``corpus`` (one per domain) locations.
    """
    root = Path(root)
    paths = paths or {}
    s = exp.seed
    corpus_paths = paths.get("corpus") or [root / f"corpus_{name}" for name in exp.corpus_domains]
    if len(corpus_paths) != len(exp.corpus_domains):
        raise ValidationError("need one corpus path per corpus domain")
    source = synth_base_dataset(paths.get("source", root / "source"), exp.n_train, exp.size, exp.num_classes,
                                seed=s * 7919 + 1, n_test=exp.n_test, domain_tag="source", force=force)
    target_base = synth_base_dataset(paths.get("target_base", root / "target_base"), exp.n_train, exp.size,
                                     exp.num_classes, seed=s * 7919 + 2, n_test=exp.n_test, domain_tag="target",
                                     force=force)
    target = apply_domain_shift(target_base, exp.shift, s * 7919 + 3, f"target_{exp.shift}",
                                paths.get("target", root / "target"), force=force)
    corpus = []
    for k, (name, out) in enumerate(zip(exp.corpus_domains, corpus_paths)):
        base = synth_base_dataset(Path(out).parent / f"{Path(out).name}_base", exp.corpus_per_domain, exp.size,
                                  exp.num_classes, seed=s * 7919 + 10 + k, domain_tag=f"corpus{k}", force=force)
        corpus.append(apply_domain_shift(base, name, s * 7919 + 20 + k, f"corpus_{name}", out, force=force))
    return {"source": source, "target": target, "corpus": corpus}


def run_shift_experiment(root, exp: ShiftExperiment, force: bool = False) -> Dict[str, float]:
    """Train both segmenters on the source domain and score them on source and target test splits."""
    t0 = time.time()
    data = make_datasets(root, exp, force=force)
    source: DatasetManifest = data["source"]
    target: DatasetManifest = data["target"]
    dims = len(exp.size)

    dpg_cfg = DPGConfig(**{**exp.dpg.to_dict(), "dimensionality": dims})
    dpg = pretrain_dpg(data["corpus"], dpg_cfg, replace(exp.dpg_train, seed=exp.seed))
    train_cfg = replace(exp.train, seed=exp.seed)

    ada = build_model(ArchConfig(dims, 1, exp.num_classes, exp.base_channels, "adabn", dpg_cfg.code_channels), exp.seed)
    ada = train_source(ada, dpg, source, train_cfg)
    plain = build_model(ArchConfig(dims, 1, exp.num_classes, exp.base_channels, "bn"), exp.seed)
    plain = train_plain(plain, source, train_cfg)

    src_test = instances_from_manifest(source, "test")
    tgt_test = instances_from_manifest(target, "test")
    out = {
        "direct_source": direct_test(plain, src_test).mean_dice,
        "direct_target": direct_test(plain, tgt_test).mean_dice,
        "adaptive_source": episodic_eval(ada, dpg, src_test).mean_dice,
        "adaptive_target": episodic_eval(ada, dpg, tgt_test).mean_dice,
        "seconds": time.time() - t0,
    }
    out["_checkpoints"] = {"dpg": dpg, "adaptive": ada, "plain": plain}
    out["_data"] = data
    log.info("shift experiment seed %d: %s", exp.seed, {k: v for k, v in out.items() if not k.startswith("_")})
    return out
