"""Command-line runner: ``otfseg <subcommand> [options]``.

Subcommands compose into the full pipeline::

    otfseg --output-dir run synth
    otfseg --output-dir run pretrain-dpg
    otfseg --output-dir run train --model adaptive
    otfseg --output-dir run train --model plain
    otfseg --output-dir run adapt
    otfseg --output-dir run baseline --method direct
    otfseg --output-dir run report

Exit codes: 0 success, 1 validation error, 2 contract violation, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .baselines import direct_test, tent_adapt
from .checkpoint import ModelCheckpoint
from .config import ExperimentConfig
from .data import load_dataset
from .dpg import build_dpg, pretrain_dpg, reconstruction_mse
from .evaluation import emit_report, load_report
from .exceptions import ContractError, ValidationError
from .experiment import ShiftExperiment, make_datasets
from .inference import TestInstance, episodic_eval, instances_from_manifest, run_episodes
from .model import ArchConfig, build_model
from .training import train_plain, train_source, write_loss_csv

log = logging.getLogger("otfseg")

EXIT_OK, EXIT_VALIDATION, EXIT_CONTRACT, EXIT_IO = 0, 1, 2, 3


# ---------------------------------------------------------------- helpers


def _provenance(cfg: ExperimentConfig, command: str, argv: List[str], **extra) -> dict:
    import torch

    return {
        "command": command,
        "argv": argv,
        "config_hash": cfg.config_hash,
        "config": cfg.raw,
        "seed": cfg.seed,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "versions": {"otfseg": __version__, "python": platform.python_version(), "numpy": np.__version__,
                     "torch": torch.__version__},
        **extra,
    }


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str))
    return path


def _claim_dir(path: Path, force: bool) -> Path:
    """Refuse to write into a non-empty directory unless ``force``."""
    if path.exists() and any(path.iterdir()) and not force:
        raise FileExistsError(f"{path} already exists and is not empty (use --force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_ckpt(path: Path, kind: str) -> ModelCheckpoint:
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    ckpt = ModelCheckpoint.load(path)
    if ckpt.kind != kind:
        raise ContractError(f"{path} holds a {ckpt.kind!r} checkpoint, expected {kind!r}")
    return ckpt


def _shift_label(cfg: ExperimentConfig, target) -> str:
    return f"source->{target.domain_tag}"


def _save_model(ckpt: ModelCheckpoint, out: Path, cfg: ExperimentConfig, argv, command, force, **extra):
    _claim_dir(out, force)
    ckpt.metadata["config_hash"] = cfg.config_hash
    ckpt.save(out)
    write_loss_csv(ckpt.metadata.get("loss_curve", []), out / "loss.csv")
    _write_json(out / "provenance.json",
                _provenance(cfg, command, argv, output_fingerprint=ckpt.fingerprint, **extra))
    log.info("wrote %s (fingerprint %s)", out, ckpt.fingerprint)


# ---------------------------------------------------------------- commands


def cmd_synth(cfg: ExperimentConfig, args, argv) -> dict:
    d = cfg.raw["data"]
    exp = ShiftExperiment(size=tuple(d["size"]), num_classes=d["num_classes"], n_train=d["n_train"],
                          n_test=d["n_test"], shift=d["shift"], corpus_domains=tuple(d["corpus_domains"]),
                          corpus_per_domain=d["corpus_per_domain"], seed=cfg.seed)
    target = cfg.path("target")
    paths = {"source": cfg.path("source"), "target": target,
             "target_base": target.parent / f"{target.name}_base", "corpus": cfg.corpus_paths()}
    out = make_datasets(cfg.output_dir / "data", exp, force=args.force, paths=paths)
    hashes = {"source": out["source"].content_hash(), "target": out["target"].content_hash(),
              "corpus": [c.content_hash() for c in out["corpus"]]}
    cfg.dump(cfg.output_dir / "config.yaml")
    _write_json(cfg.output_dir / "data" / "provenance.json", _provenance(cfg, "synth", argv, dataset_hashes=hashes))
    return hashes


def cmd_pretrain_dpg(cfg: ExperimentConfig, args, argv) -> dict:
    corpus = [load_dataset(p) for p in cfg.corpus_paths()]
    dcfg = cfg.dpg_config
    dpg = pretrain_dpg(corpus, dcfg, cfg.dpg_train_config)
    held_out = load_dataset(cfg.path("source")).arrays("test")[0]
    mse = reconstruction_mse(dpg, held_out, seed=cfg.seed)
    base = reconstruction_mse(build_dpg(dcfg, cfg.seed), held_out, seed=cfg.seed)
    dpg.metadata.update({"held_out_mse": mse, "untrained_mse": base})
    log.info("held-out reconstruction MSE %.5f (untrained %.5f, ratio %.3f)", mse, base, mse / base)
    _save_model(dpg, cfg.checkpoint_dir("dpg"), cfg, argv, "pretrain-dpg", args.force,
                corpus_hashes=[c.content_hash() for c in corpus])
    return {"fingerprint": dpg.fingerprint, "held_out_mse": mse, "untrained_mse": base}


def cmd_train(cfg: ExperimentConfig, args, argv) -> dict:
    a = cfg.raw["arch"]
    if args.oracle:
        dataset, model_kind, name = load_dataset(cfg.path("target")), "plain", "oracle"
    else:
        dataset, model_kind, name = load_dataset(cfg.path("source")), args.model, args.model
    extra = {"dataset_hash": dataset.content_hash()}
    if model_kind == "adaptive":
        dpg = _load_ckpt(cfg.checkpoint_dir("dpg"), "dpg")
        dpg_fp = dpg.fingerprint
        arch = ArchConfig(cfg.dimensionality, 1, cfg.num_classes, a["base_channels"], "adabn",
                          cfg.dpg_config.code_channels, a["convs_per_block"],
                          track_running_stats=a["track_running_stats"])
        ckpt = train_source(build_model(arch, cfg.seed), dpg, dataset, cfg.train_config)
        if dpg.fingerprint != dpg_fp:
            raise ContractError("DPG changed during training")
        extra["dpg_fingerprint"] = dpg_fp
    else:
        arch = ArchConfig(cfg.dimensionality, 1, cfg.num_classes, a["base_channels"], "bn",
                          convs_per_block=a["convs_per_block"])
        ckpt = train_plain(build_model(arch, cfg.seed), dataset, cfg.train_config)
    _save_model(ckpt, cfg.checkpoint_dir(name), cfg, argv, f"train:{name}", args.force, **extra)
    return {"checkpoint": name, "fingerprint": ckpt.fingerprint,
            "final_loss": ckpt.metadata["loss_curve"][-1]["mean_loss"] if ckpt.metadata["loss_curve"] else None}


def _test_set(cfg: ExperimentConfig, source: Optional[str], split: str):
    """Instances from a dataset directory, a single ``.npy`` image, or the configured target."""
    if source is None:
        ds = load_dataset(cfg.path("target"))
        return instances_from_manifest(ds, split), _shift_label(cfg, ds)
    p = Path(source)
    if p.is_file():
        image = np.load(p, allow_pickle=False).astype(np.float32)
        if image.ndim == cfg.dimensionality:
            image = image[None]
        return [TestInstance(image, p.stem)], f"source->{p.stem}"
    ds = load_dataset(p)
    return instances_from_manifest(ds, split), _shift_label(cfg, ds)


def cmd_adapt(cfg: ExperimentConfig, args, argv) -> dict:
    model = _load_ckpt(Path(args.checkpoint) if args.checkpoint else cfg.checkpoint_dir("adaptive"), "unet")
    dpg = _load_ckpt(Path(args.dpg) if args.dpg else cfg.checkpoint_dir("dpg"), "dpg")
    test_set, shift = _test_set(cfg, args.input, args.split)
    out = _claim_dir(Path(args.run_dir) if args.run_dir else cfg.run_dir("adaptive-unet"), args.force)
    before = (model.fingerprint, dpg.fingerprint)
    results = run_episodes(model, dpg, test_set)
    (out / "masks").mkdir(exist_ok=True)
    for r in results:
        np.save(out / "masks" / f"{r.instance_id}.npy", r.mask.astype(np.uint8))
    summary = {"n_instances": len(results), "mean_episode_seconds": float(np.mean([r.wall_time for r in results]))}
    if all(t.ground_truth is not None for t in test_set):
        report = episodic_eval(model, dpg, test_set, cfg.regions,
                               {"shift": shift, "config_hash": cfg.config_hash,
                                "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z")})
        emit_report(report, out / "report.json", "json")
        summary["mean_dice"] = report.mean_dice
    else:
        _write_json(out / "episodes.json", [{"instance_id": r.instance_id, "wall_time": r.wall_time,
                                             "code_fingerprint": r.code_fingerprint} for r in results])
    after = (model.fingerprint, dpg.fingerprint)
    if before != after:
        raise ContractError("checkpoint weights changed during episodic adaptation")
    log.info("weight hashes unchanged across %d episodes: model %s, dpg %s", len(results), *after)
    _write_json(out / "provenance.json", _provenance(cfg, "adapt", argv, model_fingerprint=after[0],
                                                     dpg_fingerprint=after[1], weights_unchanged=True, **summary))
    return summary


def cmd_baseline(cfg: ExperimentConfig, args, argv) -> dict:
    name = "oracle" if args.method == "oracle" else "plain"
    model = _load_ckpt(Path(args.checkpoint) if args.checkpoint else cfg.checkpoint_dir(name), "unet")
    test_set, shift = _test_set(cfg, args.input, args.split)
    meta = {"shift": shift, "config_hash": cfg.config_hash, "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z")}
    if args.method in ("direct", "oracle"):
        report = direct_test(model, test_set, regions=cfg.regions, metadata={**meta, "method": args.method})
        label, adapted = args.method, None
    else:
        tent = cfg.tent_config
        tent.shots = args.shots if args.shots is not None else tent.shots
        if args.lr is not None:
            tent.lr = args.lr
        tent.__post_init__()
        adapted, report = tent_adapt(model, test_set, tent, cfg.regions, meta)
        label = report.metadata["method"]
    out = _claim_dir(Path(args.run_dir) if args.run_dir else cfg.run_dir(label), args.force)
    emit_report(report, out / "report.json", "json")
    extra = {"model_fingerprint": model.fingerprint, "mean_dice": report.mean_dice}
    if adapted is not None:
        extra["adapted_fingerprint"] = adapted.fingerprint
    _write_json(out / "provenance.json", _provenance(cfg, f"baseline:{label}", argv, **extra))
    return {"method": label, "mean_dice": report.mean_dice}


def cmd_report(cfg: ExperimentConfig, args, argv) -> dict:
    dirs = [Path(d) for d in args.run_dirs] or sorted(p for p in cfg.path("runs").glob("*") if p.is_dir())
    reports = []
    for d in dirs:
        path = d / "report.json" if d.is_dir() else d
        if not path.is_file():
            raise FileNotFoundError(f"no report.json in {d}")
        reports.append(load_report(path))
    if not reports:
        raise ValidationError("no run reports found")
    out = Path(args.out) if args.out else cfg.output_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    emit_report(reports, out / "grid.md", "markdown_table")
    emit_report(reports, out / "scores.csv", "csv")
    print((out / "grid.md").read_text(), end="")
    return {"n_reports": len(reports), "grid": str(out / "grid.md")}


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="otfseg", description="On-the-fly test-time adaptation for segmentation")
    p.add_argument("--config", type=Path, help="YAML experiment config")
    p.add_argument("--seed", type=int, help="overrides experiment.seed")
    p.add_argument("--output-dir", type=Path, help="overrides experiment.output_dir")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", help="generate source, shifted target and DPG corpus datasets")
    sub.add_parser("pretrain-dpg", help="pretrain the domain prior autoencoder")

    t = sub.add_parser("train", help="train a segmenter on the source domain")
    t.add_argument("--model", choices=["adaptive", "plain"], default="adaptive")
    t.add_argument("--oracle", action="store_true", help="train a plain UNet on the target training split")

    for name, helptext in (("adapt", "episodic on-the-fly evaluation"), ("baseline", "direct testing or TENT")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--checkpoint", help="model checkpoint directory")
        s.add_argument("--input", help="dataset directory or a single .npy image (default: configured target)")
        s.add_argument("--split", default="test")
        s.add_argument("--run-dir", help="where to write masks and reports")
        if name == "adapt":
            s.add_argument("--dpg", help="DPG checkpoint directory")
        else:
            s.add_argument("--method", choices=["direct", "tent", "oracle"], default="direct")
            s.add_argument("--shots", type=int, help="TENT epochs over the test set")
            s.add_argument("--lr", type=float, help="TENT learning rate")

    r = sub.add_parser("report", help="comparison grid over run directories")
    r.add_argument("run_dirs", nargs="*", help="run directories (default: every run under the output dir)")
    r.add_argument("--out", help="output directory for grid.md and scores.csv")
    return p


COMMANDS = {
    "synth": cmd_synth,
    "pretrain-dpg": cmd_pretrain_dpg,
    "train": cmd_train,
    "adapt": cmd_adapt,
    "baseline": cmd_baseline,
    "report": cmd_report,
}


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config, args.seed, args.output_dir, args.set)
        result = COMMANDS[args.command](cfg, args, argv)
    except ContractError as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(json.dumps(result, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
