"""Dice scoring, region composition and report files."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np

from .exceptions import ShapeError, ValidationError

GAP = "n/a"

# Row order of comparison grids: baselines first, the target-trained oracle last.
METHOD_ORDER = ["direct", "tent-1shot", "tent-10shot", "adaptive-unet", "oracle"]
METHOD_TITLES = {
    "direct": "Direct Testing",
    "tent-1shot": "TENT (one-shot)",
    "tent-10shot": "TENT (ten-shot)",
    "adaptive-unet": "Adaptive UNet (zero-shot)",
    "oracle": "Oracle",
}


def _as_int_array(a) -> np.ndarray:
    a = np.asarray(a.detach().cpu() if hasattr(a, "detach") else a)
    if a.dtype.kind not in "iub":
        if not np.all(np.equal(np.mod(a, 1), 0)):
            raise ValidationError("masks must hold integer labels")
        a = a.astype(np.int64)
    return a


def _dice_sets(p: np.ndarray, g: np.ndarray) -> float:
    sp, sg = int(p.sum()), int(g.sum())
    if sp == 0 and sg == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / (sp + sg)


def dice_score(pred_mask, gt_mask, class_id: int) -> float:
    """``2|P & G| / (|P| + |G|)`` for one class; 1.0 when both are empty."""
    p, g = _as_int_array(pred_mask), _as_int_array(gt_mask)
    if p.shape != g.shape:
        raise ShapeError(f"pred {p.shape} and ground truth {g.shape} differ")
    return _dice_sets(p == class_id, g == class_id)


def region_dice(pred_mask, gt_mask, spec: Mapping[str, Iterable[int]], num_classes: Optional[int] = None) -> Dict[str, float]:
    """Dice per named region, each region being the union of its labels."""
    p, g = _as_int_array(pred_mask), _as_int_array(gt_mask)
    if p.shape != g.shape:
        raise ShapeError(f"pred {p.shape} and ground truth {g.shape} differ")
    out = {}
    for name, labels in spec.items():
        labels = sorted(set(int(v) for v in labels))
        if not labels:
            raise ValidationError(f"region {name!r} has no labels")
        bad = [v for v in labels if v < 0 or (num_classes is not None and v >= num_classes)]
        if bad:
            raise ValidationError(f"region {name!r} uses unknown labels {bad}")
        out[name] = _dice_sets(np.isin(p, labels), np.isin(g, labels))
    return out


def default_regions(num_classes: int) -> Dict[str, List[int]]:
    """Nested tumour-style regions for ``num_classes=4`` label maps (1 outer, 3 innermost).

    WT is every foreground label, TC drops the outer label, ET is the innermost.
    """
    if num_classes != 4:
        return {}
    return {"WT": [1, 2, 3], "TC": [2, 3], "ET": [3]}


@dataclass
class DiceReport:
    per_instance: Dict[str, Dict[int, float]]
    classes: List[int]
    region_scores: Optional[Dict[str, float]] = None
    per_instance_regions: Optional[Dict[str, Dict[str, float]]] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for iid, scores in self.per_instance.items():
            for c, v in scores.items():
                if not 0.0 <= v <= 1.0:
                    raise ValidationError(f"Dice {v} for instance {iid} class {c} outside [0, 1]")

    @property
    def per_class_mean(self) -> List[float]:
        ids = sorted(self.per_instance)
        return [float(np.mean([self.per_instance[i][c] for i in ids])) for c in self.classes]

    @property
    def mean_dice(self) -> float:
        return float(np.mean(self.per_class_mean))

    def to_dict(self) -> dict:
        d = {
            "per_instance": {i: {str(c): v for c, v in s.items()} for i, s in sorted(self.per_instance.items())},
            "classes": list(self.classes),
            "per_class_mean": self.per_class_mean,
            "mean_dice": self.mean_dice,
            "metadata": self.metadata,
        }
        if self.region_scores:
            d["region_scores"] = self.region_scores
            d["per_instance_regions"] = self.per_instance_regions
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DiceReport":
        return cls(
            {i: {int(c): float(v) for c, v in s.items()} for i, s in d["per_instance"].items()},
            [int(c) for c in d["classes"]],
            d.get("region_scores"),
            d.get("per_instance_regions"),
            d.get("metadata", {}),
        )

    def __eq__(self, other):
        return isinstance(other, DiceReport) and self.to_dict() == other.to_dict()


def score_instance(pred_mask, gt_mask, num_classes: int, regions=None):
    classes = list(range(1, num_classes)) if num_classes > 1 else [1]
    per_class = {c: dice_score(pred_mask, gt_mask, c) for c in classes}
    reg = region_dice(pred_mask, gt_mask, regions, num_classes) if regions else None
    return per_class, reg


def build_report(
    predictions: Mapping[str, np.ndarray],
    ground_truth: Mapping[str, np.ndarray],
    num_classes: int,
    regions: Optional[Mapping[str, Iterable[int]]] = None,
    metadata: Optional[dict] = None,
) -> DiceReport:
    """Score every instance and aggregate with an unweighted mean over instances.

    This is the single scoring path used by every method.
    """
    if set(predictions) != set(ground_truth):
        raise ValidationError("predictions and ground truth cover different instances")
    per_instance, per_regions = {}, {}
    for iid in sorted(predictions):
        pc, reg = score_instance(predictions[iid], ground_truth[iid], num_classes, regions)
        per_instance[iid] = pc
        if reg is not None:
            per_regions[iid] = reg
    region_scores = None
    if regions:
        region_scores = {r: float(np.mean([per_regions[i][r] for i in per_regions])) for r in regions}
    classes = list(range(1, num_classes)) if num_classes > 1 else [1]
    return DiceReport(per_instance, classes, region_scores, per_regions or None, dict(metadata or {}))


# ---------------------------------------------------------------- emission


def _cell(report: DiceReport) -> str:
    if report.region_scores:
        return "/".join(f"{100 * v:.2f}" for v in report.region_scores.values())
    return f"{100 * report.mean_dice:.2f}"


def _method_key(m: str) -> tuple:
    return (METHOD_ORDER.index(m) if m in METHOD_ORDER else len(METHOD_ORDER) - 0.5, m)


def comparison_grid(reports: Sequence[DiceReport]) -> str:
    """Markdown table: one row per method (direct first, oracle last), one column per shift."""
    cells: Dict[str, Dict[str, str]] = {}
    shifts: List[str] = []
    for r in reports:
        method = r.metadata.get("method", "unknown")
        shift = r.metadata.get("shift", "target")
        if shift not in shifts:
            shifts.append(shift)
        cells.setdefault(method, {})[shift] = _cell(r)
    return grid_markdown(cells, shifts)


def grid_markdown(cells: Dict[str, Dict[str, str]], shifts: Sequence[str]) -> str:
    lines = ["| Method | " + " | ".join(shifts) + " |", "|---|" + "---|" * len(shifts)]
    for method in sorted(cells, key=_method_key):
        row = [cells[method].get(s, GAP) for s in shifts]
        lines.append(f"| {METHOD_TITLES.get(method, method)} | " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def emit_report(report: Union[DiceReport, Sequence[DiceReport]], path, format: str = "json") -> Path:
    """Write a report as json (lossless), csv (one row per instance and class)
    or a markdown comparison grid. A list of reports is accepted for csv and
    markdown."""
    path = Path(path)
    reports = [report] if isinstance(report, DiceReport) else list(report)
    if not reports:
        raise ValidationError("nothing to emit")
    path.parent.mkdir(parents=True, exist_ok=True)
    if format == "json":
        if len(reports) != 1:
            raise ValidationError("json output takes exactly one report")
        path.write_text(json.dumps(reports[0].to_dict(), indent=2, sort_keys=True))
    elif format == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "shift", "instance_id", "class", "dice"])
            for r in reports:
                for iid in sorted(r.per_instance):
                    for c in r.classes:
                        w.writerow([r.metadata.get("method", ""), r.metadata.get("shift", ""), iid, c,
                                    repr(r.per_instance[iid][c])])
    elif format in ("markdown", "markdown_table", "md"):
        path.write_text(comparison_grid(reports))
    else:
        raise ValidationError(f"unknown report format {format!r}")
    return path


def load_report(path) -> DiceReport:
    return DiceReport.from_dict(json.loads(Path(path).read_text()))
