import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from otfseg.evaluation import (
    DiceReport,
    build_report,
    comparison_grid,
    dice_score,
    emit_report,
    load_report,
    region_dice,
)
from otfseg.exceptions import ShapeError, ValidationError


def brute_force_dice(pred, gt, labels):
    """Set-of-coordinates oracle, independent of the array implementation."""
    p = {idx for idx, v in np.ndenumerate(pred) if int(v) in labels}
    g = {idx for idx, v in np.ndenumerate(gt) if int(v) in labels}
    if not p and not g:
        return 1.0
    return 2 * len(p & g) / (len(p) + len(g))


def test_dice_perfect_overlap():
    m = np.array([[0, 1], [1, 1]])
    assert dice_score(m, m, 1) == 1.0


def test_dice_hand_count():
    pred = np.array([1, 1, 1, 0, 0, 0])
    gt = np.array([0, 1, 1, 1, 1, 0])
    assert dice_score(pred, gt, 1) == pytest.approx(4 / 7, abs=1e-15)


def test_dice_empty_conventions():
    z = np.zeros((3, 3), dtype=int)
    one = z.copy()
    one[1, 1] = 1
    assert dice_score(z, z, 1) == 1.0
    assert dice_score(one, z, 1) == 0.0
    assert dice_score(z, one, 1) == 0.0


def test_dice_shape_mismatch():
    with pytest.raises(ShapeError):
        dice_score(np.zeros((2, 2)), np.zeros((2, 3)), 1)


def test_dice_matches_brute_force_on_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(200):
        shape = tuple(rng.integers(1, 6, size=rng.integers(1, 4)))
        k = int(rng.integers(2, 5))
        pred, gt = rng.integers(0, k, shape), rng.integers(0, k, shape)
        c = int(rng.integers(0, k))
        assert dice_score(pred, gt, c) == brute_force_dice(pred, gt, {c})


masks = arrays(np.int64, st.tuples(st.integers(1, 5), st.integers(1, 5)), elements=st.integers(0, 2))


@settings(max_examples=80, deadline=None)
@given(p=masks, data=st.data())
def test_dice_symmetric(p, data):
    g = data.draw(arrays(np.int64, p.shape, elements=st.integers(0, 2)))
    assert dice_score(p, g, 1) == dice_score(g, p, 1)


@settings(max_examples=80, deadline=None)
@given(p=masks, data=st.data())
def test_dice_one_iff_equal_sets(p, data):
    g = data.draw(arrays(np.int64, p.shape, elements=st.integers(0, 2)))
    if (g == 1).any() or (p == 1).any():
        assert (dice_score(p, g, 1) == 1.0) == np.array_equal(p == 1, g == 1)


@settings(max_examples=80, deadline=None)
@given(p=masks, data=st.data())
def test_removing_false_positive_never_hurts(p, data):
    g = data.draw(arrays(np.int64, p.shape, elements=st.integers(0, 2)))
    fp = np.argwhere((p == 1) & (g != 1))
    if len(fp):
        fixed = p.copy()
        fixed[tuple(fp[0])] = 0
        assert dice_score(fixed, g, 1) >= dice_score(p, g, 1)


def test_region_dice_hand_triple():
    gt = np.array([1, 2, 4])
    pred = np.array([4, 1, 0])
    spec = {"WT": [1, 2, 4], "TC": [1, 4], "ET": [4]}
    out = region_dice(pred, gt, spec)
    assert out == {"WT": pytest.approx(0.8), "TC": pytest.approx(0.5), "ET": 0.0}


def test_region_singleton_reduces_to_class_dice():
    rng = np.random.default_rng(1)
    pred, gt = rng.integers(0, 4, (6, 6, 6)), rng.integers(0, 4, (6, 6, 6))
    assert region_dice(pred, gt, {"r": [2]})["r"] == dice_score(pred, gt, 2)


def test_region_all_foreground_perfect():
    gt = np.array([[0, 1], [2, 3]])
    assert region_dice(gt, gt, {"all": [1, 2, 3]})["all"] == 1.0


def test_region_validation():
    with pytest.raises(ValidationError):
        region_dice(np.zeros(3), np.zeros(3), {"bad": [5]}, num_classes=4)
    with pytest.raises(ValidationError):
        region_dice(np.zeros(3), np.zeros(3), {"empty": []})


def test_region_dice_matches_brute_force_volumes():
    rng = np.random.default_rng(2)
    spec = {"WT": [1, 2, 3], "TC": [2, 3], "ET": [3]}
    for _ in range(50):
        pred, gt = rng.integers(0, 4, (5, 5, 5)), rng.integers(0, 4, (5, 5, 5))
        got = region_dice(pred, gt, spec, num_classes=4)
        for name, labels in spec.items():
            assert got[name] == brute_force_dice(pred, gt, set(labels))


# ---------------------------------------------------------------- reports


def _report(method="direct", shift="A->B", regions=False, seed=0):
    rng = np.random.default_rng(seed)
    preds = {f"i{k}": rng.integers(0, 4, (4, 4)) for k in range(3)}
    gts = {f"i{k}": rng.integers(0, 4, (4, 4)) for k in range(3)}
    spec = {"WT": [1, 2, 3], "TC": [2, 3], "ET": [3]} if regions else None
    return build_report(preds, gts, 4, spec, {"method": method, "shift": shift})


def test_report_aggregation_is_unweighted_mean():
    r = _report()
    for j, c in enumerate(r.classes):
        assert r.per_class_mean[j] == pytest.approx(np.mean([r.per_instance[i][c] for i in r.per_instance]))


def test_singleton_report_equals_instance_score():
    pred = np.array([[1, 1], [0, 0]])
    gt = np.array([[1, 0], [0, 0]])
    r = build_report({"a": pred}, {"a": gt}, 2)
    assert r.mean_dice == dice_score(pred, gt, 1)


@pytest.mark.parametrize("regions", [False, True])
def test_json_round_trip(tmp_path, regions):
    r = _report(regions=regions)
    path = emit_report(r, tmp_path / "r.json", "json")
    back = load_report(path)
    assert back == r
    raw = json.loads(path.read_text())
    assert ("region_scores" in raw) == regions


def test_csv_one_row_per_instance_and_class(tmp_path):
    r = _report()
    path = emit_report(r, tmp_path / "r.csv", "csv")
    rows = list(csv.DictReader(path.open()))
    assert len(rows) == len(r.per_instance) * len(r.classes)
    row = rows[0]
    assert float(row["dice"]) == r.per_instance[row["instance_id"]][int(row["class"])]


def test_markdown_grid_one_row_per_method(tmp_path):
    reports = [_report("adaptive-unet", seed=1), _report("direct", seed=2), _report("oracle", seed=3)]
    text = emit_report(reports, tmp_path / "grid.md", "markdown_table").read_text()
    body = text.strip().splitlines()[2:]
    assert len(body) == 3
    assert body[0].startswith("| Direct Testing") and body[-1].startswith("| Oracle")


def test_grid_marks_missing_cells():
    grid = comparison_grid([_report("direct", "A->B"), _report("oracle", "C->D")])
    assert "n/a" in grid


def test_region_grid_cells_use_triples():
    grid = comparison_grid([_report("direct", regions=True)])
    assert grid.splitlines()[2].count("/") == 2


def test_dice_values_must_be_in_unit_interval():
    with pytest.raises(ValidationError):
        DiceReport({"a": {1: 1.5}}, [1])
