"""Metric battery, check-point tallying, agreement maps, reports."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from s2hse import assess
from s2hse.errors import (ContractError, EmptyResultError, InvalidInputError,
                          OutOfExtentError)
from s2hse.raster import Raster


def map_raster(grid, gsd=20.0, origin=(0.0, None)):
    grid = np.asarray(grid, dtype=np.uint8)
    h, w = grid.shape
    oy = origin[1] if origin[1] is not None else h * gsd
    return Raster(width=w, height=h, bands=1, gsd=gsd, origin_x=origin[0],
                  origin_y=oy, scale=1.0, nodata=255.0, dtype="u8", data=grid[None])


def brute_force_metrics(cm):
    """Recompute every metric by expanding the matrix into (truth, pred) pairs."""
    pairs = ([(1, 1)] * cm.tp + [(0, 1)] * cm.fp + [(1, 0)] * cm.fn + [(0, 0)] * cm.tn)
    n = len(pairs)
    agree = sum(1 for t, p in pairs if t == p) / n
    t1 = sum(1 for t, _ in pairs if t == 1)
    t0 = n - t1
    p1 = sum(1 for _, p in pairs if p == 1)
    p0 = n - p1
    pe = (t1 * p1 + t0 * p0) / n**2
    out = {}
    out["kappa"] = (agree - pe) / (1 - pe) if pe != 1 else None
    rec1 = sum(1 for t, p in pairs if t == 1 and p == 1) / t1 if t1 else None
    rec0 = sum(1 for t, p in pairs if t == 0 and p == 0) / t0 if t0 else None
    out["aa"] = 0.5 * (rec1 + rec0) if rec1 is not None and rec0 is not None else None
    out["cme"] = sum(1 for t, p in pairs if t == 0 and p == 1) / p1 if p1 else None
    out["recall"] = rec1
    prec = sum(1 for t, p in pairs if t == 1 and p == 1) / p1 if p1 else None
    if prec and rec1:
        out["f1"] = 2 * prec * rec1 / (prec + rec1)
    else:
        out["f1"] = None
    return out


# --- grid points -----------------------------------------------------------

def test_mlgcp_counts():
    assert len(assess.mlgcp_grid((0, 0, 4000, 4000))) == 4
    assert len(assess.mlgcp_grid((0, 0, 1999, 1999))) == 0
    assert len(assess.mlgcp_grid((0, 0, 10_000, 6_000))) == 15


def test_mlgcp_positions():
    pts = assess.mlgcp_grid((100.0, 200.0, 4100.0, 4200.0))
    assert (1100.0, 1200.0) in pts and (3100.0, 3200.0) in pts
    assert len(pts) == 4


def test_mlgcp_degenerate_extent():
    with pytest.raises(InvalidInputError):
        assess.mlgcp_grid((10, 0, 10, 100))


def test_points_csv_roundtrip(tmp_path):
    pts = assess.CheckPointSet([(10.0, 30.0, 1), (50.0, 70.0, 0)], spacing=40.0)
    path = tmp_path / "pts.csv"
    assess.save_points_csv(pts, path)
    back = assess.load_points_csv(path)
    assert back.points == pts.points


def test_points_csv_rejects_bad_label(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("x_m,y_m,label\n10,10,2\n")
    with pytest.raises(InvalidInputError):
        assess.load_points_csv(path)


# --- confusion from points -------------------------------------------------

def centers(r):
    for row in range(r.height):
        for col in range(r.width):
            yield (r.origin_x + (col + 0.5) * r.gsd,
                   r.origin_y - (row + 0.5) * r.gsd, row, col)


def test_confusion_identical_map():
    grid = np.array([[1, 0], [0, 1]])
    m = map_raster(grid)
    pts = assess.CheckPointSet([(x, y, int(grid[r, c])) for x, y, r, c in centers(m)])
    cm, excluded = assess.confusion_from_points(m, pts)
    assert (cm.fp, cm.fn, excluded) == (0, 0, 0)
    assert (cm.tp, cm.tn) == (2, 2)


def test_confusion_inverted_map():
    grid = np.array([[1, 0], [0, 1]])
    m = map_raster(1 - grid)
    pts = assess.CheckPointSet([(x, y, int(grid[r, c])) for x, y, r, c in centers(m)])
    cm, _ = assess.confusion_from_points(m, pts)
    assert (cm.tp, cm.tn) == (0, 0)
    assert (cm.fp, cm.fn) == (2, 2)


def test_confusion_handcrafted_four_points():
    m = map_raster([[1, 0], [1, 0]])
    pts = assess.CheckPointSet([
        (10.0, 30.0, 1),   # cell (0,0)=1, label 1 -> tp
        (30.0, 30.0, 1),   # cell (0,1)=0, label 1 -> fn
        (10.0, 10.0, 0),   # cell (1,0)=1, label 0 -> fp
        (30.0, 10.0, 0),   # cell (1,1)=0, label 0 -> tn
    ])
    cm, _ = assess.confusion_from_points(m, pts)
    assert (cm.tp, cm.fp, cm.fn, cm.tn) == (1, 1, 1, 1)


def test_confusion_excludes_nodata():
    m = map_raster([[1, 255], [0, 0]])
    pts = assess.CheckPointSet([(x, y, 1) for x, y, _, _ in centers(m)])
    cm, excluded = assess.confusion_from_points(m, pts)
    assert excluded == 1
    assert cm.total == 3


def test_confusion_out_of_extent():
    m = map_raster([[1, 0], [0, 1]])
    pts = assess.CheckPointSet([(10.0, 30.0, 1), (-5.0, 10.0, 0), (10.0, 999.0, 1)])
    with pytest.raises(OutOfExtentError) as err:
        assess.confusion_from_points(m, pts)
    assert len(err.value.points) == 2


# --- metrics ---------------------------------------------------------------

def test_metrics_perfect_prediction():
    cm = assess.ConfusionMatrix(tp=30, fp=0, fn=0, tn=70)
    assert assess.kappa(cm) == 1.0
    assert assess.aa(cm) == 1.0
    assert assess.cme(cm) == 0.0
    assert assess.recall(cm) == 1.0
    assert assess.f1(cm) == 1.0


def test_metrics_reference_fixture():
    cm = assess.ConfusionMatrix(tp=50, fp=10, fn=5, tn=100)
    assert abs(assess.kappa(cm) - 0.8000) <= 1e-4
    assert abs(assess.recall(cm) - 0.9091) <= 1e-4
    assert abs(assess.cme(cm) - 0.1667) <= 1e-4
    assert abs(assess.f1(cm) - 0.8696) <= 1e-4
    assert abs(assess.aa(cm) - 0.9091) <= 1e-4


def test_kappa_all_positive_prediction_on_balanced_truth():
    cm = assess.ConfusionMatrix(tp=50, fp=50, fn=0, tn=0)
    assert assess.kappa(cm) == 0.0


def test_kappa_degenerate_single_class():
    cm = assess.ConfusionMatrix(tp=10, fp=0, fn=0, tn=0)
    with pytest.raises(EmptyResultError):
        assess.kappa(cm)


def test_metric_empty_denominators():
    with pytest.raises(EmptyResultError):
        assess.cme(assess.ConfusionMatrix(tp=0, fp=0, fn=3, tn=5))
    with pytest.raises(EmptyResultError):
        assess.recall(assess.ConfusionMatrix(tp=0, fp=2, fn=0, tn=5))
    with pytest.raises(EmptyResultError):
        assess.kappa(assess.ConfusionMatrix())


def test_negative_counts_rejected():
    with pytest.raises(InvalidInputError):
        assess.ConfusionMatrix(tp=-1)


@settings(max_examples=100, deadline=None)
@given(tp=st.integers(0, 200), fp=st.integers(0, 200),
       fn=st.integers(0, 200), tn=st.integers(0, 200))
def test_metrics_match_brute_force(tp, fp, fn, tn):
    if tp + fp + fn + tn == 0:
        return
    cm = assess.ConfusionMatrix(tp=tp, fp=fp, fn=fn, tn=tn)
    ref = brute_force_metrics(cm)
    for name, fn_ in [("kappa", assess.kappa), ("aa", assess.aa), ("cme", assess.cme),
                      ("recall", assess.recall), ("f1", assess.f1)]:
        if ref[name] is None:
            with pytest.raises(EmptyResultError):
                fn_(cm)
        else:
            assert abs(fn_(cm) - ref[name]) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(tp=st.integers(0, 100), fp=st.integers(0, 100),
       fn=st.integers(0, 100), tn=st.integers(0, 100))
def test_kappa_bounds_and_aa_relabel_invariance(tp, fp, fn, tn):
    cm = assess.ConfusionMatrix(tp=tp, fp=fp, fn=fn, tn=tn)
    try:
        k = assess.kappa(cm)
        assert -1.0 - 1e-12 <= k <= 1.0 + 1e-12
        if k == 1.0:
            assert fp == 0 and fn == 0
    except EmptyResultError:
        pass
    swapped = assess.ConfusionMatrix(tp=tn, fp=fn, fn=fp, tn=tp)
    try:
        assert abs(assess.aa(cm) - assess.aa(swapped)) <= 1e-12
    except EmptyResultError:
        pass


def test_confusion_metrics_equal_pointwise_recount():
    rng = np.random.default_rng(0)
    grid = rng.integers(0, 2, size=(40, 40)).astype(np.uint8)
    m = map_raster(grid)
    pts = assess.CheckPointSet(
        [(x, y, int(rng.integers(0, 2))) for x, y, _, _ in centers(m)])
    cm, _ = assess.confusion_from_points(m, pts)
    tally = {"tp": 0, "fp": 0, "fn": 0, "tn": 0}
    for x, y, lab in pts.points:
        row = int((m.origin_y - y) // m.gsd)
        col = int((x - m.origin_x) // m.gsd)
        pred = grid[row, col]
        key = {(1, 1): "tp", (0, 1): "fp", (1, 0): "fn", (0, 0): "tn"}[(lab, int(pred))]
        tally[key] += 1
    assert (cm.tp, cm.fp, cm.fn, cm.tn) == (tally["tp"], tally["fp"], tally["fn"], tally["tn"])


# --- building recall -------------------------------------------------------

def test_building_recall_superset_is_one():
    hse = map_raster(np.ones((4, 4)))
    b = map_raster([[1, 0, 0, 0]] * 4)
    assert assess.building_recall(hse, b) == 1.0


def test_building_recall_disjoint_is_zero():
    hse = map_raster([[0, 1]] * 2)
    b = map_raster([[1, 0]] * 2)
    assert assess.building_recall(hse, b) == 0.0


def test_building_recall_empty_mask():
    hse = map_raster(np.ones((2, 2)))
    with pytest.raises(EmptyResultError):
        assess.building_recall(hse, map_raster(np.zeros((2, 2))))


def test_building_recall_matches_pixel_loop():
    rng = np.random.default_rng(1)
    h = rng.integers(0, 2, size=(20, 20)).astype(np.uint8)
    b = rng.integers(0, 2, size=(20, 20)).astype(np.uint8)
    got = assess.building_recall(map_raster(h), map_raster(b))
    n0 = n1 = 0
    for r in range(20):
        for c in range(20):
            if b[r, c] == 1:
                n0 += 1
                if h[r, c] == 1:
                    n1 += 1
    assert got == n1 / n0


def test_building_recall_grid_mismatch():
    with pytest.raises(ContractError):
        assess.building_recall(map_raster(np.ones((2, 2))), map_raster(np.ones((2, 3))))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_building_recall_monotone(seed):
    rng = np.random.default_rng(seed)
    h = rng.integers(0, 2, size=(8, 8)).astype(np.uint8)
    b = rng.integers(0, 2, size=(8, 8)).astype(np.uint8)
    if not (b == 1).any():
        b[0, 0] = 1
    r1 = assess.building_recall(map_raster(h), map_raster(b))
    grown = h.copy()
    grown[rng.integers(0, 8), rng.integers(0, 8)] = 1
    r2 = assess.building_recall(map_raster(grown), map_raster(b))
    assert r2 >= r1


# --- agreement maps --------------------------------------------------------

def test_agreement_identical_maps():
    rng = np.random.default_rng(2)
    grid = rng.integers(0, 2, size=(10, 10)).astype(np.uint8)
    m = map_raster(grid)
    agree = assess.agreement_map(m, map_raster(grid), map_raster(grid))
    assert set(np.unique(agree.data)) <= {0, 4}
    assert np.array_equal(agree.data[0] == 4, grid == 1)


def test_agreement_truth_table():
    combos = [(o, g, h) for o in (0, 1) for g in (0, 1) for h in (0, 1)]
    ours = map_raster([[o for o, _, _ in combos]])
    guf = map_raster([[g for _, g, _ in combos]])
    ghsl = map_raster([[h for _, _, h in combos]])
    agree = assess.agreement_map(ours, guf, ghsl)
    expected = {
        (0, 0, 0): 0, (1, 0, 0): 1, (0, 1, 0): 2, (0, 0, 1): 3,
        (1, 1, 1): 4, (0, 1, 1): 5, (1, 0, 1): 6, (1, 1, 0): 7,
    }
    for i, combo in enumerate(combos):
        assert agree.data[0, 0, i] == expected[combo], combo


def test_agreement_codes_partition():
    codes = sorted(assess.AGREEMENT_CODES.values())
    assert codes == list(range(8))


def test_agreement_nodata_propagates():
    ours = map_raster([[1, 255], [0, 1]])
    other = map_raster([[1, 1], [255, 1]])
    agree = assess.agreement_map(ours, other, other)
    assert agree.data[0, 0, 1] == 255 and agree.data[0, 1, 0] == 255
    assert agree.data[0, 0, 0] == 4


def test_agreement_grid_mismatch():
    with pytest.raises(ContractError):
        assess.agreement_map(map_raster(np.zeros((2, 2))),
                             map_raster(np.zeros((2, 2)), origin=(100.0, None)),
                             map_raster(np.zeros((2, 2))))


def test_agreement_ppm_export(tmp_path):
    agree = assess.agreement_map(map_raster([[1, 0]]), map_raster([[1, 0]]),
                                 map_raster([[1, 0]]))
    path = tmp_path / "agree.ppm"
    assess.save_agreement_ppm(agree, path)
    data = path.read_bytes()
    assert data.startswith(b"P6\n2 1\n255\n")
    pixels = data.split(b"255\n", 1)[1]
    assert pixels == bytes([0, 0, 0, 255, 255, 255])  # all-three then none


# --- report ----------------------------------------------------------------

def test_report_empty_is_valid():
    doc = json.loads(assess.report([]))
    assert doc == {"products": []}


def test_report_single_product_matches_ops():
    cm = assess.ConfusionMatrix(tp=50, fp=10, fn=5, tn=100)
    doc = json.loads(assess.report([("ours", cm)]))
    entry = doc["products"][0]
    assert entry["name"] == "ours"
    assert entry["counts"] == {"tp": 50, "fp": 10, "fn": 5, "tn": 100}
    assert abs(entry["metrics"]["kappa"] - assess.kappa(cm)) <= 1e-12
    assert abs(entry["metrics"]["aa_pct"] - assess.aa(cm) * 100) <= 1e-12
    assert abs(entry["metrics"]["recall_pct"] - assess.recall(cm) * 100) <= 1e-12


def test_report_roundtrips_through_parser():
    cms = [("a", assess.ConfusionMatrix(tp=5, fp=1, fn=2, tn=9)),
           ("b", assess.ConfusionMatrix(tp=9, fp=0, fn=0, tn=1))]
    text = assess.report(cms)
    doc = json.loads(text)
    assert json.loads(json.dumps(doc)) == doc
    assert [p["name"] for p in doc["products"]] == ["a", "b"]


def test_report_text_format():
    cm = assess.ConfusionMatrix(tp=50, fp=10, fn=5, tn=100)
    text = assess.report([("ours", cm)], fmt="text")
    lines = text.splitlines()
    assert lines[0].split() == ["product", "kappa", "AA%", "CME%", "recall%",
                                "F1", "tp", "fp", "fn", "tn"]
    assert "90.9" in lines[1]      # one-decimal percentages
    assert "0.8000" in lines[1]


def test_report_undefined_metric_rendered():
    cm = assess.ConfusionMatrix(tp=0, fp=0, fn=3, tn=5)
    doc = json.loads(assess.report([("empty", cm)]))
    assert doc["products"][0]["metrics"]["cme_pct"] is None
    text = assess.report([("empty", cm)], fmt="text")
    assert "n/a" in text
