import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bagsfit.classes import PrimitiveClass
from bagsfit.evaluation import (
    DetectionReport,
    ScanCounts,
    aggregate_report,
    comparison_table,
    fitting_error,
    iot,
    match_detections,
)
from bagsfit.geometry import Plane, Sphere
from bagsfit.ransac import Candidate
from bagsfit.rangeimage import LabelMap

from oracles import unit


def _pred(model, pixels):
    pixels = np.asarray(pixels)
    return Candidate(model, len(pixels), np.arange(len(pixels)), pixels)


def test_iot_examples():
    inst = np.arange(1000)
    assert iot(inst, inst) == 1.0
    assert iot(np.arange(400), inst) == 0.4
    with pytest.raises(ValueError):
        iot([1, 2], [])


@settings(max_examples=50, deadline=None)
@given(st.sets(st.integers(0, 200)), st.sets(st.integers(0, 200), min_size=1))
def test_iot_matches_set_intersection(pred, inst):
    assert iot(sorted(pred), sorted(inst)) == len(pred & inst) / len(inst)


def test_fitting_error_examples():
    plane = Plane([0, 0, 1], 0.0)
    rng = np.random.default_rng(0)
    P = np.c_[rng.uniform(-1, 1, (50, 2)), np.zeros(50)]
    assert fitting_error(P, plane) == 0.0
    P[:, 2] = 0.02
    assert math.isclose(fitting_error(P, plane), 0.02)


def test_fitting_error_loop_oracle():
    rng = np.random.default_rng(1)
    s = Sphere([0.1, 0.2, 0.3], 0.8)
    P = rng.normal(size=(300, 3))
    ref = sum(abs(math.dist(p, s.center) - 0.8) for p in P) / len(P)
    assert math.isclose(fitting_error(P, s), ref, rel_tol=1e-12)


def _two_plane_scan(W=40, H=25):
    """Left half: instance 1 on z=2; right half: instance 2 on z=3 (both planes)."""
    inst = np.where(np.arange(W)[None, :] < W // 2, 1, 2).repeat(H, 0).astype(np.uint32)
    cls = np.full((H, W), PrimitiveClass.PLANE, np.uint8)
    z = np.where(inst == 1, 2.0, 3.0)
    v, u = np.mgrid[0:H, 0:W]
    pts = np.stack([u * 0.01, v * 0.01, z], axis=-1).reshape(-1, 3)
    return LabelMap(cls, inst), pts


def test_perfect_single_match():
    labels, pts = _two_plane_scan()
    left = np.flatnonzero(labels.instance_id.ravel() == 1)
    matches, c = match_detections([_pred(Plane([0, 0, 1], 2.0), left)], labels, pts)
    assert (c.n_p2t.sum(), c.n_t2p.sum(), c.n_t.sum(), c.n_p.sum()) == (1, 1, 2, 1)
    assert matches[0].iot == 1.0 and matches[0].fit_error == 0.0


def test_split_instance_walkthrough():
    labels, pts = _two_plane_scan()
    left = np.flatnonzero(labels.instance_id.ravel() == 1)
    n = len(left)
    a = _pred(Plane([0, 0, 1], 2.01), left[: int(0.4 * n)])
    b = _pred(Plane([0, 0, 1], 2.005), left[int(0.4 * n) : int(0.75 * n)])
    matches, c = match_detections([a, b], labels, pts)
    assert [round(m.iot, 2) for m in matches] == [0.4, 0.35]
    assert c.n_p2t.sum() == 2 and c.n_t2p.sum() == 1
    # The best match is the lower-error prediction.
    assert math.isclose(c.best_err_sum.sum(), 0.005, abs_tol=1e-12)
    assert math.isclose(c.matched_err_sum.sum(), 0.015, abs_tol=1e-12)


def test_class_mismatch_and_low_iot_do_not_match():
    labels, pts = _two_plane_scan()
    left = np.flatnonzero(labels.instance_id.ravel() == 1)
    wrong_class = _pred(Sphere([0, 0, 0], 1.0), left)
    small = _pred(Plane([0, 0, 1], 2.0), left[: int(0.3 * len(left))])
    matches, c = match_detections([wrong_class, small], labels, pts)
    assert matches == [] and c.n_p.sum() == 2 and c.n_p2t.sum() == 0
    assert c.unmatched_predictions == 2


def test_prediction_assigned_to_max_iot_instance():
    labels, pts = _two_plane_scan()
    ids = labels.instance_id.ravel()
    left, right = np.flatnonzero(ids == 1), np.flatnonzero(ids == 2)
    # 50% of the left instance and 90% of the right one.
    p = _pred(Plane([0, 0, 1], 3.0), np.r_[left[: len(left) // 2], right[: int(0.9 * len(right))]])
    matches, c = match_detections([p], labels, pts)
    assert len(matches) == 1 and matches[0].instance == 2
    assert c.n_t2p.sum() == 1


def test_instance_size_filter():
    labels, pts = _two_plane_scan()
    _, c = match_detections([], labels, pts, min_instance_pixels=10_000)
    assert c.n_t.sum() == 0


def test_frozen_row_arithmetic():
    counts = ScanCounts()
    counts.n_t2p[:] = [4380, 0, 0, 0]
    counts.n_p[:] = [11078, 0, 0, 0]
    counts.n_t[:] = [9609, 0, 0, 0]
    r = aggregate_report([counts])
    assert abs(r.ratio - 0.395) <= 0.001
    assert abs(r.par[-1] - 0.456) <= 0.001


def test_planted_counts():
    c = ScanCounts()
    c.n_p2t[1], c.n_p[1], c.n_t2p[1], c.n_t[1] = 5, 10, 4, 8
    r = aggregate_report([c], "x")
    assert r.pap[1] == 0.5 and r.par[1] == 0.5
    assert r.pap[-1] == 0.5 and r.par[-1] == 0.5


def test_zero_predictions_flagged():
    c = ScanCounts()
    c.n_t[:] = [3, 1, 0, 2]
    r = aggregate_report([c])
    assert r.pap[-1] == 0.0 and r.par[-1] == 0.0
    assert "PAP:ALL" in r.empty and "PAR:CYL" in r.empty
    assert "undefined" in r.to_table()


def _random_counts(rng):
    c = ScanCounts()
    c.n_t[:] = rng.integers(0, 10, 4)
    c.n_t2p[:] = [rng.integers(0, t + 1) for t in c.n_t]
    c.n_p2t[:] = c.n_t2p + rng.integers(0, 3, 4)
    c.n_p[:] = c.n_p2t + rng.integers(0, 5, 4)
    c.best_err_sum[:] = rng.uniform(0, 0.01, 4) * c.n_t2p
    c.matched_err_sum[:] = rng.uniform(0, 0.01, 4) * c.n_p2t
    return c


def test_totals_and_permutation_invariance():
    rng = np.random.default_rng(2)
    scans = [_random_counts(rng) for _ in range(12)]
    a = aggregate_report(scans)
    b = aggregate_report(scans[::-1])
    assert a.to_csv() == b.to_csv()
    for name in ("n_p", "n_t", "n_p2t", "n_t2p"):
        v = getattr(a, name)
        assert v[-1] == v[:-1].sum() == sum(getattr(s, name).sum() for s in scans)
    assert np.all((0 <= a.pap) & (a.pap <= 1)) and np.all((0 <= a.par) & (a.par <= 1))


def test_report_formats():
    rng = np.random.default_rng(3)
    r = aggregate_report([_random_counts(rng)], "ERANSAC")
    table = r.to_table()
    titles = ["(Np)", "(Nt2p)", "(PAP)", "(PAR)", "Fitting Error (cm)"]
    assert [table.index(t) for t in titles] == sorted(table.index(t) for t in titles)
    header, row = r.to_csv().strip().split("\n")
    assert header.split(",")[0] == "method" and row.split(",")[0] == "ERANSAC"
    assert len(header.split(",")) == len(row.split(","))
    cmp = comparison_table([r, DetectionReport(ScanCounts(), "empty")])
    assert "ERANSAC" in cmp and "empty" in cmp


def test_match_invariants_on_random_predictions():
    rng = np.random.default_rng(4)
    H, W = 30, 30
    inst = rng.integers(1, 6, (H // 5, W // 5)).repeat(5, 0).repeat(5, 1).astype(np.uint32)
    cls = np.full((H, W), PrimitiveClass.PLANE, np.uint8)
    cls[inst == 3] = PrimitiveClass.SPHERE
    labels = LabelMap(cls, inst)
    pts = rng.normal(size=(H * W, 3))
    preds = []
    for _ in range(30):
        px = rng.choice(H * W, rng.integers(10, 300), replace=False)
        m = Plane(unit(rng.normal(size=3)), 0.1) if rng.random() < 0.7 else Sphere([0, 0, 0], 1.0)
        preds.append(_pred(m, px))
    matches, c = match_detections(preds, labels, pts)
    truth = labels.instance_classes()
    for m in matches:
        assert m.iot > 0.3
        assert truth[m.instance] == preds[m.prediction].cls
    assert len({m.prediction for m in matches}) == len(matches)
    assert np.all(c.n_t2p <= np.minimum(c.n_t, c.n_p2t))
    assert np.all(c.n_p2t <= c.n_p)
