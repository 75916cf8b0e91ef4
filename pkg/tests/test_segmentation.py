import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bagsfit.rangeimage import IGNORE, VOID, BagsLabelMap, BagsScheme
from bagsfit.segmentation import (
    CorruptionConfig,
    LossWeights,
    ProbabilityMaps,
    argmax_segmentation,
    multi_binomial_loss,
    oracle_probability_maps,
    segmentation_metrics,
)

from oracles import multi_binomial_bruteforce


def _random_gt(rng, shape=(40, 50), scheme=BagsScheme.K6, ignore=0.05, void=0.05):
    lab = rng.integers(0, scheme.K, shape).astype(np.uint8)
    r = rng.random(shape)
    lab[r < ignore] = IGNORE
    lab[r > 1 - void] = VOID
    return BagsLabelMap(lab, scheme)


def test_zero_corruption_is_one_hot():
    gt = _random_gt(np.random.default_rng(0))
    maps = oracle_probability_maps(gt)
    K = gt.scheme.K
    for k in range(K):
        np.testing.assert_array_equal(maps.maps[k][gt.scored], (gt.labels[gt.scored] == k).astype(float))
    np.testing.assert_allclose(maps.maps[:, gt.valid & ~gt.scored], 1.0 / K)
    assert (maps.maps[:, ~gt.valid] == 0).all()
    pred, _ = argmax_segmentation(maps)
    np.testing.assert_array_equal(pred.labels[gt.scored], gt.labels[gt.scored])


def test_flip_rate_matches_disagreement():
    gt = _random_gt(np.random.default_rng(1), (400, 400))
    maps = oracle_probability_maps(gt, CorruptionConfig(flip_rate=0.1, seed=3))
    pred, _ = argmax_segmentation(maps)
    sel = gt.scored
    assert sel.sum() >= 100_000
    rate = (pred.labels[sel] != gt.labels[sel]).mean()
    assert abs(rate - 0.1) <= 0.01


@settings(max_examples=25, deadline=None)
@given(
    flip=st.floats(0, 1),
    blur=st.floats(0, 3),
    temp=st.one_of(st.none(), st.floats(0.05, 5)),
    erode=st.integers(-2, 2),
    seed=st.integers(0, 1000),
)
def test_multinomial_maps_sum_to_one(flip, blur, temp, erode, seed):
    rng = np.random.default_rng(seed)
    gt = _random_gt(rng, (20, 24))
    base = _random_gt(rng, (20, 24), BagsScheme.K5_OTHER)
    cfg = CorruptionConfig(flip_rate=flip, blur_radius=blur, temperature=temp, boundary_erode_dilate=erode, seed=seed)
    maps = oracle_probability_maps(gt, cfg, base=base)
    s = maps.maps.sum(axis=0)
    np.testing.assert_allclose(s[gt.valid], 1.0, atol=1e-6)
    assert maps.maps.min() >= 0 and maps.maps.max() <= 1


def test_corruption_is_seeded():
    gt = _random_gt(np.random.default_rng(2))
    a = oracle_probability_maps(gt, CorruptionConfig(flip_rate=0.3, blur_radius=1.0, seed=5))
    b = oracle_probability_maps(gt, CorruptionConfig(flip_rate=0.3, blur_radius=1.0, seed=5))
    c = oracle_probability_maps(gt, CorruptionConfig(flip_rate=0.3, blur_radius=1.0, seed=6))
    np.testing.assert_array_equal(a.maps, b.maps)
    assert not np.array_equal(a.maps, c.maps)


def test_boundary_dilation_and_erosion():
    lab = np.zeros((15, 15), np.uint8)
    lab[:, 7] = 4
    lab[:, 8:] = 2
    gt = BagsLabelMap(lab, BagsScheme.K6)
    grown = argmax_segmentation(oracle_probability_maps(gt, CorruptionConfig(boundary_erode_dilate=1)))[0]
    assert (grown.labels[:, 6:9] == 4).all() and (grown.labels[:, :6] == 0).all()
    base_lab = np.where(np.arange(15) < 8, 0, 2).repeat(15).reshape(15, 15).T.astype(np.uint8)
    base = BagsLabelMap(base_lab, BagsScheme.K5_OTHER)
    shrunk = argmax_segmentation(oracle_probability_maps(gt, CorruptionConfig(boundary_erode_dilate=-1), base))[0]
    np.testing.assert_array_equal(shrunk.labels, base_lab)
    with pytest.raises(ValueError):
        oracle_probability_maps(gt, CorruptionConfig(boundary_erode_dilate=-1))


def test_corruption_config_validation():
    for kw in ({"flip_rate": 1.5}, {"temperature": 0.0}, {"blur_radius": -1.0}):
        with pytest.raises(ValueError):
            CorruptionConfig(**kw)


def test_argmax_uniform_ties_go_to_first_label():
    valid = np.ones((3, 4), bool)
    maps = ProbabilityMaps(np.full((4, 3, 4), 0.25), BagsScheme.K4, valid)
    pred, sets = argmax_segmentation(maps)
    assert (pred.labels == 0).all()
    assert len(sets[0]) == 12 and all(len(s) == 0 for s in sets[1:])


def test_argmax_sets_match_bruteforce():
    rng = np.random.default_rng(4)
    gt = _random_gt(rng, (30, 30))
    maps = oracle_probability_maps(gt, CorruptionConfig(flip_rate=0.4, blur_radius=1.5, temperature=0.3, seed=1))
    _, sets = argmax_segmentation(maps)
    counts = [0] * maps.K
    for i in range(30):
        for j in range(30):
            if not maps.valid[i, j]:
                continue
            best = 0
            for k in range(1, maps.K):
                if maps.maps[k, i, j] > maps.maps[best, i, j]:
                    best = k
            counts[best] += 1
    assert [len(s) for s in sets] == counts
    assert sorted(np.concatenate(sets)) == list(np.flatnonzero(maps.valid.ravel()))


def test_metrics_perfect_prediction():
    gt = _random_gt(np.random.default_rng(5))
    m = segmentation_metrics(gt, gt)
    for name in ("precision", "recall", "iou", "f1"):
        np.testing.assert_array_equal(getattr(m, name), 1.0)
    assert m.accuracy == 1.0


def test_metrics_swapped_halves():
    lab = np.zeros((10, 10), np.uint8)
    lab[:, 5:] = 1
    gt = BagsLabelMap(lab, BagsScheme.K4)
    m = segmentation_metrics(1 - lab, gt)
    assert m.accuracy == 0.0
    assert m.precision[0] == 0.0 and m.precision[1] == 0.0
    assert np.isnan(m.precision[2])


def test_metrics_planted_confusion():
    planted = {(0, 0): 50, (0, 1): 10, (1, 0): 5, (1, 1): 30, (1, 2): 5, (2, 2): 40, (2, 3): 10, (3, 3): 20, (3, 0): 10}
    g, p = [], []
    for (a, b), n in planted.items():
        g += [a] * n
        p += [b] * n
    order = np.random.default_rng(0).permutation(len(g))
    gt = BagsLabelMap(np.array(g, np.uint8)[order].reshape(12, 15), BagsScheme.K4)
    pred = np.array(p, np.uint8)[order].reshape(12, 15)
    m = segmentation_metrics(pred, gt)
    np.testing.assert_allclose(m.precision, [50 / 65, 30 / 40, 40 / 45, 20 / 30])
    np.testing.assert_allclose(m.recall, [50 / 60, 30 / 40, 40 / 50, 20 / 30])
    np.testing.assert_allclose(m.iou, [50 / 75, 30 / 50, 40 / 55, 20 / 40])
    np.testing.assert_allclose(m.f1, [100 / 125, 60 / 80, 80 / 95, 40 / 60])
    assert math.isclose(m.accuracy, 140 / 180)
    assert math.isclose(m.average()["recall"], np.mean([50 / 60, 30 / 40, 40 / 50, 20 / 30]))
    assert "AVE" in m.table()


def test_metrics_permutation_invariant_accuracy():
    rng = np.random.default_rng(6)
    gt = _random_gt(rng, void=0, ignore=0)
    pred = rng.integers(0, 6, gt.labels.shape).astype(np.uint8)
    perm = rng.permutation(6).astype(np.uint8)
    a = segmentation_metrics(pred, gt).accuracy
    b = segmentation_metrics(perm[pred], BagsLabelMap(perm[gt.labels], gt.scheme)).accuracy
    assert a == b


def test_metrics_scheme_mismatch():
    gt = _random_gt(np.random.default_rng(0), scheme=BagsScheme.K4)
    other = BagsLabelMap(np.zeros(gt.labels.shape, np.uint8), BagsScheme.K5_BOUNDARY)
    with pytest.raises(ValueError):
        segmentation_metrics(other, gt)


def test_loss_single_pixel_hand_value():
    gt = BagsLabelMap(np.array([[1]], np.uint8), BagsScheme.K4)
    m = np.zeros((4, 1, 1))
    m[:2] = 0.5
    maps = ProbabilityMaps(m, BagsScheme.K4, np.ones((1, 1), bool))
    # Only the first two classes carry weight.
    total, per = multi_binomial_loss(maps, gt, LossWeights(np.array([1.0, 1.0, 1e-300, 1e-300])))
    assert math.isclose(total, 2 * math.log(2), rel_tol=1e-12)
    assert math.isclose(per[0], math.log(2)) and math.isclose(per[1], math.log(2))


def test_loss_perfect_maps_near_zero():
    gt = _random_gt(np.random.default_rng(7))
    maps = oracle_probability_maps(gt)
    total, _ = multi_binomial_loss(maps, gt, LossWeights.uniform(6))
    N = int(gt.scored.sum())
    assert 0 <= total <= 6 * N * -math.log(1 - 1e-7) + 1e-9


@pytest.mark.parametrize("seed", range(3))
def test_loss_matches_double_loop(seed):
    rng = np.random.default_rng(seed)
    gt = _random_gt(rng, (8, 8))
    Y = rng.random((6, 8, 8))
    Y[:, 0, 0] = 0.0  # exercise clamping
    maps = ProbabilityMaps(Y, gt.scheme, gt.valid, multinomial=False)
    beta = rng.uniform(0.2, 3.0, 6)
    total, _ = multi_binomial_loss(maps, gt, LossWeights(beta))
    ref = multi_binomial_bruteforce(Y, np.where(gt.valid, gt.labels, IGNORE), 6, beta)
    assert math.isclose(total, ref, rel_tol=1e-9)


def test_one_hot_minimises_loss():
    rng = np.random.default_rng(8)
    gt = _random_gt(rng, (12, 12))
    w = LossWeights.from_counts(np.bincount(gt.labels[gt.scored], minlength=6))
    best, _ = multi_binomial_loss(oracle_probability_maps(gt), gt, w)
    for _ in range(100):
        noisy = np.clip(oracle_probability_maps(gt).maps + rng.normal(0, 0.05, (6, 12, 12)), 0, 1)
        assert multi_binomial_loss(ProbabilityMaps(noisy, gt.scheme, gt.valid, False), gt, w)[0] >= best


def test_loss_weights_inverse_frequency():
    w = LossWeights.from_counts([100, 300, 0, 50])
    assert math.isclose(w.beta.sum(), 4)
    np.testing.assert_allclose(w.beta[0] / w.beta[1], 3.0)
    np.testing.assert_allclose(w.beta[0] / w.beta[3], 0.5)
    with pytest.raises(ValueError):
        LossWeights(np.array([1.0, 0.0]))


def test_probability_maps_validation():
    with pytest.raises(ValueError):
        ProbabilityMaps(np.zeros((3, 2, 2)), BagsScheme.K4, np.ones((2, 2), bool))
    with pytest.raises(ValueError):
        ProbabilityMaps(np.full((4, 2, 2), 1.5), BagsScheme.K4, np.ones((2, 2), bool))
