from fractions import Fraction

import numpy as np
import pytest

from thermofuse.metrics import (PooledCounts, binary_iou, confusion_counts, metrics_binary_depth,
                                metrics_multiclass, scores_from_counts, threshold_logits)


def brute_multiclass(pred, gt, C):
    """Pixel-by-pixel counts with exact rational ratios, rounded once at the end."""
    iou, rec, prec = [], [], []
    for c in range(C):
        tp = fp = fn = 0
        for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
            tp += p == c and g == c
            fp += p == c and g != c
            fn += p != c and g == c
        if tp + fp + fn == 0:
            iou.append(Fraction(1)), rec.append(Fraction(1)), prec.append(Fraction(1))
            continue
        iou.append(Fraction(tp, tp + fp + fn))
        rec.append(Fraction(tp, tp + fn) if tp + fn else Fraction(0))
        prec.append(Fraction(tp, tp + fp) if tp + fp else Fraction(0))
    mean = lambda xs: float(sum(xs) / len(xs))
    return mean(iou), mean(rec), mean(prec), [float(v) for v in iou]


def brute_binary(pm, pd, gm, gd):
    inter = union = 0
    err = Fraction(0)
    for a, b, x, y in zip(pm.ravel().tolist(), gm.ravel().tolist(), pd.ravel().tolist(), gd.ravel().tolist()):
        inter += bool(a) and b > 0
        union += bool(a) or b > 0
        err += abs(Fraction(x) - Fraction(y))
    return (1.0 if union == 0 else float(Fraction(inter, union))), float(err / pm.size)


def test_multiclass_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(100):
        C = int(rng.integers(2, 6))
        shape = tuple(rng.integers(1, 9, size=2))
        gt = rng.integers(0, C, size=shape)
        pred = np.where(rng.random(shape) < 0.6, gt, rng.integers(0, C, size=shape))
        miou, rec, prec, per = metrics_multiclass(pred, gt, C)
        ref = brute_multiclass(pred, gt, C)
        assert miou == pytest.approx(ref[0], abs=1e-15) and rec == pytest.approx(ref[1], abs=1e-15)
        assert prec == pytest.approx(ref[2], abs=1e-15)
        assert per.tolist() == ref[3]


def test_binary_depth_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(100):
        shape = tuple(rng.integers(1, 9, size=2))
        gm = rng.integers(0, 5, size=shape) * (rng.random(shape) < 0.4)
        pm = rng.random(shape) < 0.4
        # dyadic depths keep every partial sum exact
        gd = rng.integers(0, 21, size=shape) / 8.0
        pd = rng.integers(0, 21, size=shape) / 8.0
        iou, mae = metrics_binary_depth(pm, pd, gm, gd)
        assert (iou, mae) == brute_binary(pm, pd, gm, gd)


def test_edge_cases():
    z = np.zeros((3, 3), int)
    miou, rec, prec, per = metrics_multiclass(z, z, 3)
    assert (miou, rec, prec) == (1.0, 1.0, 1.0) and per.tolist() == [1.0, 1.0, 1.0]
    # class 1 present only in the ground truth: recall and IoU 0, precision undefined -> 0
    gt = z.copy()
    gt[0, 0] = 1
    s = scores_from_counts(*confusion_counts(z, gt, 2))
    assert s.iou[1] == 0 and s.recall[1] == 0 and s.precision[1] == 0
    # class 1 present only in the prediction
    s = scores_from_counts(*confusion_counts(gt, z, 2))
    assert s.iou[1] == 0 and s.recall[1] == 0 and s.precision[1] == 0
    assert binary_iou(np.zeros(4, bool), np.zeros(4, bool)) == 1.0
    assert binary_iou(np.ones(4, bool), np.zeros(4, bool)) == 0.0
    assert metrics_binary_depth(np.ones(4, bool), np.ones(4), np.ones(4, int), np.ones(4)) == (1.0, 0.0)


def test_perfect_prediction_and_symmetry():
    rng = np.random.default_rng(2)
    gt = rng.integers(0, 4, size=(6, 7))
    assert metrics_multiclass(gt, gt, 4)[:3] == (1.0, 1.0, 1.0)
    pred = rng.integers(0, 4, size=(6, 7))
    a, b = metrics_multiclass(pred, gt, 4), metrics_multiclass(gt, pred, 4)
    # swapping the roles keeps IoU and exchanges recall with precision
    assert a[0] == b[0] and a[1] == b[2] and a[2] == b[1]
    pm, gm = rng.random((5, 5)) < 0.5, rng.random((5, 5)) < 0.5
    assert binary_iou(pm, gm) == binary_iou(gm, pm)


def test_errors():
    with pytest.raises(ValueError):
        confusion_counts(np.zeros(3, int), np.zeros(4, int), 2)
    with pytest.raises(ValueError):
        confusion_counts(np.array([2]), np.array([0]), 2)
    with pytest.raises(ValueError):
        confusion_counts(np.array([0]), np.array([-1]), 2)
    with pytest.raises(ValueError):
        PooledCounts(2).mae


def test_pooling_is_micro_not_macro():
    pool = PooledCounts(2)
    a_pred, a_gt = np.array([1, 1, 0, 0]), np.array([1, 0, 0, 0])
    b_pred, b_gt = np.array([1] * 8), np.array([1] * 8)
    pool.add_labels(a_pred, a_gt)
    pool.add_labels(b_pred, b_gt)
    joint = metrics_multiclass(np.concatenate([a_pred, b_pred]), np.concatenate([a_gt, b_gt]), 2)
    s = pool.scores()
    assert s.miou == joint[0] and s.iou.tolist() == joint[3].tolist()
    per_sample = (metrics_multiclass(a_pred, a_gt, 2)[0] + metrics_multiclass(b_pred, b_gt, 2)[0]) / 2
    assert s.miou != per_sample
    pool.add_depth(np.array([1.0, 2.0]), np.array([1.5, 2.0]))
    pool.add_depth(np.array([0.0]), np.array([1.0]))
    assert pool.mae == pytest.approx(0.5)


def test_threshold_boundary():
    z = np.array([-1e-300, 0.0, 1e-300, 3.0])
    assert threshold_logits(z).tolist() == [False, False, True, True]
