from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ugn.metrics import ConfusionMatrix, confusion_accumulate, miou, report
from ugn.tensor import DomainError, ShapeError


def pixel_loop(pred, gt, valid, k, unknown):
    """Counts and mIoU by visiting every pixel."""
    counts = np.zeros((k, k), int)
    tp, fp, fn = {}, {}, {}
    active = [c for c in range(k) if c != unknown]
    for c in active:
        tp[c] = fp[c] = fn[c] = 0
    for p, g, v in zip(pred.ravel(), gt.ravel(), valid.ravel()):
        if not v or g == unknown:
            continue
        counts[g, p] += 1
        if p == g:
            tp[g] += 1
        else:
            fn[g] += 1
            if p in fp:
                fp[p] += 1
    ious = [Fraction(tp[c], tp[c] + fp[c] + fn[c]) for c in active if tp[c] + fp[c] + fn[c] > 0]
    return counts, (float(sum(ious) / len(ious)) if ious else None)


class TestAccumulate:
    def test_matches_pixel_loop(self, rng):
        for _ in range(1000):
            k = int(rng.integers(2, 6))
            unknown = k - 1 if rng.random() < 0.5 else None
            pred = rng.integers(0, k, (8, 8))
            gt = rng.integers(0, k, (8, 8))
            valid = rng.random((8, 8)) < 0.85
            cm = ConfusionMatrix(k, unknown).accumulate(pred, gt, valid)
            counts, mean = pixel_loop(pred, gt, valid, k, unknown)
            np.testing.assert_array_equal(cm.counts, counts)
            if mean is None:
                with pytest.raises(DomainError):
                    miou(cm)
            else:
                assert miou(cm)[1] == mean

    def test_perfect_prediction_is_diagonal(self, rng):
        gt = rng.integers(0, 3, (6, 6))
        cm = ConfusionMatrix(3).accumulate(gt, gt)
        assert np.count_nonzero(cm.counts - np.diag(np.diag(cm.counts))) == 0
        ious, mean = miou(cm)
        assert ious == [1.0, 1.0, 1.0] and mean == 1.0

    def test_all_invalid_leaves_matrix(self, rng):
        cm = ConfusionMatrix(3)
        cm.accumulate(rng.integers(0, 3, (4, 4)), rng.integers(0, 3, (4, 4)), np.zeros((4, 4), bool))
        assert not cm.counts.any()

    def test_shape_checks(self):
        with pytest.raises(ShapeError):
            ConfusionMatrix(2).accumulate(np.zeros((2, 2), int), np.zeros((2, 3), int))
        with pytest.raises(ValueError):
            ConfusionMatrix(2).accumulate(np.full((2, 2), 5), np.zeros((2, 2), int))


class TestMiou:
    def test_hand_case(self):
        cm = confusion_accumulate(ConfusionMatrix(2), np.array([0, 0, 1, 1]), np.array([0, 1, 1, 1]))
        ious, mean = miou(cm)
        assert ious == [1 / 2, 2 / 3]
        assert mean == 7 / 12

    def test_absent_class_excluded(self):
        cm = ConfusionMatrix(3).accumulate(np.array([0, 1]), np.array([0, 1]))
        ious, mean = miou(cm)
        assert np.isnan(ious[2]) and mean == 1.0
        assert miou(cm, absent_as_zero=True)[1] == pytest.approx(2 / 3)

    def test_unknown_ground_truth_ignored(self):
        cm = ConfusionMatrix(3, unknown=2).accumulate(np.array([0, 1, 0]), np.array([0, 1, 2]))
        assert miou(cm)[1] == 1.0

    def test_unknown_prediction_is_a_miss(self):
        cm = ConfusionMatrix(3, unknown=2).accumulate(np.array([0, 2]), np.array([0, 1]))
        ious, mean = miou(cm)
        assert ious[:2] == [1.0, 0.0] and mean == 0.5

    def test_nothing_observed(self):
        with pytest.raises(DomainError):
            miou(ConfusionMatrix(3))

    def test_report(self):
        cm = ConfusionMatrix(3, unknown=2).accumulate(np.array([0, 0, 1, 1]), np.array([0, 1, 1, 1]))
        text = report(cm, ["a", "b", "u"])
        assert text.splitlines() == ["class,name,iou", "0,a,0.500000", "1,b,0.666667", "miou,0.583333"]


masks = hnp.arrays(np.int64, (6, 6), elements=st.integers(0, 3))


@settings(max_examples=60, deadline=None)
@given(masks, masks, st.integers(0, 2**31))
def test_permutation_and_additivity(pred, gt, seed):
    r = np.random.default_rng(seed)
    order = r.permutation(36)
    whole = ConfusionMatrix(4, unknown=3).accumulate(pred, gt)
    shuffled = ConfusionMatrix(4, unknown=3).accumulate(pred.ravel()[order], gt.ravel()[order])
    np.testing.assert_array_equal(whole.counts, shuffled.counts)
    split = r.random((6, 6)) < 0.5
    a = ConfusionMatrix(4, unknown=3).accumulate(pred, gt, split)
    b = ConfusionMatrix(4, unknown=3).accumulate(pred, gt, ~split)
    np.testing.assert_array_equal((a + b).counts, whole.counts)
    if (gt != 3).any():
        ious, mean = miou(whole)
        assert all(0 <= v <= 1 for v in ious if not np.isnan(v))
        diag = not np.any(whole.counts[:3] - np.diag(np.diag(whole.counts))[:3])
        assert (mean == 1.0) == diag
