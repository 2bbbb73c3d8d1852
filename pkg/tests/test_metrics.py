import numpy as np
import pytest

from promptseg.metrics import (
    IGNORE_INDEX,
    ConfusionMatrix,
    accumulate,
    iou,
    relative_generalization,
)


def brute_force_iou(pred: np.ndarray, gt: np.ndarray, C: int):
    """Independent oracle: per-class set intersection / union over pixel ids."""
    valid = gt != IGNORE_INDEX
    flat_ids = np.arange(gt.size).reshape(gt.shape)
    per_class = []
    for c in range(C):
        P = set(flat_ids[(pred == c) & valid].tolist())
        G = set(flat_ids[(gt == c) & valid].tolist())
        union = P | G
        per_class.append((len(P & G), len(union)))
    return per_class


class TestAccumulate:
    def test_perfect_prediction_is_diagonal(self):
        cm = ConfusionMatrix(3)
        gt = np.array([[0, 1], [2, 2]])
        accumulate(cm, gt.copy(), gt)
        assert np.array_equal(cm.counts, np.diag([1, 1, 2]))

    def test_all_ignored_leaves_cm_unchanged(self):
        cm = ConfusionMatrix(3)
        gt = np.full((4, 4), IGNORE_INDEX)
        accumulate(cm, np.zeros((4, 4), dtype=int), gt)
        assert cm.counts.sum() == 0

    def test_enumerated_two_by_two(self):
        cm = ConfusionMatrix(2)
        gt = np.array([[0, 0], [1, 1]])
        pred = np.array([[0, 1], [1, 1]])
        accumulate(cm, pred, gt)
        assert cm.counts[0, 0] == 1 and cm.counts[0, 1] == 1
        assert cm.counts[1, 1] == 2 and cm.counts[1, 0] == 0

    def test_rejects_shape_mismatch_and_out_of_range(self):
        cm = ConfusionMatrix(2)
        with pytest.raises(ValueError):
            accumulate(cm, np.zeros((2, 2), dtype=int), np.zeros((2, 3), dtype=int))
        with pytest.raises(ValueError):
            accumulate(cm, np.full((2, 2), 5), np.zeros((2, 2), dtype=int))

    def test_additive_in_any_order(self):
        rng = np.random.default_rng(0)
        preds = [rng.integers(0, 4, (8, 8)) for _ in range(6)]
        gts = [rng.integers(0, 4, (8, 8)) for _ in range(6)]
        cm1 = ConfusionMatrix(4)
        for p, g in zip(preds, gts):
            accumulate(cm1, p, g)
        cm2 = ConfusionMatrix(4)
        for i in [3, 0, 5, 1, 4, 2]:
            accumulate(cm2, preds[i], gts[i])
        assert np.array_equal(cm1.counts, cm2.counts)

    def test_merge_matches_joint_accumulation(self):
        rng = np.random.default_rng(1)
        p1, g1 = rng.integers(0, 3, (5, 5)), rng.integers(0, 3, (5, 5))
        p2, g2 = rng.integers(0, 3, (5, 5)), rng.integers(0, 3, (5, 5))
        a = accumulate(accumulate(ConfusionMatrix(3), p1, g1), p2, g2)
        b = accumulate(ConfusionMatrix(3), p1, g1).merge(accumulate(ConfusionMatrix(3), p2, g2))
        assert np.array_equal(a.counts, b.counts)


class TestIoU:
    def test_perfect_prediction(self):
        cm = ConfusionMatrix(3)
        gt = np.array([[0, 1], [2, 0]])
        accumulate(cm, gt.copy(), gt)
        per_class, miou = iou(cm)
        assert np.allclose(per_class, 1.0) and miou == 1.0

    def test_half_and_half_collapse(self):
        cm = ConfusionMatrix(2)
        gt = np.array([0] * 8 + [1] * 8).reshape(4, 4)
        pred = np.zeros((4, 4), dtype=int)
        accumulate(cm, pred, gt)
        per_class, miou = iou(cm)
        assert per_class[0] == 0.5 and per_class[1] == 0.0 and miou == 0.25

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(50):
            pred = rng.integers(0, 4, (8, 8))
            gt = rng.integers(0, 4, (8, 8))
            cm = accumulate(ConfusionMatrix(4), pred, gt)
            per_class, miou = iou(cm)
            oracle = brute_force_iou(pred, gt, 4)
            vals = []
            for c, (inter, union) in enumerate(oracle):
                diag = cm.counts[c, c]
                denom = cm.counts[c].sum() + cm.counts[:, c].sum() - diag
                assert (diag, denom) == (inter, union)
                if union:
                    vals.append(inter / union)
                    assert per_class[c] == inter / union
                else:
                    assert np.isnan(per_class[c])
            assert miou == np.mean(vals)

    def test_absent_class_excluded_from_mean(self):
        cm = ConfusionMatrix(3)
        gt = np.array([[0, 0], [1, 1]])
        accumulate(cm, gt.copy(), gt)
        per_class, miou = iou(cm)
        assert np.isnan(per_class[2]) and miou == 1.0

    def test_all_classes_empty_raises(self):
        with pytest.raises(ValueError):
            iou(ConfusionMatrix(3))


class TestRelativeGeneralization:
    def test_identity_is_hundred(self):
        assert relative_generalization(57.3, 57.3) == 100.0

    def test_one_decimal_rounding(self):
        assert relative_generalization(49.2, 74.7) == 65.9
        assert relative_generalization(38.9, 79.2) == 49.1

    def test_scale_invariance(self):
        for k in (0.5, 2.0, 10.0):
            assert relative_generalization(30.0, 60.0) == relative_generalization(30.0 * k, 60.0 * k)

    def test_rejects_non_positive_oracle(self):
        with pytest.raises(ValueError):
            relative_generalization(10.0, 0.0)
        with pytest.raises(ValueError):
            relative_generalization(10.0, -5.0)
