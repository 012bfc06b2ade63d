import itertools
import json

import numpy as np
import pytest
import scipy.stats
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from complseg.errors import EmptyInput, ShapeMismatch, TooFewPairs
from complseg.evaluation import (
    argmax_decode,
    build_report,
    confusion_matrix,
    dice_class_average,
    dice_image,
    ensemble_merge,
    mean_dice,
    normalize_rows,
    significance_level,
    wilcoxon_signed_rank,
)
from complseg.labels import ClassCatalog

from conftest import random_label_map
from oracles import dice_sets, wilcoxon_enumeration

BG = 255
CAT = ClassCatalog(("a", "b", "c"))

# paired scores whose exact p-value was computed by enumerating all 2**6 sign
# patterns (tests/oracles.py): 10 of 64 patterns are at least as extreme
N6_A = [0.91, 0.85, 0.78, 0.88, 0.70, 0.95]
N6_B = [0.80, 0.86, 0.60, 0.75, 0.72, 0.81]
N6_P = 10 / 64


class TestDecode:
    @pytest.mark.parametrize("decode", [argmax_decode, ensemble_merge])
    @pytest.mark.parametrize("probs,expected", [
        ((0.7, 0.2), 0),
        ((0.3, 0.4), BG),
        ((0.6, 0.6), 0),
    ])
    def test_examples(self, decode, probs, expected):
        assert decode(np.array([[probs]]), 0.5)[0, 0] == expected

    def test_threshold_is_inclusive(self):
        assert argmax_decode(np.array([0.5, 0.1]), 0.5) == 0

    def test_background_channel_ignores_tau(self):
        probs = np.array([[[0.2, 0.1, 0.05]]])
        assert argmax_decode(probs, 0.9, has_background_channel=True)[0, 0] == 0
        assert argmax_decode(probs[..., [2, 1, 0]], 0.0, has_background_channel=True)[0, 0] == BG

    def test_bad_tau(self):
        with pytest.raises(ValueError):
            argmax_decode(np.ones((1, 1, 2)), 1.5)

    @given(arrays(np.float64, (3, 4, 3), elements=st.integers(-120, 120).map(lambda v: v / 4)),
           st.floats(0.0, 1.0))
    def test_sigmoid_monotone_invariance(self, logits, tau):
        probs = 1 / (1 + np.exp(-logits))
        decoded = argmax_decode(probs, tau)
        clears = probs.max(-1) >= tau
        assert np.array_equal(decoded[clears], logits.argmax(-1)[clears])
        assert (decoded[~clears] == BG).all()

    @given(arrays(np.float64, (4, 5, 1), elements=st.floats(0, 1)))
    def test_single_class_merge_is_thresholding(self, probs):
        merged = ensemble_merge(probs, 0.5)
        assert np.array_equal(merged, np.where(probs[..., 0] >= 0.5, 0, BG))


class TestDice:
    def test_identical_nonempty(self):
        m = np.array([[0, 1], [1, 0]])
        assert dice_image(m, m == 1, 1) == 1.0

    def test_both_empty(self):
        assert dice_image(np.full((2, 2), BG), np.zeros((2, 2), bool), 0) == 1.0

    def test_half_overlap(self):
        pred = np.array([[0, 0, BG, BG]])
        gt = np.array([[False, True, True, False]])
        assert dice_image(pred, gt, 0) == 0.5

    def test_accepts_label_map_ground_truth(self):
        pred = np.array([[0, 1, 1]])
        gt = np.array([[0, 1, 2]])
        assert dice_image(pred, gt, 1) == pytest.approx(2 / 3)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            dice_image(np.zeros((2, 2)), np.zeros((2, 3), bool), 0)

    @given(st.integers(0, 2**36 - 1), st.integers(0, 2**36 - 1))
    def test_brute_force_6x6(self, pbits, gbits):
        p = np.array([(pbits >> i) & 1 for i in range(36)], bool).reshape(6, 6)
        g = np.array([(gbits >> i) & 1 for i in range(36)], bool).reshape(6, 6)
        pred = np.where(p, 2, BG)
        cells = lambda m: {(int(y), int(x)) for y, x in np.argwhere(m)}  # noqa: E731
        assert dice_image(pred, g, 2) == dice_sets(cells(p), cells(g))

    @given(st.integers(0, 2**16 - 1), st.integers(0, 2**16 - 1), st.integers(0, 10**6))
    def test_symmetric_and_permutation_invariant(self, pbits, gbits, seed):
        p = np.array([(pbits >> i) & 1 for i in range(16)], bool).reshape(4, 4)
        g = np.array([(gbits >> i) & 1 for i in range(16)], bool).reshape(4, 4)
        d = dice_image(np.where(p, 0, BG), g, 0)
        assert d == dice_image(np.where(g, 0, BG), p, 0)
        perm = np.random.default_rng(seed).permutation(16)
        pp, gp = p.ravel()[perm].reshape(4, 4), g.ravel()[perm].reshape(4, 4)
        assert d == dice_image(np.where(pp, 0, BG), gp, 0)
        assert 0.0 <= d <= 1.0


class TestAverages:
    def test_class_average(self):
        assert dice_class_average([1.0, 0.0]) == 0.5

    def test_mean_of_single_class(self):
        assert mean_dice([dice_class_average([0.3, 0.5])]) == pytest.approx(0.4)

    def test_mean_over_classes(self):
        assert mean_dice([0.8, 0.4, 0.6]) == pytest.approx(0.6)

    def test_empty(self):
        with pytest.raises(EmptyInput):
            dice_class_average([])
        with pytest.raises(EmptyInput):
            mean_dice([])


class TestConfusion:
    def test_perfect_prediction_is_diagonal(self, rng):
        gt = random_label_map(rng, 6, 6, 3)
        cm = confusion_matrix(gt, gt, 3)
        assert np.array_equal(cm, np.diag(np.diag(cm)))
        assert cm.sum() == 36

    def test_rows_sum_to_ground_truth_counts(self, rng):
        for _ in range(10):
            gt = random_label_map(rng, 3, 7, 3)
            pred = random_label_map(rng, 3, 7, 3)
            cm = confusion_matrix(pred, gt, 3)
            counts = [int((gt == c).sum()) for c in (0, 1, 2, BG)]
            assert cm.sum(axis=1).tolist() == counts

    def test_relabeling_permutes_rows_and_columns(self, rng):
        gt = random_label_map(rng, 5, 5, 3)
        pred = random_label_map(rng, 5, 5, 3)
        swap = lambda m: np.select([m == 0, m == 1], [1, 0], m)  # noqa: E731
        cm = confusion_matrix(pred, gt, 3)
        cm_swapped = confusion_matrix(swap(pred), swap(gt), 3)
        order = [1, 0, 2, 3]
        assert np.array_equal(cm_swapped, cm[np.ix_(order, order)])

    def test_unlabeled_pixels_excluded(self):
        gt = np.array([[0, 1]])
        cm = confusion_matrix(np.array([[0, 0]]), gt, 2, labeled=np.array([[True, False]]))
        assert cm.sum() == 1 and cm[0, 0] == 1

    def test_accuracy_cross_check(self, rng):
        gt = random_label_map(rng, 8, 8, 3)
        pred = random_label_map(rng, 8, 8, 3)
        cm = confusion_matrix(pred, gt, 3)
        assert np.trace(cm) / cm.sum() == pytest.approx(float(np.mean(pred == gt)), abs=0)

    def test_normalized_rows(self):
        m = normalize_rows(np.array([[1, 3], [0, 0]]))
        assert m.tolist() == [[0.25, 0.75], [0.0, 0.0]]


class TestWilcoxon:
    def test_identical_lists_have_too_few_pairs(self):
        with pytest.raises(TooFewPairs):
            wilcoxon_signed_rank([0.5] * 8, [0.5] * 8)

    def test_n6_exact_value(self):
        assert wilcoxon_signed_rank(N6_A, N6_B) == pytest.approx(N6_P, abs=1e-12)
        assert wilcoxon_enumeration(N6_A, N6_B) == pytest.approx(N6_P, abs=1e-12)

    def test_swap_symmetry(self, rng):
        a, b = rng.random(12), rng.random(12)
        assert wilcoxon_signed_rank(a, b) == pytest.approx(wilcoxon_signed_rank(b, a), abs=1e-15)

    @pytest.mark.parametrize("n", range(5, 11))
    def test_matches_enumeration_with_ties(self, n):
        rng = np.random.default_rng(n)
        for _ in range(5):
            a = rng.integers(0, 6, n) / 5
            b = rng.integers(0, 6, n) / 5
            if np.count_nonzero(a - b) < 5:
                continue
            assert wilcoxon_signed_rank(a, b) == pytest.approx(wilcoxon_enumeration(a, b), abs=1e-9)

    def test_matches_scipy_exact_without_ties(self, rng):
        a, b = rng.random(15), rng.random(15)
        ref = scipy.stats.wilcoxon(a, b, method="exact").pvalue
        assert wilcoxon_signed_rank(a, b) == pytest.approx(ref, abs=1e-12)

    def test_normal_approximation_matches_scipy(self, rng):
        a = np.round(rng.random(60), 2)
        b = np.round(rng.random(60), 2)
        ref = scipy.stats.wilcoxon(a, b, zero_method="wilcox", correction=True,
                                   method="approx").pvalue
        assert wilcoxon_signed_rank(a, b) == pytest.approx(ref, rel=1e-9)

    def test_length_mismatch(self):
        with pytest.raises(ShapeMismatch):
            wilcoxon_signed_rank([1, 2, 3], [1, 2])

    def test_levels(self):
        assert significance_level(0.009) == "strong"
        assert significance_level(0.03) == "significant"
        assert significance_level(0.05) == "none"


class TestReport:
    def _data(self, rng, n=12):
        gts = np.stack([random_label_map(rng, 6, 6, 3) for _ in range(n)])
        good = gts.copy()
        noise = rng.random(gts.shape) < 0.1
        good[noise] = BG
        bad = gts.copy()
        bad[rng.random(gts.shape) < 0.4] = 0
        return gts, good, bad

    def test_internal_consistency(self, rng):
        gts, good, bad = self._data(rng)
        rep = build_report({"IL": good, "EN": bad}, gts, CAT)
        for t in rep.trials.values():
            assert t.mean_dice == pytest.approx(np.mean(list(t.class_average.values())), abs=1e-15)
            assert t.confusion.sum(axis=1).tolist() == [int((gts == c).sum()) for c in (0, 1, 2, BG)]
            assert all(0 <= d <= 1 for v in t.per_image.values() for d in v)
        assert rep.significance is None
        assert "significance" not in rep.to_dict()

    def test_significance_entries(self, rng):
        gts, good, bad = self._data(rng)
        rep = build_report({"IL": good, "EN": bad}, gts, CAT, comparisons=[("IL", "EN")])
        targets = [e["target"] for e in rep.significance]
        assert targets == ["a", "b", "c", "mean"]
        for e in rep.significance:
            if e["p_value"] is not None:
                assert e["level"] == significance_level(e["p_value"])
        pooled = rep.significance[-1]
        il, en = rep.trials["IL"].per_image, rep.trials["EN"].per_image
        ref = wilcoxon_signed_rank([x for c in il for x in il[c]], [x for c in en for x in en[c]])
        assert pooled["p_value"] == ref

    def test_background_optional(self, rng):
        gts, good, _ = self._data(rng)
        rep = build_report({"IL": good}, gts, CAT, include_background=True)
        assert list(rep.trials["IL"].class_average) == ["a", "b", "c", "background"]

    def test_serialization_is_stable(self, rng):
        gts, good, bad = self._data(rng)
        r1 = build_report({"IL": good, "EN": bad}, gts, CAT, [("IL", "EN")]).to_json()
        r2 = build_report({"IL": good, "EN": bad}, gts, CAT, [("IL", "EN")]).to_json()
        assert r1 == r2
        assert json.loads(r1)["classes"] == ["a", "b", "c", "background"]
