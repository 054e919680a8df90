"""
Tests for gIoU, cIoU and xIoU.
"""

import random
from fractions import Fraction

import numpy as np
from django.test import TestCase

from harness.choices import Split
from harness.exceptions import DimensionMismatch, EmptyInput, MissingOthersUnion
from harness.masks import RasterMask
from harness.metrics import EvalPair, ciou, evaluate, giou, iou, score_pair, xiou
from harness.templatetags.harness_tags import format_ratio, ratio4, split_label
from harness.tests.factories import cat_masks


def rows(*indices):
    return RasterMask.from_rows(4, 4, indices)


EMPTY = RasterMask.empty(4, 4)


def pixel_oracle(pairs):
    """Per-pixel counting, independent of the numpy code paths."""
    ious, inter_total, union_total, xious = [], 0, 0, []
    for pair in pairs:
        inter = uni = pred = wrong = 0
        for r in range(pair.prediction.height):
            for c in range(pair.prediction.width):
                p = bool(pair.prediction.bits[r][c])
                g = bool(pair.ground_truth.bits[r][c])
                inter += p and g
                uni += p or g
                pred += p
                if pair.others_union is not None:
                    wrong += p and bool(pair.others_union.bits[r][c])
        ious.append(Fraction(inter, uni) if uni else Fraction(1))
        inter_total += inter
        union_total += uni
        if pair.others_union is not None:
            xious.append(Fraction(wrong, pred) if pred else Fraction(0))
    return {
        'giou': sum(ious, Fraction(0)) / len(ious),
        'ciou': Fraction(inter_total, union_total) if union_total else Fraction(1),
        'xiou': sum(xious, Fraction(0)) / len(xious) if xious else None,
    }


def six_pairs():
    return [
        EvalPair(rows(0, 1), rows(1, 2), rows(3), Split.AD_HOC, 'a1'),
        EvalPair(rows(0, 1), rows(0), rows(0), Split.AD_HOC, 'a2'),
        EvalPair(rows(3), rows(3), rows(0, 1), Split.AD_HOC, 'a3'),
        EvalPair(EMPTY, rows(2), rows(1), Split.COMMON, 'c1'),
        EvalPair(rows(0, 1, 2, 3), rows(1, 2), rows(0, 3), Split.COMMON, 'c2'),
        EvalPair(rows(2), rows(2, 3), None, Split.COMMON, 'c3'),
    ]


def random_mask(rng, width, height):
    density = rng.choice([0.0, 0.1, 0.5, 0.9])
    return RasterMask.from_array(rng.random((height, width)) < density)


def random_pairs(seed, count):
    """Pairs of varying size and split; about a third have no others-union."""
    rng = np.random.default_rng(seed)
    pairs = []
    for index in range(count):
        width, height = int(rng.integers(1, 13)), int(rng.integers(1, 13))
        others = random_mask(rng, width, height) if rng.random() < 0.7 else None
        pairs.append(EvalPair(random_mask(rng, width, height), random_mask(rng, width, height), others,
                              rng.choice(Split.values), f"r{index}"))
    return pairs


class IouTests(TestCase):
    """Tests for per-pair IoU."""

    def test_identical_masks(self):
        """Test that a nonempty mask against itself scores 1."""
        self.assertEqual(iou(rows(1), rows(1)), 1)

    def test_disjoint_masks(self):
        """Test that disjoint masks score 0."""
        self.assertEqual(iou(rows(0), rows(3)), 0)

    def test_overlapping_rows(self):
        """Test that rows 0-1 against rows 1-2 scores 4/12."""
        self.assertEqual(iou(rows(0, 1), rows(1, 2)), Fraction(1, 3))

    def test_both_empty_is_perfect(self):
        """Test that an empty prediction of an empty target counts as a match."""
        self.assertEqual(iou(EMPTY, EMPTY), 1)

    def test_pair_dimensions_checked(self):
        """Test that a pair with masks of different sizes is rejected."""
        with self.assertRaises(DimensionMismatch):
            EvalPair(rows(0), RasterMask.empty(5, 4))


class AggregateTests(TestCase):
    """Tests for gIoU, cIoU and xIoU over several pairs."""

    def test_giou_is_mean_of_ious(self):
        """Test that ious 1/3, 1/2 and 1 average to 11/18."""
        pairs = [EvalPair(rows(0, 1), rows(1, 2)), EvalPair(rows(0, 1), rows(0)), EvalPair(rows(3), rows(3))]
        self.assertEqual(giou(pairs), Fraction(11, 18))
        self.assertEqual(format_ratio(giou(pairs)), '0.6111')

    def test_giou_perfect_and_miss(self):
        """Test that one hit and one miss average to 0.5."""
        self.assertEqual(giou([EvalPair(rows(0), rows(0)), EvalPair(rows(0), rows(1))]), Fraction(1, 2))

    def test_ciou_is_cumulative(self):
        """Test that (4, 12) and (8, 8) accumulate to 12/20."""
        pairs = [EvalPair(rows(0, 1), rows(1, 2)), EvalPair(rows(0, 1), rows(0, 1))]
        self.assertEqual(ciou(pairs), Fraction(3, 5))

    def test_ciou_all_empty(self):
        """Test that all-empty predictions and targets score 1."""
        self.assertEqual(ciou([EvalPair(EMPTY, EMPTY), EvalPair(EMPTY, EMPTY)]), 1)

    def test_xiou_partial_overlap(self):
        """Test that a prediction half inside the others-union scores 0.5."""
        self.assertEqual(xiou([EvalPair(rows(0, 1), rows(1), rows(0))]), Fraction(1, 2))

    def test_xiou_extremes(self):
        """Test prediction disjoint from and contained in the others-union."""
        self.assertEqual(xiou([EvalPair(rows(1), rows(1), rows(0))]), 0)
        self.assertEqual(xiou([EvalPair(rows(0), rows(1), rows(0, 1))]), 1)

    def test_xiou_empty_prediction_is_zero(self):
        """Test that an empty prediction includes no wrong regions."""
        self.assertEqual(xiou([EvalPair(EMPTY, rows(1), rows(0))]), 0)

    def test_xiou_needs_others_union(self):
        """Test that xIoU refuses a pair without an others-union."""
        with self.assertRaises(MissingOthersUnion):
            xiou([EvalPair(rows(0), rows(0))])

    def test_empty_input(self):
        """Test that every aggregate refuses an empty list."""
        for metric in (giou, ciou, xiou, evaluate):
            with self.assertRaises(EmptyInput):
                metric([])

    def test_cat_scene_exclusions(self):
        """Test that predicting the whole head is penalized by xIoU."""
        masks = cat_masks()
        scored = score_pair(EvalPair(masks['head'], masks['target'], masks['others']))
        self.assertEqual(scored.iou, Fraction(104, 120))
        self.assertEqual(scored.xiou, Fraction(16, 120))


class EvaluateTests(TestCase):
    """Tests for the full metrics report."""

    def test_single_perfect_pair(self):
        """Test that a perfect prediction away from other concepts reports 1, 1, 0."""
        report = evaluate([EvalPair(rows(0), rows(0), rows(3))])
        self.assertEqual((report.giou, report.ciou, report.xiou), (1, 1, 0))

    def test_matches_pixel_oracle(self):
        """Test that totals equal brute-force per-pixel counting."""
        pairs = six_pairs()
        report = evaluate(pairs)
        expected = pixel_oracle(pairs)
        self.assertEqual(report.giou, expected['giou'])
        self.assertEqual(report.ciou, expected['ciou'])
        self.assertEqual(report.xiou, expected['xiou'])
        self.assertEqual(report.total.n_xiou, 5)

    def test_random_pairs_match_pixel_oracle(self):
        """Test that sixty random pairs of mixed sizes agree with per-pixel counting."""
        for seed in (3, 11, 29):
            pairs = random_pairs(seed, 60)
            report = evaluate(pairs)
            expected = pixel_oracle(pairs)
            with self.subTest(seed=seed):
                self.assertEqual(report.giou, expected['giou'])
                self.assertEqual(report.ciou, expected['ciou'])
                self.assertEqual(report.xiou, expected['xiou'])
                for split, row in report.splits.items():
                    members = [p for p in pairs if p.split_tag == split]
                    self.assertEqual((row.giou, row.ciou, row.xiou),
                                     tuple(pixel_oracle(members).values()))

    def test_duplicating_every_pair_changes_nothing(self):
        """Test that listing each pair twice leaves every aggregate unchanged."""
        pairs = random_pairs(5, 50)
        once, twice = evaluate(pairs), evaluate(pairs + pairs)
        self.assertEqual(twice.total.n, 100)
        for left, right in zip(once.rows(), twice.rows()):
            self.assertEqual((left.giou, left.ciou, left.xiou), (right.giou, right.ciou, right.xiou))

    def test_equal_unions_make_ciou_equal_giou(self):
        """Test that cIoU collapses to gIoU when every pair has the same union area."""
        rng = np.random.default_rng(17)
        region = rng.random((10, 12)) < 0.6
        region[0, 0] = True
        pairs = []
        for _ in range(50):
            pred = region & (rng.random(region.shape) < 0.5)
            gt = (region & ~pred) | (pred & (rng.random(region.shape) < 0.5))
            pairs.append(EvalPair(RasterMask.from_array(pred), RasterMask.from_array(gt)))
        self.assertEqual(ciou(pairs), giou(pairs))
        self.assertEqual(ciou(pairs), pixel_oracle(pairs)['ciou'])

    def test_splits_match_restricted_evaluation(self):
        """Test that each split row equals evaluating only that split's pairs."""
        pairs = six_pairs()
        report = evaluate(pairs)
        self.assertEqual(list(report.splits), [Split.AD_HOC, Split.COMMON])
        for split, row in report.splits.items():
            members = [p for p in pairs if p.split_tag == split]
            expected = pixel_oracle(members)
            self.assertEqual(row.n, len(members))
            self.assertEqual(row.giou, expected['giou'])
            self.assertEqual(row.ciou, expected['ciou'])
            self.assertEqual(row.xiou, expected['xiou'])

    def test_order_independent(self):
        """Test that shuffling the pairs does not change any aggregate."""
        pairs = six_pairs()
        report = evaluate(pairs)
        shuffled = pairs[:]
        random.Random(7).shuffle(shuffled)
        other = evaluate(shuffled)
        for left, right in zip(report.rows(), other.rows()):
            self.assertEqual((left.giou, left.ciou, left.xiou), (right.giou, right.ciou, right.xiou))

    def test_rows_end_with_total(self):
        """Test that rows() lists splits then the total."""
        self.assertEqual([row.split for row in evaluate(six_pairs()).rows()],
                         [Split.AD_HOC, Split.COMMON, 'total'])

    def test_to_dict_uses_floats(self):
        """Test that the serializable form carries plain numbers."""
        payload = evaluate(six_pairs()).to_dict()
        self.assertIsInstance(payload['total']['giou'], float)
        self.assertEqual(len(payload['per_item']), 6)
        self.assertIsNone(payload['per_item'][5]['xiou'])


class RatioFormattingTests(TestCase):
    """Tests for four-decimal report formatting."""

    def test_four_decimals(self):
        """Test thirds and two-thirds."""
        self.assertEqual(format_ratio(Fraction(1, 3)), '0.3333')
        self.assertEqual(format_ratio(Fraction(2, 3)), '0.6667')
        self.assertEqual(format_ratio(Fraction(1)), '1.0000')

    def test_half_rounds_up(self):
        """Test that an exact half at the fifth decimal rounds up."""
        self.assertEqual(format_ratio(Fraction(5, 100000)), '0.0001')
        self.assertEqual(format_ratio(Fraction(12345, 100000)), '0.1235')

    def test_missing(self):
        """Test the placeholder for an absent ratio."""
        self.assertEqual(format_ratio(None), 'n/a')
        self.assertEqual(ratio4(None), 'n/a')
        self.assertEqual(ratio4('not a number'), 'n/a')

    def test_split_label(self):
        """Test human labels for splits and the total row."""
        self.assertEqual(split_label('ad-hoc'), 'Ad-hoc')
        self.assertEqual(split_label('total'), 'Total')
