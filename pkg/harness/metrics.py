"""
Segmentation metrics: gIoU, cIoU and the cross-concept confusion metric xIoU.

Aggregation works on exact integer pixel counts and returns Fractions, so
results do not depend on item order and can be checked against a brute-force
oracle with exact equality. Rounding happens only when reports are rendered.
"""

from collections import OrderedDict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence

from .choices import Split
from .exceptions import EmptyInput, MissingOthersUnion
from .masks import RasterMask, area, intersect, union, _check_same_shape


@dataclass(frozen=True)
class EvalPair:
    """One scored example: prediction P, ground truth G, others-union O."""
    prediction: RasterMask
    ground_truth: RasterMask
    others_union: Optional[RasterMask] = None
    split_tag: str = Split.NONE
    item_id: str = ''

    def __post_init__(self):
        masks = [self.prediction, self.ground_truth]
        if self.others_union is not None:
            masks.append(self.others_union)
        _check_same_shape(*masks)
        object.__setattr__(self, 'split_tag', Split(self.split_tag))


@dataclass(frozen=True)
class ItemMetrics:
    """
    Per-item counts and ratios.

    xiou is None when the item has no others-union. empty_prediction marks
    the xIoU-by-convention case; empty_union marks the IoU-by-convention case.
    """
    item_id: str
    split: str
    intersection: int
    union: int
    prediction_area: int
    others_overlap: Optional[int]
    iou: Fraction
    xiou: Optional[Fraction]
    empty_prediction: bool
    empty_union: bool


@dataclass(frozen=True)
class SplitMetrics:
    split: str
    n: int
    giou: Fraction
    ciou: Fraction
    xiou: Optional[Fraction]
    n_xiou: int


@dataclass
class MetricsReport:
    """
    Aggregates overall ("total") and per split.

    splits only holds splits that occur, in Ad-hoc / Common / None order.
    """
    per_item: List[ItemMetrics]
    total: SplitMetrics
    splits: Dict[str, SplitMetrics] = field(default_factory=OrderedDict)

    @property
    def giou(self) -> Fraction:
        return self.total.giou

    @property
    def ciou(self) -> Fraction:
        return self.total.ciou

    @property
    def xiou(self) -> Optional[Fraction]:
        return self.total.xiou

    def rows(self) -> List[SplitMetrics]:
        """Per-split rows followed by the total row."""
        return list(self.splits.values()) + [self.total]

    def to_dict(self) -> dict:
        def ratio(value):
            return None if value is None else float(value)

        def split_dict(metrics):
            return {
                'split': metrics.split, 'n': metrics.n, 'n_xiou': metrics.n_xiou,
                'giou': ratio(metrics.giou), 'ciou': ratio(metrics.ciou), 'xiou': ratio(metrics.xiou),
            }

        return {
            'total': split_dict(self.total),
            'splits': [split_dict(m) for m in self.splits.values()],
            'per_item': [
                {
                    'item_id': item.item_id, 'split': item.split,
                    'iou': ratio(item.iou), 'xiou': ratio(item.xiou),
                    'empty_prediction': item.empty_prediction, 'empty_union': item.empty_union,
                }
                for item in self.per_item
            ],
        }


def _iou_counts(p: RasterMask, g: RasterMask):
    return area(intersect(p, g)), area(union(p, g))


def iou(p: RasterMask, g: RasterMask) -> Fraction:
    """|p ∩ g| / |p ∪ g|, with two empty masks counting as a perfect match."""
    inter, uni = _iou_counts(p, g)
    if uni == 0:
        return Fraction(1)
    return Fraction(inter, uni)


def score_pair(pair: EvalPair) -> ItemMetrics:
    inter, uni = _iou_counts(pair.prediction, pair.ground_truth)
    pred_area = area(pair.prediction)
    others_overlap = None
    xiou_value = None
    if pair.others_union is not None:
        others_overlap = area(intersect(pair.prediction, pair.others_union))
        # An empty prediction includes no wrong regions.
        xiou_value = Fraction(others_overlap, pred_area) if pred_area else Fraction(0)
    return ItemMetrics(
        item_id=pair.item_id,
        split=pair.split_tag,
        intersection=inter,
        union=uni,
        prediction_area=pred_area,
        others_overlap=others_overlap,
        iou=Fraction(inter, uni) if uni else Fraction(1),
        xiou=xiou_value,
        empty_prediction=pred_area == 0,
        empty_union=uni == 0,
    )


def _require(pairs):
    if not pairs:
        raise EmptyInput("at least one evaluation pair is required")


def giou(pairs: Sequence[EvalPair]) -> Fraction:
    _require(pairs)
    return _mean(score_pair(p).iou for p in pairs)


def ciou(pairs: Sequence[EvalPair]) -> Fraction:
    _require(pairs)
    scores = [score_pair(p) for p in pairs]
    return _cumulative(scores)


def xiou(pairs: Sequence[EvalPair]) -> Fraction:
    _require(pairs)
    for pair in pairs:
        if pair.others_union is None:
            raise MissingOthersUnion(f"item {pair.item_id or '?'} has no others-union mask")
    return _mean(score_pair(p).xiou for p in pairs)


def _mean(values) -> Fraction:
    values = list(values)
    return sum(values, Fraction(0)) / len(values)


def _cumulative(scores: Sequence[ItemMetrics]) -> Fraction:
    total_union = sum(s.union for s in scores)
    if total_union == 0:
        return Fraction(1)
    return Fraction(sum(s.intersection for s in scores), total_union)


def aggregate(split: str, scores: Sequence[ItemMetrics]) -> SplitMetrics:
    """Fold per-item scores into one row; xIoU only covers items with O."""
    with_others = [s.xiou for s in scores if s.xiou is not None]
    return SplitMetrics(
        split=split,
        n=len(scores),
        giou=_mean(s.iou for s in scores),
        ciou=_cumulative(scores),
        xiou=_mean(with_others) if with_others else None,
        n_xiou=len(with_others),
    )


def evaluate(pairs: Sequence[EvalPair]) -> MetricsReport:
    _require(pairs)
    scores = [score_pair(p) for p in pairs]
    return report_from_scores(scores)


def report_from_scores(scores: Sequence[ItemMetrics]) -> MetricsReport:
    _require(scores)
    splits = OrderedDict()
    for split in Split.values:
        members = [s for s in scores if s.split == split]
        if members:
            splits[split] = aggregate(split, members)
    return MetricsReport(per_item=list(scores), total=aggregate('total', scores), splits=splits)
