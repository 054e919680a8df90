"""
Benchmark runner: load a dataset manifest, run one inference session per
item on a bounded worker pool, and score the predictions.

Manifest format (one JSON file, image paths relative to it):

    {"version": 1,
     "items": [{"id": "cat-1", "image": "images/cat.png", "split": "ad-hoc",
                "query_short": "cat head",
                "query_long": "the cat's head without the ears and eyes",
                "gt": {"size": [h, w], "counts": [...]},
                "others": {"size": [h, w], "counts": [...]}}]}
"""

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

from PIL import Image

from .choices import QueryField, TerminationReason
from .clients import ImageRef, ScriptBook, SegmenterBackend, VlmBackend
from .conf import EngineConfig
from .engine import run_inference
from .exceptions import EmptyInput, HarnessError, MalformedManifest, MissingImage
from .forms import ManifestItemForm, PredictionForm, form_errors
from .masks import RasterMask, Rle, rle_decode, rle_encode
from .metrics import EvalPair, MetricsReport, evaluate, score_pair
from .traces import write_trace

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1


# ===== DATASET =====

@dataclass
class EvalItem:
    """
    One benchmark example. Masks are decoded on first access.

    Attributes:
        item_id: Unique id within the manifest
        image_path: Absolute path of the input image
        query_short: Class-label style query
        query_long: Long-form definition query
        split: ad-hoc, common or none
        image_id: Key used by segmenter fixtures (defaults to the image stem)
    """
    item_id: str
    image_path: Path
    query_short: str
    query_long: str
    split: str
    gt_rle: Rle = field(repr=False)
    others_rle: Optional[Rle] = field(default=None, repr=False)
    image_id: str = ''

    def __post_init__(self):
        self.image_path = Path(self.image_path)
        if not self.image_id:
            self.image_id = self.image_path.stem

    @cached_property
    def gt(self) -> RasterMask:
        return rle_decode(self.gt_rle, self.gt_rle.width, self.gt_rle.height)

    @cached_property
    def others(self) -> Optional[RasterMask]:
        if self.others_rle is None:
            return None
        return rle_decode(self.others_rle, self.others_rle.width, self.others_rle.height)

    def query(self, query_field: str = QueryField.LONG) -> str:
        return self.query_short if query_field == QueryField.SHORT else self.query_long

    def open_image(self) -> ImageRef:
        return ImageRef.open(self.image_path, self.image_id)


def _read_json(path, what: str):
    try:
        return json.loads(Path(path).read_text(encoding='utf-8'))
    except OSError as exc:
        raise MalformedManifest(f"cannot read {what} {path}: {exc}")
    except ValueError as exc:
        raise MalformedManifest(f"{what} {path} is not valid JSON: {exc}")


def _manifest_items(payload) -> list:
    if isinstance(payload, list):
        return payload
    if isinstance(payload, dict):
        version = payload.get('version', MANIFEST_VERSION)
        if version != MANIFEST_VERSION:
            raise MalformedManifest(f"unsupported manifest version {version!r}")
        items = payload.get('items', [])
        if isinstance(items, list):
            return items
    raise MalformedManifest("manifest must be a list of items or an object with an 'items' list")


def load_dataset(manifest_path, eager: bool = False) -> List[EvalItem]:
    """
    Validate every manifest item and return them in file order.

    Raises:
        MalformedManifest: Schema problems, duplicate ids, or masks whose
            size does not match the image
        MissingImage: An item's image file does not exist
    """
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    items, seen = [], set()

    for index, raw in enumerate(_manifest_items(_read_json(manifest_path, 'manifest'))):
        label = raw.get('id', f"#{index}") if isinstance(raw, dict) else f"#{index}"
        form = ManifestItemForm(data=raw if isinstance(raw, dict) else {})
        if not form.is_valid():
            raise MalformedManifest('invalid item', item_id=label, errors=form_errors(form))
        data = form.cleaned_data
        if data['id'] in seen:
            raise MalformedManifest('duplicate item id', item_id=data['id'])
        seen.add(data['id'])

        image_path = (base / data['image']).resolve()
        if not image_path.is_file():
            raise MissingImage(f"item {data['id']!r}: image not found: {image_path}")
        with Image.open(image_path) as image:
            size = image.size
        gt: Rle = data['gt']
        if (gt.width, gt.height) != size:
            raise MalformedManifest(
                f"gt mask is {gt.width}x{gt.height} but the image is {size[0]}x{size[1]}",
                item_id=data['id'],
            )

        item = EvalItem(
            item_id=data['id'], image_path=image_path, query_short=data['query_short'],
            query_long=data['query_long'], split=data['split'], gt_rle=gt,
            others_rle=data.get('others'), image_id=data.get('image_id') or '',
        )
        if eager:
            _ = (item.gt, item.others)
        items.append(item)

    logger.info("loaded %d items from %s", len(items), manifest_path)
    return items


# ===== RUNS =====

@dataclass
class RunRecord:
    """Result of one item; metrics can be recomputed from the stored masks."""
    item_id: str
    split: str
    query: str
    prediction: RasterMask
    iou: Fraction
    xiou: Optional[Fraction]
    reasoning_steps: int
    termination: str
    trace_path: Optional[str] = None
    note: str = ''

    def to_json(self) -> dict:
        return {
            'item_id': self.item_id,
            'split': self.split,
            'query': self.query,
            'iou': float(self.iou),
            'xiou': None if self.xiou is None else float(self.xiou),
            'reasoning_steps': self.reasoning_steps,
            'termination': self.termination,
            'trace': self.trace_path,
            'note': self.note,
            'prediction': rle_encode(self.prediction).to_json(),
        }


VlmSource = Union[VlmBackend, ScriptBook, Callable[[EvalItem], VlmBackend]]


def _vlm_for(source: VlmSource, item: EvalItem) -> VlmBackend:
    if isinstance(source, VlmBackend):
        return source
    if isinstance(source, ScriptBook):
        return source.for_item(item.item_id)
    return source(item)


def _slug(item_id: str) -> str:
    return re.sub(r'[^A-Za-z0-9._-]+', '_', item_id) or 'item'


def _pair(item: EvalItem, prediction: RasterMask) -> EvalPair:
    return EvalPair(prediction=prediction, ground_truth=item.gt, others_union=item.others,
                    split_tag=item.split, item_id=item.item_id)


def run_item(item: EvalItem, vlm: VlmSource, seg: SegmenterBackend, config: EngineConfig,
             query_field: str = QueryField.LONG, trace_dir=None) -> RunRecord:
    """
    One session for one item. Session failures never escape: the item is
    scored with whatever mask it ended with (empty if none).
    """
    query = item.query(query_field)
    image = item.open_image()
    trace_path = None
    try:
        prediction, trace = run_inference(image, query, _vlm_for(vlm, item), seg, config)
    except Exception as exc:
        if isinstance(exc, HarnessError):
            logger.error("item %s failed: %s", item.item_id, exc)
        else:
            logger.exception("item %s crashed", item.item_id)
        prediction = RasterMask.empty(image.width, image.height)
        steps, termination, note = 0, TerminationReason.UNRECOVERABLE.value, f"{type(exc).__name__}: {exc}"
    else:
        steps, termination, note = trace.reasoning_steps, trace.termination.value, trace.note
        if trace_dir is not None:
            trace_path = str(write_trace(trace, Path(trace_dir) / f"{_slug(item.item_id)}.jsonl"))

    scored = score_pair(_pair(item, prediction))
    return RunRecord(
        item_id=item.item_id, split=item.split, query=query, prediction=prediction,
        iou=scored.iou, xiou=scored.xiou, reasoning_steps=steps, termination=termination,
        trace_path=trace_path, note=note,
    )


def report_for(items: Sequence[EvalItem], records: Sequence[RunRecord]) -> MetricsReport:
    """Metrics over the stored predictions, joined to items by id."""
    by_id = {item.item_id: item for item in items}
    return evaluate([_pair(by_id[r.item_id], r.prediction) for r in records])


def run_benchmark(items: Sequence[EvalItem], vlm: VlmSource, seg: SegmenterBackend,
                  config: Optional[EngineConfig] = None, query_field: str = QueryField.LONG,
                  jobs: int = 1, trace_dir=None,
                  item_timeout: Optional[float] = None) -> Tuple[MetricsReport, List[RunRecord]]:
    """
    Run every item and aggregate. Records come back in item order whatever
    the number of workers.
    """
    if not items:
        raise EmptyInput('the benchmark needs at least one item')
    config = config or EngineConfig()
    if item_timeout is not None:
        config = config.with_overrides(time_limit=item_timeout)
    query_field = QueryField(query_field)

    logger.info("running %d items with %d worker(s), %s queries", len(items), jobs, query_field.value)
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as executor:
        records = list(executor.map(
            lambda item: run_item(item, vlm, seg, config, query_field, trace_dir), items,
        ))
    return report_for(items, records), records


# ===== PRECOMPUTED PREDICTIONS =====

def load_predictions(path) -> Dict[str, Rle]:
    """{"predictions": [{"id": ..., "rle": {...}}]} -> {id: Rle}"""
    payload = _read_json(path, 'prediction manifest')
    entries = payload.get('predictions') if isinstance(payload, dict) else payload
    if not isinstance(entries, list):
        raise MalformedManifest("prediction manifest must hold a 'predictions' list")
    predictions = {}
    for index, raw in enumerate(entries):
        form = PredictionForm(data=raw if isinstance(raw, dict) else {})
        if not form.is_valid():
            raise MalformedManifest('invalid prediction', item_id=f"#{index}", errors=form_errors(form))
        predictions[form.cleaned_data['id']] = form.cleaned_data['rle']
    return predictions


def score_predictions(items: Sequence[EvalItem],
                      predictions: Dict[str, Rle]) -> Tuple[MetricsReport, List[RunRecord]]:
    """Score precomputed masks without running the agent; missing ids count as empty."""
    if not items:
        raise EmptyInput('no items to score')
    records = []
    for item in items:
        rle = predictions.get(item.item_id)
        if rle is None:
            logger.warning("no prediction for item %s; scoring an empty mask", item.item_id)
            prediction = RasterMask.empty(item.gt.width, item.gt.height)
        else:
            if (rle.width, rle.height) != (item.gt.width, item.gt.height):
                raise MalformedManifest(
                    f"prediction is {rle.width}x{rle.height}, gt is {item.gt.width}x{item.gt.height}",
                    item_id=item.item_id,
                )
            prediction = rle_decode(rle, rle.width, rle.height)
        scored = score_pair(_pair(item, prediction))
        records.append(RunRecord(
            item_id=item.item_id, split=item.split, query='', prediction=prediction,
            iou=scored.iou, xiou=scored.xiou, reasoning_steps=0, termination='',
        ))
    return report_for(items, records), records
