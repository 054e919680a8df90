"""
Trace persistence and replay.

A trace file is JSON Lines: one header record, one record per history
entry, and one closing summary. Replay rebuilds the working mask from the
stored selections and checks it against the stored digests, so a trace is
its own proof of how the final mask was built.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

from .choices import EditOp, EntryKind, TerminationReason
from .engine import HistoryEntry, Trace, count_reasoning_steps
from .exceptions import IoFailure, MalformedRle, MalformedTrace
from .masks import RasterMask, Rle, apply_edit, area, mask_digest, rle_decode, rle_encode, subtract

logger = logging.getLogger(__name__)

TRACE_FORMAT = 'vasa-trace/1'


def _dumps(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, ensure_ascii=False)


def trace_records(trace: Trace) -> List[dict]:
    records = [{
        'record': 'header',
        'format': TRACE_FORMAT,
        'image_id': trace.image_id,
        'query': trace.query,
        'size': [trace.height, trace.width],
        'config': trace.config,
    }]
    records.extend({'record': 'entry', **entry.to_dict()} for entry in trace.entries)
    records.append({
        'record': 'summary',
        'termination': TerminationReason(trace.termination).value,
        'reasoning_steps': trace.reasoning_steps,
        'strategy': trace.strategy,
        'note': trace.note,
        'final_mask': rle_encode(trace.final_mask).to_json(),
        'final_digest': mask_digest(trace.final_mask),
        'wall_time': round(trace.wall_time, 3),
    })
    return records


def write_trace(trace: Trace, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as handle:
            for record in trace_records(trace):
                handle.write(_dumps(record) + '\n')
    except OSError as exc:
        raise IoFailure(f"cannot write trace {path}: {exc}")
    return path


def read_trace(path) -> Trace:
    path = Path(path)
    try:
        lines = path.read_text(encoding='utf-8').splitlines()
    except OSError as exc:
        raise IoFailure(f"cannot read trace {path}: {exc}")

    header, summary, entries = None, None, []
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except ValueError as exc:
            raise MalformedTrace(f"{path}:{number}: not JSON ({exc})")
        kind = record.pop('record', None) if isinstance(record, dict) else None
        if kind == 'header':
            header = record
        elif kind == 'entry':
            entries.append(HistoryEntry.from_dict(record))
        elif kind == 'summary':
            summary = record
        else:
            raise MalformedTrace(f"{path}:{number}: unknown record type {kind!r}")
    if header is None or summary is None:
        raise MalformedTrace(f"{path}: trace needs a header and a summary record")

    try:
        height, width = header['size']
        final = Rle.from_json(summary['final_mask'])
        return Trace(
            image_id=header['image_id'], query=header['query'], width=width, height=height,
            entries=entries, termination=TerminationReason(summary['termination']),
            final_mask=rle_decode(final, width, height),
            reasoning_steps=summary['reasoning_steps'], strategy=summary.get('strategy', ''),
            config=header.get('config', {}), note=summary.get('note', ''),
            wall_time=summary.get('wall_time', 0.0),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedTrace(f"{path}: {exc}")


# ===== REPLAY =====

@dataclass
class ReplayResult:
    """
    Outcome of replaying a trace.

    divergent_round is the round of the first entry that does not
    reproduce (None when everything checks out).
    """
    verified: bool
    updates_checked: int
    divergent_round: Optional[int] = None
    detail: str = ''
    masks: List[RasterMask] = field(default_factory=list, repr=False)


def replay_trace(trace: Trace) -> ReplayResult:
    """Recompute every working mask from the trace and compare it with what was recorded."""
    width, height = trace.width, trace.height
    working = RasterMask.empty(width, height)
    masks = []

    def diverged(entry, detail):
        logger.warning("trace for %s diverges at round %d: %s", trace.image_id, entry.round, detail)
        return ReplayResult(False, len(masks), entry.round, detail, masks)

    for entry in trace.entries:
        if entry.kind != EntryKind.UPDATE:
            continue
        try:
            op = EditOp(entry.op)
            selection = rle_decode(Rle.from_json(entry.selection), width, height)
        except (ValueError, MalformedRle) as exc:
            return diverged(entry, f"unreadable update: {exc}")
        if entry.action and entry.action.get('op') != op.value:
            return diverged(entry, f"recorded op {op.value!r} disagrees with action {entry.action.get('op')!r}")

        before = working
        working = apply_edit(before, op, [selection])
        if mask_digest(working) != entry.mask_digest:
            return diverged(entry, f"{op.value} does not reproduce the recorded working mask")
        added, removed = area(subtract(working, before)), area(subtract(before, working))
        if (added, removed) != (entry.pixels_added, entry.pixels_removed):
            return diverged(entry, f"pixel deltas +{added}/-{removed} do not match the record")
        if (op == EditOp.ADD and removed) or (op == EditOp.REMOVE and added):
            return diverged(entry, f"{op.value} changed area in the wrong direction")
        if entry.snapshot is not None and rle_encode(working).to_json() != entry.snapshot:
            return diverged(entry, 'snapshot does not match the replayed mask')
        masks.append(working)

    if working != trace.final_mask:
        last_round = trace.entries[-1].round if trace.entries else 0
        return ReplayResult(False, len(masks), last_round, 'final mask does not match the replayed mask', masks)
    steps = count_reasoning_steps(trace)
    if steps != trace.reasoning_steps:
        return ReplayResult(False, len(masks), None,
                            f"trace claims {trace.reasoning_steps} reasoning steps, entries hold {steps}", masks)
    return ReplayResult(True, len(masks), None, '', masks)
