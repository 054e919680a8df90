"""
Report files for a benchmark run.

All writers are deterministic: the same report and records produce
byte-identical files.
"""

import csv
import io
import json
import logging
from collections import Counter
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence

from django.template.loader import render_to_string

from .choices import TerminationReason
from .exceptions import EmptyInput, IoFailure, MalformedManifest
from .metrics import MetricsReport
from .templatetags.harness_tags import format_ratio, split_label

logger = logging.getLogger(__name__)

REPORT_FORMATS = ('csv', 'markdown', 'jsonl')
FILE_NAMES = {'csv': 'report.csv', 'markdown': 'report.md', 'jsonl': 'records.jsonl'}


def _write(path: Path, text: str) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8', newline='') as handle:
            handle.write(text)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}")
    return path


def _csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()


def report_csv(report: MetricsReport) -> str:
    return _csv_text(
        ['split', 'n', 'giou', 'ciou', 'xiou'],
        ([split_label(row.split), row.n, format_ratio(row.giou), format_ratio(row.ciou), format_ratio(row.xiou)]
         for row in report.rows()),
    )


def report_markdown(report: MetricsReport, records: Sequence = (), title: str = 'Benchmark report',
                    query_field: str = 'long') -> str:
    counts = Counter(r.termination for r in records if r.termination)
    terminations = [(TerminationReason(name).label, counts[name])
                    for name in TerminationReason.values if counts[name]]
    return render_to_string('harness/reports/report.md', {
        'title': title,
        'query_field': query_field,
        'report': report,
        'rows': report.rows(),
        'terminations': terminations,
    })


def records_jsonl(records: Sequence) -> str:
    return ''.join(json.dumps(r.to_json(), sort_keys=True, ensure_ascii=False) + '\n' for r in records)


def emit_report(report: MetricsReport, records: Sequence, out_dir, formats: Sequence[str] = REPORT_FORMATS,
                title: str = 'Benchmark report', query_field: str = 'long') -> Dict[str, Path]:
    """
    Write the requested formats into out_dir.

    Returns:
        Mapping of format -> written path
    """
    if report is None or not report.per_item:
        raise EmptyInput('nothing to report')
    unknown = set(formats) - set(REPORT_FORMATS)
    if unknown:
        raise ValueError(f"unknown report formats: {sorted(unknown)}")

    out_dir = Path(out_dir)
    written = {}
    for fmt in formats:
        if fmt == 'csv':
            text = report_csv(report)
        elif fmt == 'markdown':
            text = report_markdown(report, records, title, query_field)
        else:
            text = records_jsonl(records)
        written[fmt] = _write(out_dir / FILE_NAMES[fmt], text)
    logger.info("wrote %s to %s", ', '.join(sorted(written)), out_dir)
    return written


# ===== REASONING-STEP TABLE =====

def load_records(path) -> Dict[str, dict]:
    """records.jsonl -> {item_id: row}"""
    rows = {}
    try:
        lines = Path(path).read_text(encoding='utf-8').splitlines()
    except OSError as exc:
        raise IoFailure(f"cannot read records {path}: {exc}")
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            rows[str(row['item_id'])] = row
        except (ValueError, KeyError, TypeError) as exc:
            raise MalformedManifest(f"{path}:{number}: bad record ({exc})")
    return rows


def emit_step_table(records: Sequence, path, baseline: Optional[Dict[str, dict]] = None) -> Path:
    """
    Per-item reasoning steps and IoU. With a baseline (records of another
    run), adds the step and IoU differences for items present in both.
    """
    header = ['item_id', 'split', 'reasoning_steps', 'iou']
    if baseline is not None:
        header += ['delta_steps', 'delta_iou']
    rows = []
    for record in records:
        row = [record.item_id, split_label(record.split), record.reasoning_steps, format_ratio(record.iou)]
        if baseline is not None:
            base = baseline.get(record.item_id)
            if base is None:
                row += ['', '']
            else:
                row += [record.reasoning_steps - int(base['reasoning_steps']),
                        f"{float(record.iou) - float(base['iou']):.4f}"]
        rows.append(row)
    return _write(Path(path), _csv_text(header, rows))
