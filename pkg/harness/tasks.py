"""
Background evaluation jobs using Django-Q.

`vasa eval --queue` stores an EvaluationRun and hands its id to the
cluster, so a long batch does not block the shell that started it.
"""

import logging
from pathlib import Path

from django_q.tasks import async_task

from .benchmark import load_dataset, run_benchmark
from .conf import build_segmenter, build_vlm, resolve_config
from .exceptions import HarnessError
from .models import EvaluationRun
from .reports import emit_report

logger = logging.getLogger(__name__)


def evaluate_manifest(manifest, options: dict):
    """
    Run the benchmark described by options and write its report files.

    Args:
        manifest: Path of the dataset manifest
        options: config, scripted_vlm, scripted_seg, vlm_endpoint, seg_endpoint,
            max_rounds, jobs, query_field, out, dump_overlays (all optional)

    Returns:
        (MetricsReport, records, output directory)
    """
    config = resolve_config(
        options.get('config'), max_rounds=options.get('max_rounds'),
        vlm_endpoint=options.get('vlm_endpoint'), seg_endpoint=options.get('seg_endpoint'),
        jobs=options.get('jobs'), dump_overlays=options.get('dump_overlays'),
        query_field=options.get('query_field'),
    )
    scripted = bool(options.get('scripted_vlm'))
    vlm = build_vlm(config.backends, options.get('scripted_vlm'))
    seg = build_segmenter(config.backends, options.get('scripted_seg'))
    items = load_dataset(manifest)

    out_dir = Path(options.get('out') or 'vasa-out')
    report, records = run_benchmark(
        items, vlm, seg, config.engine, query_field=config.bench.query_field,
        jobs=config.bench.jobs, trace_dir=out_dir / 'traces',
        item_timeout=None if scripted else config.bench.item_timeout,
    )
    emit_report(report, records, out_dir, title=f"Benchmark report: {Path(manifest).name}",
                query_field=config.bench.query_field)
    return report, records, out_dir


def run_evaluation(run_id):
    """
    Background task: execute a stored EvaluationRun.

    Args:
        run_id: Primary key of the run to execute
    """
    try:
        run = EvaluationRun.objects.get(pk=run_id)
    except EvaluationRun.DoesNotExist:
        return f"Error: evaluation run {run_id} not found (may have been deleted)"

    run.status = EvaluationRun.Status.RUNNING
    run.save(update_fields=['status', 'updated_at'])
    try:
        report, _, out_dir = evaluate_manifest(run.manifest, {**run.options, 'query_field': run.query_field})
    except (HarnessError, OSError) as exc:
        logger.error("evaluation run %s failed: %s", run_id, exc)
        run.mark_failed(exc)
        return f"Error: {exc}"

    run.mark_done(report, out_dir)
    return f"Run {run.label}: gIoU {run.giou:.4f} over {run.item_count} items"


def queue_evaluation(run: EvaluationRun):
    """Mark the run queued and hand it to the Django-Q cluster."""
    run.status = EvaluationRun.Status.QUEUED
    run.error = ''
    run.save()
    return async_task('harness.tasks.run_evaluation', run.pk, task_name=f"vasa-eval-{run.pk}")
