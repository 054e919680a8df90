"""
python manage.py vasa <segment|eval|replay|metrics> ...

    segment  one image + query -> mask PNG and trace JSONL
    eval     dataset manifest -> benchmark report (optionally recorded or queued)
    replay   trace JSONL -> recomputed masks, checked round by round
    metrics  dataset manifest + precomputed predictions -> report, no agent
"""

import argparse
from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from harness.benchmark import load_dataset, load_predictions, score_predictions
from harness.choices import QueryField
from harness.clients import ImageRef, ScriptBook
from harness.conf import build_segmenter, build_vlm, resolve_config
from harness.engine import run_inference
from harness.exceptions import HarnessError
from harness.masks import area
from harness.models import EvaluationRun
from harness.reports import emit_report, emit_step_table, load_records
from harness.tasks import evaluate_manifest, queue_evaluation
from harness.templatetags.harness_tags import format_ratio
from harness.traces import read_trace, replay_trace, write_trace


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='JSON config file (sections engine, vlm, segmenter, bench)')
    common.add_argument('--vlm-endpoint', help='OpenAI-compatible base URL of the VLM')
    common.add_argument('--seg-endpoint', help='Base URL of the segmentation service')
    common.add_argument('--scripted-vlm', help='JSON script of VLM replies (replaces the live VLM)')
    common.add_argument('--scripted-seg', help='JSON fixture of segmenter proposals (replaces the live segmenter)')
    common.add_argument('--max-rounds', type=int, help='Segment-call budget per session (default 20)')
    common.add_argument('--query-field', choices=QueryField.values, help='Which manifest query to use')
    common.add_argument('--out', default='vasa-out', help='Output directory')
    common.add_argument('--dump-overlays', help='Write every overlay shown to the VLM into this directory')
    common.add_argument('--jobs', type=int, help='Parallel benchmark workers')
    return common


class Command(BaseCommand):
    help = 'Run the segmentation agent, the benchmark, trace replay or offline metrics.'

    def add_arguments(self, parser):
        common = _common_options()
        subcommands = parser.add_subparsers(dest='subcommand', required=True)

        segment = subcommands.add_parser('segment', parents=[common], help='Segment one image')
        segment.add_argument('image', help='Input image path')
        segment.add_argument('query', help='Natural-language query')
        segment.add_argument('--image-id', help='Id used to look up segmenter fixtures (default: file stem)')

        evaluate = subcommands.add_parser('eval', parents=[common], help='Run a benchmark manifest')
        evaluate.add_argument('manifest', help='Dataset manifest JSON')
        evaluate.add_argument('--label', help='Name stored with --record / --queue')
        evaluate.add_argument('--record', action='store_true', help='Store the finished run in the database')
        evaluate.add_argument('--queue', action='store_true', help='Run in the background on the Django-Q cluster')
        evaluate.add_argument('--baseline', help='records.jsonl of another run for the step/IoU delta table')

        replay = subcommands.add_parser('replay', help='Verify traces by recomputing every working mask')
        replay.add_argument('traces', nargs='+', help='Trace JSONL files')

        metrics = subcommands.add_parser('metrics', parents=[common], help='Score precomputed predictions')
        metrics.add_argument('manifest', help='Dataset manifest JSON')
        metrics.add_argument('predictions', help='Prediction manifest JSON')

    def handle(self, *args, **options):
        handler = getattr(self, f"handle_{options['subcommand']}")
        try:
            handler(options)
        except HarnessError as exc:
            raise CommandError(str(exc))

    # ===== SUBCOMMANDS =====

    def handle_segment(self, options):
        config = self._config(options)
        image = ImageRef.open(options['image'], options.get('image_id'))
        vlm = build_vlm(config.backends, options['scripted_vlm'])
        if isinstance(vlm, ScriptBook):
            vlm = vlm.for_item(image.image_id)
        seg = build_segmenter(config.backends, options['scripted_seg'])
        engine = config.engine
        if not options['scripted_vlm']:
            engine = engine.with_overrides(time_limit=config.bench.item_timeout)

        mask, trace = run_inference(image, options['query'], vlm, seg, engine)
        out = Path(options['out'])
        try:
            mask_path = mask.to_png(out / f"{image.image_id}_mask.png")
        except OSError as exc:
            raise CommandError(f"cannot write mask: {exc}")
        trace_path = write_trace(trace, out / f"{image.image_id}_trace.jsonl")

        self.stdout.write(
            f"{trace.termination.label}: {trace.reasoning_steps} reasoning steps, "
            f"mask area {area(mask)}" + (f" ({trace.note})" if trace.note else '')
        )
        self.stdout.write(f"mask:  {mask_path}")
        self.stdout.write(f"trace: {trace_path}")

    def handle_eval(self, options):
        manifest = options['manifest']
        flags = self._flags(options)
        label = options.get('label') or Path(manifest).stem

        if options['queue']:
            run = EvaluationRun.objects.create(label=label, manifest=str(Path(manifest).resolve()),
                                               query_field=flags.get('query_field') or QueryField.LONG,
                                               options=flags)
            queue_evaluation(run)
            self.stdout.write(self.style.SUCCESS(f"Queued evaluation run {run.pk} ({label})"))
            return

        report, records, out_dir = evaluate_manifest(manifest, flags)
        self._print_report(report)
        baseline = load_records(options['baseline']) if options.get('baseline') else None
        self.stdout.write(f"step table: {emit_step_table(records, out_dir / 'steps.csv', baseline)}")
        if options['record']:
            run = EvaluationRun.objects.create(label=label, manifest=str(Path(manifest).resolve()),
                                               query_field=flags.get('query_field') or QueryField.LONG,
                                               options=flags)
            run.mark_done(report, out_dir)
            self.stdout.write(f"recorded as run {run.pk}")
        self.stdout.write(f"reports: {out_dir}")

    def handle_replay(self, options):
        failures = 0
        for path in options['traces']:
            result = replay_trace(read_trace(path))
            if result.verified:
                self.stdout.write(f"{path}: verified ({result.updates_checked} updates)")
            else:
                failures += 1
                where = f"round {result.divergent_round}" if result.divergent_round is not None else 'summary'
                self.stderr.write(f"{path}: diverges at {where}: {result.detail}")
        if failures:
            raise CommandError(f"{failures} of {len(options['traces'])} trace(s) failed replay")

    def handle_metrics(self, options):
        items = load_dataset(options['manifest'])
        report, records = score_predictions(items, load_predictions(options['predictions']))
        emit_report(report, records, options['out'], title=f"Metrics: {Path(options['predictions']).name}",
                    query_field=options.get('query_field') or QueryField.LONG)
        self._print_report(report)
        self.stdout.write(f"reports: {options['out']}")

    # ===== HELPERS =====

    def _flags(self, options) -> dict:
        keys = ('config', 'vlm_endpoint', 'seg_endpoint', 'scripted_vlm', 'scripted_seg',
                'max_rounds', 'query_field', 'out', 'dump_overlays', 'jobs')
        return {key: options.get(key) for key in keys if options.get(key) is not None}

    def _config(self, options):
        return resolve_config(
            options.get('config'), max_rounds=options.get('max_rounds'),
            vlm_endpoint=options.get('vlm_endpoint'), seg_endpoint=options.get('seg_endpoint'),
            jobs=options.get('jobs'), dump_overlays=options.get('dump_overlays'),
            query_field=options.get('query_field'),
        )

    def _print_report(self, report):
        self.stdout.write(f"{'split':<8} {'n':>4} {'gIoU':>7} {'cIoU':>7} {'xIoU':>7}")
        for row in report.rows():
            self.stdout.write(
                f"{row.split:<8} {row.n:>4} {format_ratio(row.giou):>7} "
                f"{format_ratio(row.ciou):>7} {format_ratio(row.xiou):>7}"
            )
