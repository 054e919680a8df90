"""
Tests for the vasa management command.
"""

import contextlib
import io
import json
import tempfile
from pathlib import Path
from unittest import mock

from django.core.management import call_command
from django.test import SimpleTestCase, TestCase

from harness.choices import EntryKind
from harness.cli import run_cli
from harness.masks import RasterMask, rle_encode
from harness.models import EvaluationRun
from harness.traces import read_trace, write_trace
from harness.tests.factories import (
    LONG_QUERY,
    cat_masks,
    write_benchmark_files,
    write_cat_files,
    write_json,
)


class SegmentAndReplayTests(SimpleTestCase):
    """Tests for `vasa segment` and `vasa replay` run in-process."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        self.files = write_cat_files(self.dir)
        self.out = self.dir / 'out'

    def tearDown(self):
        self.tmp.cleanup()

    def segment(self):
        stdout = io.StringIO()
        code = run_cli(['segment', str(self.files['image']), LONG_QUERY,
                        '--scripted-vlm', str(self.files['script']),
                        '--scripted-seg', str(self.files['fixture']),
                        '--out', str(self.out)], stdout=stdout)
        return code, stdout.getvalue()

    def test_segment_writes_mask_and_trace(self):
        """Test that segment exits 0 and writes the exact target mask."""
        code, output = self.segment()
        self.assertEqual(code, 0)
        self.assertIn('Verified: 6 reasoning steps, mask area 104', output)
        self.assertEqual(RasterMask.from_png(self.out / 'cat_mask.png'), cat_masks()['target'])
        self.assertTrue((self.out / 'cat_trace.jsonl').is_file())

    def test_replay_clean_trace(self):
        """Test that the written trace replays cleanly."""
        self.segment()
        stdout = io.StringIO()
        code = run_cli(['replay', str(self.out / 'cat_trace.jsonl')], stdout=stdout)
        self.assertEqual(code, 0)
        self.assertIn('verified (3 updates)', stdout.getvalue())

    def test_replay_tampered_trace(self):
        """Test that a tampered trace exits 1 and names the divergent round."""
        self.segment()
        trace = read_trace(self.out / 'cat_trace.jsonl')
        ears = [e for e in trace.entries if e.kind == EntryKind.UPDATE][1]
        ears.op = 'add'
        ears.action = {**ears.action, 'op': 'add'}
        tampered = write_trace(trace, self.dir / 'tampered.jsonl')

        stdout, stderr = io.StringIO(), io.StringIO()
        code = run_cli(['replay', str(self.out / 'cat_trace.jsonl'), str(tampered)], stdout=stdout, stderr=stderr)
        self.assertEqual(code, 1)
        self.assertIn('verified', stdout.getvalue())
        self.assertIn('diverges at round 2', stderr.getvalue())

    def test_usage_error(self):
        """Test that an unknown flag is a usage error."""
        with contextlib.redirect_stderr(io.StringIO()):
            code = run_cli(['segment', str(self.files['image']), LONG_QUERY, '--no-such-flag'])
        self.assertEqual(code, 2)

    def test_missing_backends(self):
        """Test that segment without backends fails with a runtime error."""
        stderr = io.StringIO()
        with self.settings(VASA={}):
            code = run_cli(['segment', str(self.files['image']), LONG_QUERY], stderr=stderr)
        self.assertEqual(code, 1)
        self.assertIn('VLM endpoint', stderr.getvalue())


class MetricsCommandTests(SimpleTestCase):
    """Tests for `vasa metrics`."""

    def test_scores_prediction_file(self):
        """Test that precomputed masks are scored and reported."""
        with tempfile.TemporaryDirectory() as tmp:
            directory = Path(tmp)
            files = write_benchmark_files(directory)
            target = rle_encode(cat_masks()['target']).to_json()
            predictions = write_json(directory / 'predictions.json', {'predictions': [
                {'id': f"{prefix}-{i}", 'rle': target} for prefix in ('adhoc', 'common') for i in range(3)
            ]})
            stdout = io.StringIO()
            code = run_cli(['metrics', str(files['manifest']), str(predictions), '--out', str(directory / 'out')],
                           stdout=stdout)
            self.assertEqual(code, 0)
            self.assertIn('total       6  1.0000  1.0000  0.0000', stdout.getvalue())
            self.assertIn('| Total | 1.0000 | 1.0000 | 0.0000 | 6 |',
                          (directory / 'out' / 'report.md').read_text(encoding='utf-8'))


class EvalCommandTests(TestCase):
    """Tests for `vasa eval`."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        self.files = write_benchmark_files(self.dir)
        self.out = self.dir / 'out'

    def tearDown(self):
        self.tmp.cleanup()

    def run_eval(self, *extra):
        stdout = io.StringIO()
        call_command('vasa', 'eval', str(self.files['manifest']),
                     '--scripted-vlm', str(self.files['script']),
                     '--scripted-seg', str(self.files['fixture']),
                     '--out', str(self.out), *extra, stdout=stdout)
        return stdout.getvalue()

    def test_eval_writes_reports(self):
        """Test that eval writes the report files, traces and step table."""
        output = self.run_eval()
        self.assertIn('1.0000', output)
        for name in ('report.csv', 'report.md', 'records.jsonl', 'steps.csv'):
            self.assertTrue((self.out / name).is_file(), name)
        self.assertEqual(len(list((self.out / 'traces').glob('*.jsonl'))), 6)
        self.assertFalse(EvaluationRun.objects.exists())

    def test_record(self):
        """Test that --record stores a finished run."""
        self.run_eval('--record', '--label', 'cats')
        run = EvaluationRun.objects.get()
        self.assertEqual(run.label, 'cats')
        self.assertEqual(run.status, EvaluationRun.Status.DONE)
        self.assertEqual(run.item_count, 6)
        self.assertEqual((run.giou, run.ciou, run.xiou), (1.0, 1.0, 0.0))

    def test_baseline_deltas(self):
        """Test that --baseline adds delta columns to the step table."""
        baseline = self.dir / 'baseline.jsonl'
        baseline.write_text(json.dumps({'item_id': 'adhoc-0', 'reasoning_steps': 8, 'iou': 0.5}) + '\n', encoding='utf-8')
        self.run_eval('--baseline', str(baseline))
        lines = (self.out / 'steps.csv').read_text(encoding='utf-8').splitlines()
        self.assertTrue(lines[0].endswith('delta_steps,delta_iou'))
        self.assertEqual(lines[1], 'adhoc-0,Ad-hoc,6,1.0000,-2,0.5000')

    @mock.patch('harness.tasks.async_task')
    def test_queue(self, async_task):
        """Test that --queue stores a queued run and hands it to the cluster."""
        output = self.run_eval('--queue', '--label', 'nightly')
        run = EvaluationRun.objects.get()
        self.assertEqual(run.status, EvaluationRun.Status.QUEUED)
        self.assertEqual(run.options['scripted_vlm'], str(self.files['script']))
        async_task.assert_called_once_with('harness.tasks.run_evaluation', run.pk, task_name=f"vasa-eval-{run.pk}")
        self.assertIn('Queued evaluation run', output)
        self.assertFalse(self.out.exists())
