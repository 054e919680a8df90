from django.db import models

from .choices import QueryField


class EvaluationRun(models.Model):
    """A benchmark run over one manifest, queued or finished."""

    class Status(models.TextChoices):
        QUEUED = 'queued', 'Queued'
        RUNNING = 'running', 'Running'
        DONE = 'done', 'Done'
        FAILED = 'failed', 'Failed'

    label = models.CharField(max_length=200, help_text="Descriptive name for this run")
    manifest = models.CharField(max_length=1000, help_text="Path of the dataset manifest")
    query_field = models.CharField(max_length=10, choices=QueryField.choices, default=QueryField.LONG)
    status = models.CharField(max_length=10, choices=Status.choices, default=Status.QUEUED)
    options = models.JSONField(default=dict, blank=True, help_text="Backend and engine options for the run")
    item_count = models.PositiveIntegerField(default=0)
    giou = models.FloatField(null=True, blank=True)
    ciou = models.FloatField(null=True, blank=True)
    xiou = models.FloatField(null=True, blank=True)
    report = models.JSONField(default=dict, blank=True, help_text="Full metrics report")
    output_dir = models.CharField(max_length=1000, blank=True)
    error = models.TextField(blank=True)
    created_at = models.DateTimeField(auto_now_add=True)
    updated_at = models.DateTimeField(auto_now=True)

    class Meta:
        ordering = ['-updated_at']

    def __str__(self):
        return self.label

    def mark_done(self, report, output_dir=''):
        self.status = self.Status.DONE
        self.item_count = report.total.n
        self.giou = float(report.giou)
        self.ciou = float(report.ciou)
        self.xiou = None if report.xiou is None else float(report.xiou)
        self.report = report.to_dict()
        self.output_dir = str(output_dir)
        self.error = ''
        self.save()

    def mark_failed(self, error):
        self.status = self.Status.FAILED
        self.error = str(error)
        self.save()
