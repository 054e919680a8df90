from django.contrib import admin

from .models import EvaluationRun


@admin.register(EvaluationRun)
class EvaluationRunAdmin(admin.ModelAdmin):
    """Browse benchmark runs and re-queue failed ones."""

    list_display = ['label', 'status', 'query_field', 'item_count', 'giou', 'ciou', 'xiou', 'updated_at']
    search_fields = ['label', 'manifest']
    readonly_fields = ['report', 'created_at', 'updated_at']
    list_filter = ['status', 'query_field', 'created_at']
    actions = ['requeue_runs']

    def requeue_runs(self, request, queryset):
        """Queue the selected runs again on the background cluster."""
        from .tasks import queue_evaluation

        count = 0
        for run in queryset:
            queue_evaluation(run)
            count += 1
        self.message_user(request, f"Queued {count} run(s).")

    requeue_runs.short_description = "Re-run selected evaluations"
