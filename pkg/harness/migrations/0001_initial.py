# Generated by Django 6.0 on 2026-10-18 09:12

from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='EvaluationRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('label', models.CharField(help_text='Descriptive name for this run', max_length=200)),
                ('manifest', models.CharField(help_text='Path of the dataset manifest', max_length=1000)),
                ('query_field', models.CharField(choices=[('short', 'Short (class label)'), ('long', 'Long (definition query)')], default='long', max_length=10)),
                ('status', models.CharField(choices=[('queued', 'Queued'), ('running', 'Running'), ('done', 'Done'), ('failed', 'Failed')], default='queued', max_length=10)),
                ('options', models.JSONField(blank=True, default=dict, help_text='Backend and engine options for the run')),
                ('item_count', models.PositiveIntegerField(default=0)),
                ('giou', models.FloatField(blank=True, null=True)),
                ('ciou', models.FloatField(blank=True, null=True)),
                ('xiou', models.FloatField(blank=True, null=True)),
                ('report', models.JSONField(blank=True, default=dict, help_text='Full metrics report')),
                ('output_dir', models.CharField(blank=True, max_length=1000)),
                ('error', models.TextField(blank=True)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('updated_at', models.DateTimeField(auto_now=True)),
            ],
            options={
                'ordering': ['-updated_at'],
            },
        ),
    ]
