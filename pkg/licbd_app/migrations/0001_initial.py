# Generated by Django 5.2.7 on 2026-10-18 09:12

import django.db.models.deletion
from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='ExperimentRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('subcommand', models.CharField(choices=[('train-vanilla', 'Train Vanilla Codecs'), ('attack', 'Stage 1 Backdoor Injection'), ('harden', 'Stage 2 Robust Finetuning'), ('sensitivity', 'Sensitivity Map'), ('eval', 'Evaluation'), ('resist', 'Resistance Sweep'), ('defend', 'Defense Evaluation'), ('report', 'Report'), ('synth-shapes', 'Synthetic Shapes Corpus'), ('train-downstream', 'Toy Downstream Models')], max_length=30)),
                ('output_dir', models.CharField(max_length=500)),
                ('config_digest', models.CharField(db_index=True, max_length=64)),
                ('seed', models.IntegerField(default=0)),
                ('device', models.CharField(default='cpu', max_length=30)),
                ('status', models.CharField(choices=[('running', 'Running'), ('completed', 'Completed'), ('failed', 'Failed')], default='running', max_length=20)),
                ('error', models.TextField(blank=True, default='')),
                ('summary', models.JSONField(blank=True, default=dict)),
                ('started_at', models.DateTimeField(auto_now_add=True)),
                ('finished_at', models.DateTimeField(blank=True, null=True)),
            ],
            options={
                'db_table': 'experiment_runs',
                'ordering': ['-started_at'],
                'indexes': [models.Index(fields=['subcommand', '-started_at'], name='exp_runs_subcmd_started_idx'), models.Index(fields=['status'], name='exp_runs_status_idx')],
            },
        ),
        migrations.CreateModel(
            name='ReportEntry',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('model', models.CharField(max_length=100)),
                ('quality', models.FloatField(blank=True, null=True)),
                ('attack', models.CharField(max_length=100)),
                ('preproc', models.CharField(max_length=50)),
                ('degree', models.FloatField(default=0.0)),
                ('metric', models.CharField(max_length=50)),
                ('value', models.FloatField(blank=True, null=True)),
                ('run', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='report_entries', to='licbd_app.experimentrun')),
            ],
            options={
                'db_table': 'report_entries',
                'ordering': ['id'],
                'indexes': [models.Index(fields=['run', 'metric'], name='report_entries_run_metric_idx')],
            },
        ),
        migrations.CreateModel(
            name='RunEvent',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('action', models.CharField(choices=[('run_started', 'Run Started'), ('run_completed', 'Run Completed'), ('run_failed', 'Run Failed'), ('config_frozen', 'Config Frozen'), ('checkpoint_saved', 'Checkpoint Saved'), ('report_written', 'Report Written')], max_length=50)),
                ('severity', models.CharField(choices=[('info', 'Info'), ('warning', 'Warning'), ('error', 'Error')], default='info', max_length=10)),
                ('description', models.TextField()),
                ('extra_data', models.JSONField(blank=True, default=dict)),
                ('timestamp', models.DateTimeField(auto_now_add=True, db_index=True)),
                ('run', models.ForeignKey(blank=True, null=True, on_delete=django.db.models.deletion.CASCADE, related_name='events', to='licbd_app.experimentrun')),
            ],
            options={
                'db_table': 'run_events',
                'ordering': ['-timestamp'],
                'indexes': [models.Index(fields=['action', '-timestamp'], name='run_events_action_ts_idx')],
            },
        ),
    ]
