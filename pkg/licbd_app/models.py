from django.db import models
from django.utils import timezone


class ExperimentRun(models.Model):
    """One invocation of an experiment subcommand"""

    SUBCOMMAND_CHOICES = [
        ('train-vanilla', 'Train Vanilla Codecs'),
        ('attack', 'Stage 1 Backdoor Injection'),
        ('harden', 'Stage 2 Robust Finetuning'),
        ('sensitivity', 'Sensitivity Map'),
        ('eval', 'Evaluation'),
        ('resist', 'Resistance Sweep'),
        ('defend', 'Defense Evaluation'),
        ('report', 'Report'),
        ('synth-shapes', 'Synthetic Shapes Corpus'),
        ('train-downstream', 'Toy Downstream Models'),
    ]

    STATUS_CHOICES = [
        ('running', 'Running'),
        ('completed', 'Completed'),
        ('failed', 'Failed'),
    ]

    subcommand = models.CharField(max_length=30, choices=SUBCOMMAND_CHOICES)
    output_dir = models.CharField(max_length=500)
    config_digest = models.CharField(max_length=64, db_index=True)
    seed = models.IntegerField(default=0)
    device = models.CharField(max_length=30, default='cpu')
    status = models.CharField(max_length=20, choices=STATUS_CHOICES, default='running')
    error = models.TextField(blank=True, default='')
    summary = models.JSONField(default=dict, blank=True)

    started_at = models.DateTimeField(auto_now_add=True)
    finished_at = models.DateTimeField(null=True, blank=True)

    class Meta:
        db_table = 'experiment_runs'
        ordering = ['-started_at']
        indexes = [
            models.Index(fields=['subcommand', '-started_at'], name='exp_runs_subcmd_started_idx'),
            models.Index(fields=['status'], name='exp_runs_status_idx'),
        ]

    def __str__(self):
        return f"{self.subcommand} [{self.get_status_display()}] {self.output_dir}"

    @classmethod
    def start(cls, subcommand, config, output_dir):
        """Open a run record for a validated ExperimentConfig"""
        return cls.objects.create(
            subcommand=subcommand,
            output_dir=str(output_dir),
            config_digest=config.digest(),
            seed=config.seed,
            device=config.device,
        )

    def complete(self, summary=None):
        self.status = 'completed'
        self.summary = summary or {}
        self.finished_at = timezone.now()
        self.save(update_fields=['status', 'summary', 'finished_at'])

    def fail(self, exc):
        self.status = 'failed'
        self.error = f'{type(exc).__name__}: {exc}'
        self.finished_at = timezone.now()
        self.save(update_fields=['status', 'error', 'finished_at'])

    @property
    def duration(self):
        if self.finished_at is None:
            return None
        return self.finished_at - self.started_at


class ReportEntry(models.Model):
    """A row of a report CSV (model, quality, attack, preproc, degree, metric, value)"""

    run = models.ForeignKey(ExperimentRun, on_delete=models.CASCADE, related_name='report_entries')
    model = models.CharField(max_length=100)
    quality = models.FloatField(null=True, blank=True)
    attack = models.CharField(max_length=100)
    preproc = models.CharField(max_length=50)
    degree = models.FloatField(default=0.0)
    metric = models.CharField(max_length=50)
    value = models.FloatField(null=True, blank=True)

    class Meta:
        db_table = 'report_entries'
        ordering = ['id']
        indexes = [
            models.Index(fields=['run', 'metric'], name='report_entries_run_metric_idx'),
        ]

    def __str__(self):
        return f"{self.model} {self.attack} {self.preproc}({self.degree}) {self.metric}={self.value}"

    @staticmethod
    def _number(value):
        try:
            return float(value)
        except (TypeError, ValueError):
            return None

    @classmethod
    def bulk_record(cls, run, rows):
        """Store report rows; non-numeric qualities (the mR rows) are kept as NULL"""
        entries = [
            cls(
                run=run,
                model=str(row['model']),
                quality=cls._number(row['quality']),
                attack=str(row['attack']),
                preproc=str(row['preproc']),
                degree=cls._number(row['degree']) or 0.0,
                metric=str(row['metric']),
                value=cls._number(row['value']),
            )
            for row in rows
        ]
        return cls.objects.bulk_create(entries)


class RunEvent(models.Model):
    """Audit trail of experiment activity"""

    ACTION_CHOICES = [
        ('run_started', 'Run Started'),
        ('run_completed', 'Run Completed'),
        ('run_failed', 'Run Failed'),
        ('config_frozen', 'Config Frozen'),
        ('checkpoint_saved', 'Checkpoint Saved'),
        ('report_written', 'Report Written'),
    ]

    SEVERITY_CHOICES = [
        ('info', 'Info'),
        ('warning', 'Warning'),
        ('error', 'Error'),
    ]

    run = models.ForeignKey(
        ExperimentRun,
        on_delete=models.CASCADE,
        null=True,
        blank=True,
        related_name='events'
    )
    action = models.CharField(max_length=50, choices=ACTION_CHOICES)
    severity = models.CharField(max_length=10, choices=SEVERITY_CHOICES, default='info')
    description = models.TextField()
    extra_data = models.JSONField(default=dict, blank=True)
    timestamp = models.DateTimeField(auto_now_add=True, db_index=True)

    class Meta:
        db_table = 'run_events'
        ordering = ['-timestamp']
        indexes = [
            models.Index(fields=['action', '-timestamp'], name='run_events_action_ts_idx'),
        ]

    def __str__(self):
        return f"{self.timestamp.strftime('%Y-%m-%d %H:%M:%S')} - {self.get_action_display()}"

    @classmethod
    def log(cls, action, run=None, description='', severity='info', **extra_data):
        """
        Create an event entry

        Usage:
            RunEvent.log('checkpoint_saved', run=run, description='attacked_q0.pt', path=str(path))
        """
        return cls.objects.create(
            run=run,
            action=action,
            severity=severity,
            description=description,
            extra_data=extra_data,
        )
