from django.db import models
from django.utils import timezone
import logging

logger = logging.getLogger(__name__)


class RunStatus(models.TextChoices):
    RUNNING = 'RUNNING', 'Running'
    COMPLETED = 'COMPLETED', 'Completed'
    FAILED = 'FAILED', 'Failed'


class RunManifest(models.Model):
    """One `nstep` invocation: what ran, with which profile and seed, and what it wrote."""
    subcommand = models.CharField(max_length=40)
    profile_name = models.CharField(max_length=100)
    profile_hash = models.CharField(max_length=64)
    seed = models.BigIntegerField()
    parameters = models.JSONField(default=dict, blank=True)
    output_dir = models.CharField(max_length=500)
    output_files = models.JSONField(default=list, blank=True)
    artifact_version = models.CharField(max_length=20)
    started_at = models.DateTimeField(default=timezone.now)
    finished_at = models.DateTimeField(null=True, blank=True)
    status = models.CharField(max_length=20, choices=RunStatus.choices, default=RunStatus.RUNNING)
    exit_code = models.IntegerField(null=True, blank=True)
    error = models.TextField(blank=True, default='')

    def __str__(self):
        return f"{self.subcommand} [{self.profile_name} seed={self.seed}] {self.status}"

    class Meta:
        ordering = ['-started_at']
        indexes = [
            models.Index(fields=['subcommand', 'status'], name='run_subcommand_status_idx'),
            models.Index(fields=['profile_hash', 'seed'], name='run_profile_seed_idx'),
        ]

    def complete(self, output_files):
        self.output_files = sorted(output_files)
        self.finished_at = timezone.now()
        self.status = RunStatus.COMPLETED
        self.exit_code = 0
        self.save(update_fields=['output_files', 'finished_at', 'status', 'exit_code'])

    def fail(self, exit_code: int, error: str):
        self.finished_at = timezone.now()
        self.status = RunStatus.FAILED
        self.exit_code = exit_code
        self.error = error
        self.save(update_fields=['finished_at', 'status', 'exit_code', 'error'])
        logger.error(f"Run {self.pk} ({self.subcommand}) failed with exit code {exit_code}: {error}")

    def to_dict(self, include_timing: bool = True) -> dict:
        data = {
            'subcommand': self.subcommand,
            'profile': self.profile_name,
            'profile_hash': self.profile_hash,
            'seed': self.seed,
            'parameters': self.parameters,
            'output_files': list(self.output_files),
            'artifact_version': self.artifact_version,
        }
        if include_timing:
            data['started_at'] = self.started_at.isoformat() if self.started_at else None
            data['finished_at'] = self.finished_at.isoformat() if self.finished_at else None
            data['status'] = self.status
        return data
