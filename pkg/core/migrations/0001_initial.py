# Generated by Django 5.2 on 2026-10-19 09:00

import django.utils.timezone
from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='RunManifest',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('subcommand', models.CharField(max_length=40)),
                ('profile_name', models.CharField(max_length=100)),
                ('profile_hash', models.CharField(max_length=64)),
                ('seed', models.BigIntegerField()),
                ('parameters', models.JSONField(blank=True, default=dict)),
                ('output_dir', models.CharField(max_length=500)),
                ('output_files', models.JSONField(blank=True, default=list)),
                ('artifact_version', models.CharField(max_length=20)),
                ('started_at', models.DateTimeField(default=django.utils.timezone.now)),
                ('finished_at', models.DateTimeField(blank=True, null=True)),
                ('status', models.CharField(choices=[('RUNNING', 'Running'), ('COMPLETED', 'Completed'), ('FAILED', 'Failed')], default='RUNNING', max_length=20)),
                ('exit_code', models.IntegerField(blank=True, null=True)),
                ('error', models.TextField(blank=True, default='')),
            ],
            options={
                'ordering': ['-started_at'],
                'indexes': [models.Index(fields=['subcommand', 'status'], name='run_subcommand_status_idx'), models.Index(fields=['profile_hash', 'seed'], name='run_profile_seed_idx')],
            },
        ),
    ]
