from django.core.management.base import BaseCommand, CommandError
from core.exceptions import NStepError
from core.profiles import load_profile
from core.services import ExperimentRunner
import logging

logger = logging.getLogger(__name__)

# subcommand -> summary keys echoed to stdout
HIGHLIGHTS = {
    'calibrate': ('mitigation_end',),
    'classify-eval': ('corpus',),
    'stepping-rate': (),
    'pss-bench': ('success_rate',),
    'lbms-bench': (),
    'memcmp': ('recovered', 'correct', 'interrupts', 'dss_interrupts'),
    'ecdsa-trunc': ('key', 'verified', 'signatures', 'flagged', 'reductions'),
    'lzb': ('kept', 'tp_rate', 'expected_reductions', 'recovered_key'),
    'expected-reductions': ('closed_form',),
}

PARAMETERS = (
    'model', 'interrupts', 'deltas', 'trials', 'samples', 'runs', 'traces', 'secret', 'mode', 'signatures',
    'batch', 'flagged', 'tp_rates', 'subset_size',
)


def int_list(value):
    return [int(item) for item in value.split(',') if item.strip()]


def float_list(value):
    return [float(item) for item in value.split(',') if item.strip()]


class Command(BaseCommand):
    help = 'Run one simulator or attack experiment and write CSV, summary JSON and a run manifest'

    def add_arguments(self, parser):
        parser.add_argument(
            '--profile',
            default=None,
            help='Preset name (paper-like, noiseless, fast) or path to a YAML profile',
        )
        parser.add_argument(
            '--seed',
            type=int,
            default=0,
            help='Root seed; every trial derives its own stream from it (default: 0)',
        )
        parser.add_argument(
            '--out',
            default=None,
            help='Output directory (default: NSTEP_OUTPUT_DIR/<subcommand>-<profile>-seed<seed>)',
        )
        subparsers = parser.add_subparsers(dest='subcommand', required=True)

        subparsers.add_parser('calibrate', help='IPI fire delays and their empirical tail rates')
        subparsers.add_parser('classify-eval', help='Train and evaluate the interrupt classifier')

        stepping = subparsers.add_parser('stepping-rate', help='Step histogram of Step-classified interrupts')
        stepping.add_argument('--interrupts', type=int, help='Interrupts fired per filler')
        stepping.add_argument('--model', help='Classifier model JSON to use instead of training one')

        pss = subparsers.add_parser('pss-bench', help='PSS success rate per branch delta')
        pss.add_argument('--deltas', type=int_list, help='Comma-separated branch deltas')
        pss.add_argument('--trials', type=int, help='Trials per delta')
        pss.add_argument('--samples', type=int, help='Traces per guess')
        pss.add_argument('--model', help='Classifier model JSON to use instead of training one')

        lbms = subparsers.add_parser('lbms-bench', help='LBMS detections per 1000 longer-branch traces')
        lbms.add_argument('--deltas', type=int_list, help='Comma-separated branch deltas')
        lbms.add_argument('--runs', type=int, help='Runs averaged per delta')
        lbms.add_argument('--traces', type=int, help='Longer-branch traces per run')

        memcmp = subparsers.add_parser('memcmp', help='Recover a memcmp secret with PSS')
        memcmp.add_argument('--secret', help='Secret held by the simulated enclave (A-Z, up to 8 characters)')
        memcmp.add_argument('--samples', type=int, help='Traces per candidate')
        memcmp.add_argument('--model', help='Classifier model JSON to use instead of training one')

        trunc = subparsers.add_parser('ecdsa-trunc', help='End-to-end nonce truncation attack on ECDSA')
        trunc.add_argument('--mode', choices=['forced', 'natural'], help='Nonce bias mode')
        trunc.add_argument('--signatures', type=int, help='Signature budget')
        trunc.add_argument('--batch', type=int, help='Subset reductions dispatched per group')

        lzb = subparsers.add_parser('lzb', help='Leading-zero-bit detection with the call-landing filter')
        lzb.add_argument('--signatures', type=int, help='Signatures to collect')

        reductions = subparsers.add_parser('expected-reductions', help='Expected lattice reductions for subset search')
        reductions.add_argument('--flagged', type=int, help='Flagged signature count')
        reductions.add_argument('--tp-rates', dest='tp_rates', type=float_list, help='Comma-separated TP rates')
        reductions.add_argument('--subset-size', dest='subset_size', type=int, help='Signatures per reduction')

    def handle(self, *args, **options):
        subcommand = options['subcommand']
        parameters = {key: options[key] for key in PARAMETERS if options.get(key) is not None}
        try:
            profile = load_profile(options['profile'])
            runner = ExperimentRunner(profile, options['seed'], options['out'], parameters)
            manifest = runner.run(subcommand)
        except NStepError as e:
            logger.error(f"nstep {subcommand} failed: {str(e)}")
            raise CommandError(str(e), returncode=e.exit_code)

        self.stdout.write(self.style.SUCCESS(
            f"{subcommand} finished [{profile.name} {profile.hash[:12]} seed={manifest.seed}] -> {manifest.output_dir}"
        ))
        for key in HIGHLIGHTS.get(subcommand, ()):
            self.stdout.write(f"  {key}: {runner.summary.get(key)}")
