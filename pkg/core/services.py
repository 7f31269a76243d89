"""
Experiment runner behind the `nstep` command.

Each subcommand produces rows for `<subcommand>.csv` (units in the header),
a summary dict for `<subcommand>.summary.json` and optional side artifacts.
CSV content depends only on (profile, seed, parameters); wall-clock timing
goes to the summary and the manifest only.
"""
import csv
import json
import logging
import os
import time

import numpy as np
from celery import group
from django.conf import settings

from .attacks import (
    CandidateMeasurement, MemcmpAttack, Platform, generate_corpus, lbms_plan, online_evaluation, pss_plan,
    stepping_rate_experiment,
)
from .curves import generate_keypair, get_curve
from .enclave import mitigation_duration
from .exceptions import NStepError, UsageError
from .fingerprint import ClassifierModel, GroundTruthOracle, evaluate, train, write_corpus
from .func import derive_seed, stream, timings
from .hnp import (
    dump_signatures, e2e_truncation_attack, expected_reductions, hypergeometric_all_biased, lzb_attack,
)
from .interrupts import sample_arrivals
from .models import RunManifest
from .tasks import pss_config, run_lbms_batch, run_memcmp_candidate, run_pss_trial, run_subset_reduction
from .victims import LZB_COMMON, make_delta_victim, make_lzb_victim, make_memcmp_victim, make_truncation_victim

logger = logging.getLogger(__name__)

SUBCOMMANDS = (
    'calibrate', 'classify-eval', 'stepping-rate', 'pss-bench', 'lbms-bench', 'memcmp', 'ecdsa-trunc', 'lzb',
    'expected-reductions',
)

STREAMS = {name: index + 11 for index, name in enumerate(SUBCOMMANDS)}
TRAIN_STREAM = 97
CALIBRATION_DRAWS = 200_000


def collect(signatures):
    """Run task signatures as one group; results come back in submission order."""
    signatures = list(signatures)
    if not signatures:
        return []
    return group(signatures).apply_async().get()


def cell(value):
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return f'{value:.10g}'
    if value is None:
        return ''
    return str(value)


def report_rows(evaluation: str, report: dict):
    rows = []
    for label, scores in report['classes'].items():
        rows.append([evaluation, label, scores['precision'], scores['recall'], scores['f1'], scores['support']])
    return rows


class ExperimentRunner:
    """Runs one subcommand for a validated profile and records a RunManifest."""

    def __init__(self, profile, seed: int, output_dir: str = None, parameters: dict = None):
        self.profile = profile
        self.seed = int(seed)
        self.parameters = {key: value for key, value in (parameters or {}).items() if value is not None}
        self.output_dir = output_dir
        self.platform = Platform.from_profile(profile.data)
        self._classifiers = {}
        self.summary = None

    def resolve_output_dir(self, subcommand: str) -> str:
        if self.output_dir:
            return self.output_dir
        base = settings.NSTEP_OUTPUT_DIR
        return os.path.join(base, f'{subcommand}-{self.profile.name}-seed{self.seed}')

    def rng(self, subcommand: str, *path):
        return stream(self.seed, STREAMS[subcommand], *path)

    def run(self, subcommand: str) -> RunManifest:
        if subcommand not in SUBCOMMANDS:
            raise UsageError("unknown subcommand", subcommand=subcommand)
        out = self.resolve_output_dir(subcommand)
        try:
            os.makedirs(out, exist_ok=True)
        except OSError as e:
            raise UsageError("output directory is not writable", path=out, error=str(e))
        manifest = RunManifest.objects.create(
            subcommand=subcommand,
            profile_name=self.profile.name,
            profile_hash=self.profile.hash,
            seed=self.seed,
            parameters=self.parameters,
            output_dir=out,
            artifact_version=settings.NSTEP_ARTIFACT_VERSION,
        )
        logger.info(f"Run {manifest.pk}: {subcommand} profile={self.profile.name} seed={self.seed} -> {out}")
        timings.clear()
        started = time.perf_counter()
        handler = getattr(self, subcommand.replace('-', '_'))
        try:
            columns, rows, summary, artifacts = handler(out)
            files = [f'{subcommand}.csv', f'{subcommand}.summary.json', 'manifest.json', *artifacts]
            self.write_csv(os.path.join(out, f'{subcommand}.csv'), columns, rows)
            manifest.complete(files)
            summary['timing'] = {
                'elapsed_seconds': round(time.perf_counter() - started, 3),
                'operations': {name: round(value, 3) for name, value in timings.items()},
            }
            summary['profile_hash'] = self.profile.hash
            summary['seed'] = self.seed
            summary['manifest'] = manifest.to_dict()
            self.write_json(os.path.join(out, f'{subcommand}.summary.json'), summary)
            self.write_json(os.path.join(out, 'manifest.json'), manifest.to_dict())
            self.summary = summary
        except NStepError as e:
            manifest.fail(e.exit_code, str(e))
            raise
        except Exception as e:
            manifest.fail(1, str(e))
            raise
        logger.info(f"Run {manifest.pk} completed in {time.perf_counter() - started:.2f} seconds")
        return manifest

    @staticmethod
    def write_csv(path, columns, rows):
        with open(path, 'w', newline='') as handle:
            writer = csv.writer(handle, lineterminator='\n')
            writer.writerow(columns)
            for row in rows:
                writer.writerow([cell(value) for value in row])

    @staticmethod
    def write_json(path, data):
        with open(path, 'w') as handle:
            json.dump(data, handle, indent=2, sort_keys=True, default=str)
            handle.write('\n')

    # classifier

    def classifier(self, filler: str):
        """(classifier, model dict or None) for PSS runs over `filler`-dominated code."""
        if filler in self._classifiers:
            return self._classifiers[filler]
        model_path = self.parameters.get('model')
        if model_path:
            with open(model_path) as handle:
                data = json.load(handle)
            result = (ClassifierModel.from_dict(data), data)
        elif self.profile['pss']['classifier'] == 'oracle':
            result = (GroundTruthOracle(), None)
        else:
            model = self.train_model(filler, stream(self.seed, TRAIN_STREAM, sum(filler.encode())))
            result = (model, model.to_dict())
        self._classifiers[filler] = result
        return result

    def corpus(self, filler: str, rng):
        section = self.profile['fingerprint']
        plan = self.pss_plan()
        return generate_corpus(self.platform, plan, int(section['per_class']), rng, filler,
                               int(section['corpus_region_length']))

    def train_model(self, filler: str, rng, labeled=None) -> ClassifierModel:
        section = self.profile['fingerprint']
        labeled = labeled if labeled is not None else self.corpus(filler, rng)
        return train(
            labeled,
            n_trees=int(section['trees']),
            max_depth=int(section['max_depth']),
            seed=derive_seed(self.seed, TRAIN_STREAM, sum(filler.encode())),
            max_features=section['max_features'],
            min_samples_leaf=int(section['min_samples_leaf']),
            profile_hash=self.profile.hash,
        )

    def split(self, labeled, rng):
        order = rng.permutation(len(labeled))
        n_test = int(round(len(labeled) * float(self.profile['fingerprint']['test_fraction'])))
        test = [labeled[i] for i in order[:n_test]]
        training = [labeled[i] for i in order[n_test:]]
        return training, test

    def pss_plan(self):
        section = self.profile['pss']
        return pss_plan(self.platform, float(section['tail_mass']), float(section['fire_delay_offset']))

    # subcommands

    def calibrate(self, out):
        rng = self.rng('calibrate')
        platform = self.platform
        rows = []
        plans = [('pss', self.pss_plan(), float(self.profile['pss']['tail_mass']))]
        lbms = self.profile['lbms']
        for delta in lbms['deltas']:
            victim = make_delta_victim(delta, 0, lbms['filler'], platform.opcodes, int(lbms['base_length']))
            short = float(platform.compile(victim, {'guess': 0}).cycles_between())
            plans.append((f'lbms-delta-{delta}', lbms_plan(platform, short, float(lbms['epsilon'])),
                          float(lbms['epsilon'])))
        ecdsa = self.profile['ecdsa']
        truncation = platform.compile(make_truncation_victim(0, platform.opcodes, int(ecdsa['bias_bits'])))
        plans.append(('ecdsa-trunc', lbms_plan(platform, float(truncation.cycles_between()) / 2.0,
                                               float(ecdsa['epsilon'])), float(ecdsa['epsilon'])))
        lzb = self.profile['lzb']
        gadget = platform.compile(make_lzb_victim(1 << 159, platform.opcodes, int(lzb['leading_zeros'])))
        plans.append(('lzb', lbms_plan(platform, float(gadget.cycles_between(0, LZB_COMMON)),
                                       float(lzb['epsilon'])), float(lzb['epsilon'])))

        for index, (name, plan, target) in enumerate(plans):
            arrivals = sample_arrivals(platform.arrivals, plan, rng, CALIBRATION_DRAWS)
            if plan.lbms_lower_bound is None:
                bound = plan.mitigation_end
                empirical = float(np.mean(arrivals > bound))
            else:
                bound = plan.lbms_lower_bound
                empirical = float(np.mean(arrivals < bound))
            rows.append([name, plan.mode.value, bound, plan.fire_delay,
                         platform.arrivals.mean_offset + plan.fire_delay, target, empirical])
        summary = {
            'mitigation_end': {
                'r0_uncached': float(mitigation_duration(self.platform.mitigation, 0, False)),
                'r1_uncached': float(mitigation_duration(self.platform.mitigation, 1, False)),
                'r0_cached': float(mitigation_duration(self.platform.mitigation, 0, True)),
                'r1_cached': float(mitigation_duration(self.platform.mitigation, 1, True)),
            },
            'plans': {row[0]: {'fire_delay': row[3], 'empirical_rate': row[6]} for row in rows},
        }
        columns = ['plan', 'mode', 'bound[cycles]', 'fire_delay[cycles]', 'mean_arrival[cycles]',
                   'target_rate[probability]', 'empirical_rate[probability]']
        return columns, rows, summary, []

    def classify_eval(self, out):
        section = self.profile['fingerprint']
        rng = self.rng('classify-eval')
        primary = section['corpus_filler']
        labeled = self.corpus(primary, rng)
        write_corpus(os.path.join(out, 'corpus.csv'), labeled)
        training, test = self.split(labeled, rng)
        model = self.train_model(primary, rng, training)
        with open(os.path.join(out, 'classifier.json'), 'w') as handle:
            json.dump(model.to_dict(), handle, sort_keys=True)
        holdout = evaluate(model, test)
        online = online_evaluation(self.platform, model, self.pss_plan(), int(section['online_interrupts']), rng,
                                   primary, int(section['corpus_region_length']))

        transfer_filler = section['transfer_filler']
        other = self.corpus(transfer_filler, rng)
        other_training, other_test = self.split(other, rng)
        transfer = evaluate(model, other_test)
        retrained = evaluate(self.train_model(transfer_filler, rng, other_training), other_test)

        rows = (report_rows('holdout', holdout) + report_rows('online', online)
                + report_rows(f'transfer-{primary}-to-{transfer_filler}', transfer)
                + report_rows(f'retrained-{transfer_filler}', retrained))
        summary = {
            'holdout': holdout,
            'online': online,
            'transfer': transfer,
            'retrained': retrained,
            'corpus': {'filler': primary, 'traces': len(labeled), 'test': len(test)},
        }
        columns = ['evaluation', 'class', 'precision[fraction]', 'recall[fraction]', 'f1[fraction]',
                   'support[count]']
        return columns, rows, summary, ['corpus.csv', 'classifier.json']

    def stepping_rate(self, out):
        section = self.profile['stepping']
        interrupts = int(self.parameters.get('interrupts', section['interrupts']))
        rows, summary = [], {}
        for index, filler in enumerate(section['fillers']):
            classifier, _ = self.classifier(filler)
            stats = stepping_rate_experiment(self.platform, filler, classifier, self.pss_plan(), interrupts,
                                             self.rng('stepping-rate', index), int(section['region_length']))
            for steps in sorted(stats.step_histogram):
                rows.append([filler, steps, stats.step_histogram[steps], stats.share(steps)])
            summary[filler] = {
                'fired': stats.fired,
                'mitigation_share': stats.mitigation_share,
                'zero_steps': stats.zero_steps,
                'step_interrupts': stats.step_interrupts,
                'single_step_share': stats.single_step_share,
                'mode': stats.mode,
                'false_positives': dict(stats.false_positives),
                'nop_slide_landings': stats.nop_slide_landings,
                'nop_slide_as_mitigation': stats.nop_slide_as_mitigation,
            }
        columns = ['filler', 'steps[instructions]', 'interrupts[count]', 'share[fraction]']
        return columns, rows, summary, []

    def pss_bench(self, out):
        section = self.profile['pss']
        _, model_data = self.classifier(section['filler'])
        deltas = self.parameters.get('deltas') or section['deltas']
        trials = int(self.parameters.get('trials', section['trials']))
        profile_data = self.profile_data(pss={'samples_per_guess': int(
            self.parameters.get('samples', section['samples_per_guess']))})
        seed = derive_seed(self.seed, STREAMS['pss-bench'])
        results = collect(
            run_pss_trial.s(profile_data, model_data, seed, int(delta), trial)
            for delta in deltas for trial in range(trials)
        )
        rows = [[r['delta'], r['trial'], r['secret'], r['predicted'], r['success'], r['mean_count_0'],
                 r['mean_count_1'], r['interrupts']] for r in results]
        summary = {'success_rate': {}, 'interrupts': {}}
        for delta in deltas:
            mine = [r for r in results if r['delta'] == int(delta)]
            summary['success_rate'][str(delta)] = sum(r['success'] for r in mine) / len(mine)
            summary['interrupts'][str(delta)] = sum(r['interrupts'] for r in mine)
        columns = ['delta[instructions]', 'trial', 'secret', 'predicted', 'success', 'mean_count_0[steps]',
                   'mean_count_1[steps]', 'interrupts[count]']
        return columns, rows, summary, []

    def lbms_bench(self, out):
        section = self.profile['lbms']
        deltas = self.parameters.get('deltas') or section['deltas']
        runs = int(self.parameters.get('runs', section['runs']))
        traces = int(self.parameters.get('traces', section['traces']))
        profile_data = self.profile_data(lbms={'traces': traces})
        seed = derive_seed(self.seed, STREAMS['lbms-bench'])
        results = collect(run_lbms_batch.s(profile_data, seed, int(delta), run)
                          for delta in deltas for run in range(runs))
        rows, summary = [], {}
        for delta in deltas:
            mine = [r for r in results if r['delta'] == int(delta)]
            per_1000 = np.array([1000.0 * r['detections'] / r['traces'] for r in mine])
            short = np.array([1000.0 * r['short_branch_detections'] / r['traces'] for r in mine])
            rows.append([int(delta), len(mine), traces, float(per_1000.mean()), float(per_1000.std()),
                         float(short.mean()), mine[0]['short_branch_cycles'], mine[0]['fire_delay']])
            summary[str(delta)] = {'detections_per_1000': float(per_1000.mean()),
                                   'short_branch_per_1000': float(short.mean())}
        columns = ['delta[instructions]', 'runs[count]', 'traces_per_run[count]', 'detections_per_1000[count]',
                   'detections_std[count]', 'short_branch_per_1000[count]', 'short_branch[cycles]',
                   'fire_delay[cycles]']
        return columns, rows, summary, []

    def memcmp(self, out):
        section = self.profile['memcmp']
        secret = self.parameters.get('secret', section['secret'])
        samples = int(self.parameters.get('samples', section['samples']))
        classifier, model_data = self.classifier(section['classifier_filler'])
        profile_data = self.profile_data(pss={'samples_per_guess': samples})
        platform = self.platform
        victim = make_memcmp_victim(secret, platform.opcodes, section['charset'], int(section['max_length']))
        plan = self.pss_plan()
        cfg = pss_config(profile_data, platform, classifier, plan)
        seed = derive_seed(self.seed, STREAMS['memcmp'])

        def dispatch(jobs):
            results = collect(
                run_memcmp_candidate.s(profile_data, model_data, plan.to_dict(), seed, secret, *job)
                for job in jobs
            )
            return [CandidateMeasurement.from_dict(result) for result in results]

        attack = MemcmpAttack(victim, cfg, platform, seed, section['charset'], int(section['max_length']),
                              dispatch=dispatch)
        result = attack.run()
        rows = [['length', length, mean] for length, mean in sorted(result.length_means.items())]
        for position, means in enumerate(result.character_means):
            rows.extend([f'position-{position}', char, mean] for char, mean in sorted(means.items()))
        summary = {
            'recovered': result.recovered,
            'correct': result.recovered == secret,
            'interrupts': result.interrupts,
            'dss_interrupts': result.dss_interrupts,
            'ambiguous_positions': result.ambiguous_positions,
            'samples': samples,
        }
        logger.info(f"memcmp recovered {result.recovered!r} with {result.interrupts} interrupts")
        return ['phase', 'candidate', 'mean_count[steps]'], rows, summary, []

    def ecdsa_settings(self) -> dict:
        section = dict(self.profile['ecdsa'])
        natural = section.pop('natural')
        mode = self.parameters.get('mode', section['mode'])
        section['mode'] = mode
        if mode == 'natural':
            section.update(natural)
        if 'signatures' in self.parameters:
            section['signature_budget'] = int(self.parameters['signatures'])
        return section

    def reduction_dispatch(self, curve, pub, lll_delta, block2_passes):
        pub_hex = [hex(value) for value in pub]

        def dispatch(signature_sets, bias):
            results = collect(
                run_subset_reduction.s([sig.to_dict() for sig in sigs], bias.to_dict(), curve.name, pub_hex,
                                       str(lll_delta), int(block2_passes))
                for sigs in signature_sets
            )
            return [int(result, 16) if result is not None else None for result in results]

        return dispatch

    def ecdsa_trunc(self, out):
        settings_ = self.ecdsa_settings()
        curve = get_curve(settings_['curve'])
        rng = self.rng('ecdsa-trunc')
        keypair = generate_keypair(curve, rng)
        dispatch = self.reduction_dispatch(curve, keypair.pub, settings_['lll_delta'], settings_['block2_passes'])
        report = e2e_truncation_attack(self.platform, curve, keypair, settings_, rng, dispatch,
                                       int(self.parameters.get('batch', 1)))
        dump_signatures(os.path.join(out, 'flagged.jsonl'), report.flagged_signatures)
        rows = [[settings_['mode'], report.signatures, report.flagged, report.true_positives,
                 report.false_positives, report.interrupts, report.reductions, report.expected_reductions,
                 report.reduction_budget, report.verified]]
        summary = {
            'mode': settings_['mode'],
            'key': hex(report.key),
            'verified': report.verified,
            'signatures': report.signatures,
            'flagged': report.flagged,
            'true_positives': report.true_positives,
            'false_positives': report.false_positives,
            'interrupts': report.interrupts,
            'reductions': report.reductions,
            'reductions_per_second': report.reductions_per_second,
            'expected_reductions': report.expected_reductions,
            'reduction_budget': report.reduction_budget,
            'short_branch_cycles': report.short_branch_cycles,
            'plan': report.plan,
        }
        logger.info(f"ecdsa-trunc recovered key {hex(report.key)} after {report.reductions} reductions")
        columns = ['mode', 'signatures[count]', 'flagged[count]', 'true_positives[count]', 'false_positives[count]',
                   'interrupts[count]', 'reductions[count]', 'expected_reductions[count]',
                   'reduction_budget[count]', 'verified']
        return columns, rows, summary, ['flagged.jsonl']

    def lzb(self, out):
        section = dict(self.profile['lzb'])
        if 'signatures' in self.parameters:
            section['signatures'] = int(self.parameters['signatures'])
        curve = get_curve(self.profile['ecdsa']['curve'])
        rng = self.rng('lzb')
        keypair = generate_keypair(curve, rng)
        report = lzb_attack(self.platform, curve, keypair, section, rng)
        rows = [[row['signature'], row['tsc_delta'], row['kept'], row['biased'], row['call_landing']]
                for row in report.rows]
        summary = {
            'signatures': report.signatures,
            'detected': report.detected,
            'kept': report.kept,
            'true_positives': report.true_positives,
            'false_positives': report.false_positives,
            'tp_rate': report.tp_rate,
            'call_landings': report.call_landings,
            'call_landings_removed': report.call_landings_removed,
            'baseline_cycles': report.baseline_cycles,
            'threshold_cycles': report.threshold_cycles,
            'expected_reductions': report.expected_reductions,
            'recovered_key': hex(report.recovered_key) if report.recovered_key is not None else None,
            'recovery_m': report.recovery_m,
        }
        columns = ['signature', 'tsc_delta[cycles]', 'kept', 'biased', 'call_landing']
        return columns, rows, summary, []

    def expected_reductions(self, out):
        section = self.profile['expected_reductions']
        flagged = int(self.parameters.get('flagged', section['flagged']))
        subset_size = int(self.parameters.get('subset_size', section['subset_size']))
        tp_rates = self.parameters.get('tp_rates') or section['tp_rates']
        rows = [[flagged, float(tp), subset_size, expected_reductions(flagged, float(tp), subset_size), 'closed_form']
                for tp in tp_rates]
        mc = section['monte_carlo']
        biased = round(float(mc['tp_rate']) * int(mc['flagged']))
        probability = hypergeometric_all_biased(int(mc['flagged']), biased, int(mc['subset_size']),
                                                int(mc['draws']), self.rng('expected-reductions'))
        closed = expected_reductions(int(mc['flagged']), float(mc['tp_rate']), int(mc['subset_size']))
        rows.append([int(mc['flagged']), float(mc['tp_rate']), int(mc['subset_size']), closed, 'closed_form'])
        rows.append([int(mc['flagged']), float(mc['tp_rate']), int(mc['subset_size']),
                     1.0 / probability if probability else float('inf'), 'monte_carlo'])
        summary = {
            'closed_form': {str(row[1]): row[3] for row in rows[:len(tp_rates)]},
            'monte_carlo': {'draws': int(mc['draws']), 'all_biased_probability': probability,
                            'closed_form': closed},
        }
        columns = ['flagged[count]', 'tp_rate[fraction]', 'subset_size[count]', 'expected_reductions[count]',
                   'method']
        return columns, rows, summary, []

    def profile_data(self, **overrides) -> dict:
        """Profile dict for task payloads with per-run section overrides applied."""
        data = json.loads(json.dumps(self.profile.data))
        for section, values in overrides.items():
            data[section].update(values)
        return data
