"""
Shipped-calibration bands at reduced sizes.

Each test runs the paper-like profile with fixed seeds and fewer traces than
the full `nstep` runs; shares measured on a sample allow three binomial
standard errors around their band.
"""
import json
import os
import tempfile
from io import StringIO

import numpy as np
from django.core.management import call_command
from django.test import SimpleTestCase, TestCase

from core.attacks import (
    LbmsConfig, Platform, PssConfig, lbms_detect, lbms_plan, lbms_trace, memcmp_attack, oracle_classifier, pss_plan,
    stepping_rate_experiment,
)
from core.profiles import load_profile
from core.tasks import run_pss_trial
from core.victims import make_delta_victim, make_memcmp_victim


def shipped():
    profile = load_profile('paper-like').data
    return profile, Platform.from_profile(profile)


class BandMixin:
    def assertShareInBand(self, count, total, low, high):
        share = count / total
        slack = 3 * np.sqrt(share * (1 - share) / total)
        self.assertGreaterEqual(share, low - slack, f'{count}/{total} below [{low}, {high}]')
        self.assertLessEqual(share, high + slack, f'{count}/{total} above [{low}, {high}]')


class LbmsTrendTest(SimpleTestCase):
    TRACES = 4000

    def test_detections_grow_with_delta(self):
        profile, platform = shipped()
        section = profile['lbms']
        base_length = int(section['base_length'])

        def compiled(delta, guess):
            victim = make_delta_victim(delta, 0, section['filler'], platform.opcodes, base_length)
            return platform.compile(victim, {'guess': guess})

        short_path = compiled(2, 0)
        cfg = LbmsConfig(plan=lbms_plan(platform, float(short_path.cycles_between()), float(section['epsilon'])))

        def detected(path, name):
            # trace i replays the same arrival for every delta
            return {
                index for index in range(self.TRACES)
                if lbms_detect(lbms_trace(path, platform, cfg, np.random.default_rng([17, index]), f'{name}-{index}'),
                               cfg)
            }

        short = detected(short_path, 'short')
        previous = short
        counts = []
        for delta in section['deltas']:
            hits = detected(compiled(delta, 1), f'long-{delta}')
            self.assertLessEqual(previous, hits)
            counts.append(len(hits))
            previous = hits

        self.assertEqual(counts, sorted(set(counts)))
        self.assertLessEqual(counts[0], 0.15 * self.TRACES)
        self.assertGreaterEqual(counts[-1], 0.995 * self.TRACES)
        self.assertLessEqual(len(short), 0.005 * self.TRACES)


class PssSuccessTest(SimpleTestCase):
    TRIALS = 30

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        profile, _ = shipped()
        cls.deltas = profile['pss']['deltas']
        cls.results = {
            delta: [run_pss_trial(profile, None, 23, delta, trial) for trial in range(cls.TRIALS)]
            for delta in cls.deltas
        }

    def success(self, delta):
        return np.mean([r['success'] for r in self.results[delta]])

    def count_gap(self, delta):
        return np.mean([r[f"mean_count_{1 - r['secret']}"] - r[f"mean_count_{r['secret']}"]
                        for r in self.results[delta]])

    def test_success_ordering(self):
        self.assertEqual(self.deltas, [1, 3, 6])
        self.assertGreaterEqual(self.success(6), 0.9)
        self.assertGreaterEqual(self.success(6), self.success(3))
        self.assertGreaterEqual(self.success(3), self.success(1))
        self.assertGreater(self.success(6), self.success(1))
        self.assertGreater(self.success(1), 0.5)

    def test_longer_branch_gap_grows_with_delta(self):
        gaps = [self.count_gap(delta) for delta in self.deltas]
        self.assertGreater(gaps[0], 0.0)
        self.assertLess(gaps[0], gaps[1])
        self.assertLess(gaps[1], gaps[2])


class SteppingShapeTest(BandMixin, SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        profile, platform = shipped()
        section = profile['stepping']
        plan = pss_plan(platform, float(profile['pss']['tail_mass']))
        cls.stats = {
            filler: stepping_rate_experiment(platform, filler, oracle_classifier(), plan, int(section['interrupts']),
                                             np.random.default_rng([29, index]), int(section['region_length']))
            for index, filler in enumerate(section['fillers'])
        }

    def test_addl_single_steps(self):
        stats = self.stats['addl']
        self.assertEqual(stats.mode, 1)
        self.assertShareInBand(stats.step_histogram[1], stats.step_interrupts, 0.30, 0.60)

    def test_nop_steps_in_pairs(self):
        stats = self.stats['nop']
        self.assertEqual(stats.step_histogram[1], 0)
        self.assertEqual(stats.mode, 2)
        self.assertShareInBand(stats.step_histogram[2], stats.step_interrupts, 0.15, 0.35)
        self.assertShareInBand(stats.mitigation_landings, stats.fired, 0.85, 0.95)


class MemcmpRecoveryTest(SimpleTestCase):
    def test_recovers_six_characters(self):
        _, platform = shipped()
        charset = 'CERST'
        victim = make_memcmp_victim('SECRET', platform.opcodes, charset, 6)
        cfg = PssConfig(classifier=oracle_classifier(), plan=pss_plan(platform, 0.1), samples_per_guess=20)
        result = memcmp_attack(victim, cfg, platform, 31, charset, 6)
        self.assertEqual(result.recovered, 'SECRET')
        self.assertEqual(max(result.length_means, key=result.length_means.get), 6)


class ClassifierQualityTest(TestCase):
    PROFILE = (
        'extends: paper-like\n'
        'name: paper-like-reduced\n'
        'fingerprint:\n'
        '  per_class: 1000\n'
        '  trees: 15\n'
        '  max_depth: 10\n'
        '  online_interrupts: 4000\n'
    )

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = tempfile.TemporaryDirectory()
        path = os.path.join(cls.tmp.name, 'reduced.yaml')
        with open(path, 'w') as handle:
            handle.write(cls.PROFILE)
        out = os.path.join(cls.tmp.name, 'classify')
        call_command('nstep', '--profile', path, '--seed', '5', '--out', out, 'classify-eval', stdout=StringIO())
        with open(os.path.join(out, 'classify-eval.summary.json')) as handle:
            cls.summary = json.load(handle)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()
        super().tearDownClass()

    def test_holdout_f1(self):
        for label, scores in self.summary['holdout']['classes'].items():
            self.assertGreaterEqual(scores['f1'], 0.9, label)

    def test_online_step_detection(self):
        step = self.summary['online']['classes']['step']
        self.assertGreaterEqual(step['precision'], 0.85)
        self.assertGreaterEqual(step['recall'], 0.8)

    def test_cross_filler_transfer_lowers_step_precision(self):
        transfer = self.summary['transfer']['classes']['step']['precision']
        retrained = self.summary['retrained']['classes']['step']['precision']
        self.assertLess(transfer, retrained)
