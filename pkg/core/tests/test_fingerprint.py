import os
import tempfile

import numpy as np
from django.test import SimpleTestCase

from core.attacks import Platform, generate_corpus, pss_plan
from core.enclave import EnclaveSession, MitigationModel, compile_victim
from core.exceptions import TrainingError, UsageError
from core.fingerprint import (
    TRACE_LENGTH, ClassifierModel, CounterTrace, InterruptClass, TraceShape, class_mean_curves, classification_report,
    evaluate, features, generator_margins, mean_curve, predict, read_corpus, separability_margin, synthesize_trace,
    train, write_corpus,
)
from core.forest import RandomForest, gini, resolve_max_features
from core.profiles import load_profile
from core.victims import default_opcodes, uniform_filler_victim

MITIGATION = MitigationModel(restore_cost=150, pte_check_cost=250, warmup_iterations=12, warmup_cost_uncached=120,
                             warmup_cost_cached=40, nop_probability=0.0)
STILL = TraceShape(contention_jitter=0.0)


def filler_events(filler, *arrivals):
    """One event per arrival on a fresh region of `filler`."""
    opcodes = default_opcodes()
    compiled = compile_victim(uniform_filler_victim(20, filler, opcodes), {}, opcodes, False)
    events = []
    for index, at in enumerate(arrivals):
        session = EnclaveSession(compiled, MITIGATION, np.random.default_rng(index), f'fp-{index}')
        events.append(session.resume(at))
    return events


def addl_events(*arrivals):
    return filler_events('addl', *arrivals)


class InterruptClassTest(SimpleTestCase):
    def test_from_landing(self):
        self.assertEqual(InterruptClass.from_landing(-1), InterruptClass.MITIGATION)
        self.assertEqual(InterruptClass.from_landing(0), InterruptClass.ZERO_STEP)
        self.assertEqual(InterruptClass.from_landing(3), InterruptClass.STEP)
        self.assertEqual(InterruptClass.STEP.label, 'step')


class SynthesizeTraceTest(SimpleTestCase):
    def test_fixed_length_for_every_landing(self):
        rng = np.random.default_rng(0)
        for event in addl_events(500, 1845, 1910):
            trace = synthesize_trace(event, MITIGATION, 3.0, rng)
            self.assertEqual(trace.samples.shape, (TRACE_LENGTH,))
            self.assertTrue(np.all(trace.samples >= 0))

    def test_noiseless_traces_repeat(self):
        event = addl_events(1910)[0]
        first = synthesize_trace(event, MITIGATION, 0.0, np.random.default_rng(1), STILL)
        second = synthesize_trace(event, MITIGATION, 0.0, np.random.default_rng(2), STILL)
        np.testing.assert_array_equal(first.samples, second.samples)

    def test_phase_shapes(self):
        mitigation, step = addl_events(500, 1910)
        landed = synthesize_trace(mitigation, MITIGATION, 0.0, np.random.default_rng(0), STILL).samples
        stepped = synthesize_trace(step, MITIGATION, 0.0, np.random.default_rng(0), STILL).samples
        self.assertAlmostEqual(landed.max(), 60.0)
        self.assertAlmostEqual(landed[-1], 4.0)
        self.assertAlmostEqual(stepped.max(), 85.0)
        self.assertGreater(np.abs(stepped - landed).max(), 5 * 3.0)

    def test_nop_zero_step_reads_like_addl_step(self):
        # mitigation ends at 1840; the first nop pair retires at 1859, the first addl at 1870
        zero, = filler_events('nop', 1850)
        step, = addl_events(1880)
        self.assertEqual((zero.landing, step.landing), (0, 1))
        nop_curve = mean_curve(zero, MITIGATION, STILL)
        np.testing.assert_array_equal(nop_curve, mean_curve(step, MITIGATION, STILL))
        undrained = TraceShape(contention_jitter=0.0, drain_cycles={})
        self.assertGreater(np.abs(nop_curve - mean_curve(zero, MITIGATION, undrained)).max(), 50.0)

    def test_drain_lookup(self):
        self.assertEqual(STILL.drain('nop'), 30.0)
        self.assertEqual(STILL.drain('addl'), 0.0)
        self.assertEqual(TraceShape(drain_cycles={'default': 5.0}).drain('addl'), 5.0)

    def test_mitigation_and_step_means_are_separable(self):
        margins = generator_margins(addl_events(500, 1850, 1910), MITIGATION, STILL, 3.0)
        self.assertEqual(set(margins), {'mitigation-step', 'zero_step-step', 'mitigation-zero_step'})
        self.assertGreater(margins['mitigation-step'], 5.0)

    def test_margin_never_grows_with_noise(self):
        curves = class_mean_curves(addl_events(500, 1300, 1850, 1865, 1910, 1990), MITIGATION, STILL)
        self.assertEqual(len(curves), 3)
        for first, second in ((InterruptClass.MITIGATION, InterruptClass.STEP),
                              (InterruptClass.ZERO_STEP, InterruptClass.STEP)):
            margins = [separability_margin(curves[first], curves[second], noise)
                       for noise in (0.0, 0.5, 1.0, 3.0, 10.0, 30.0)]
            self.assertEqual(margins[0], np.inf)
            self.assertEqual(margins, sorted(margins, reverse=True))
        self.assertEqual(separability_margin(np.ones(4), np.ones(4), 0.0), 0.0)

    def test_page_fault_has_no_fingerprint(self):
        fault = addl_events(None)[0]
        with self.assertRaises(UsageError):
            synthesize_trace(fault, MITIGATION, 0.0, np.random.default_rng(0))

    def test_negative_samples_rejected(self):
        with self.assertRaises(UsageError):
            CounterTrace(np.array([1.0, -1.0]))

    def test_features_append_differences(self):
        self.assertEqual(features(np.zeros(TRACE_LENGTH)).shape, (1, 2 * TRACE_LENGTH - 1))


class ClassificationReportTest(SimpleTestCase):
    def test_metrics_from_confusion(self):
        report = classification_report([0, 1, 2, 2], [0, 1, 2, 1])
        self.assertEqual(report['accuracy'], 0.75)
        self.assertEqual(report['classes']['step']['recall'], 0.5)
        self.assertEqual(report['classes']['zero_step']['precision'], 0.5)
        self.assertAlmostEqual(report['classes']['zero_step']['f1'], 2 / 3)
        self.assertEqual([sum(row) for row in report['confusion']], [1, 1, 2])

    def test_single_class_predictor(self):
        report = classification_report([0, 1, 2] * 5, [2] * 15)
        self.assertEqual(report['classes']['step']['recall'], 1.0)
        self.assertAlmostEqual(report['classes']['step']['precision'], 1 / 3)

    def test_perfect_predictions(self):
        report = classification_report([0, 1, 2], [0, 1, 2])
        for scores in report['classes'].values():
            self.assertEqual(scores['f1'], 1.0)

    def test_empty_set(self):
        with self.assertRaises(UsageError):
            classification_report([], [])


class TrainTest(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        platform = Platform.from_profile(load_profile('paper-like').data)
        plan = pss_plan(platform, 0.1)
        cls.training = generate_corpus(platform, plan, 40, np.random.default_rng(11), 'addl', 500)
        cls.test = generate_corpus(platform, plan, 20, np.random.default_rng(12), 'addl', 500)
        cls.model = train(cls.training, n_trees=15, max_depth=8, seed=5)

    def test_corpus_is_balanced(self):
        counts = [sum(1 for _, label in self.training if label == cls) for cls in InterruptClass]
        self.assertEqual(counts, [40, 40, 40])

    def test_holdout_accuracy(self):
        self.assertGreater(evaluate(self.model, self.test)['accuracy'], 0.8)

    def test_training_exemplars(self):
        hits = [predict(self.model, trace) == label for trace, label in self.training]
        self.assertGreater(np.mean(hits), 0.95)

    def test_same_seed_same_model(self):
        again = train(self.training, n_trees=15, max_depth=8, seed=5)
        self.assertEqual(again.to_dict(), self.model.to_dict())

    def test_saved_model_predicts_identically(self):
        loaded = ClassifierModel.from_dict(self.model.to_dict())
        traces = [trace for trace, _ in self.test]
        self.assertEqual(loaded.label_interrupts(traces), self.model.label_interrupts(traces))

    def test_unknown_model_format(self):
        data = dict(self.model.to_dict(), format_version=99)
        with self.assertRaises(UsageError):
            ClassifierModel.from_dict(data)

    def test_corpus_csv(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'corpus.csv')
            write_corpus(path, self.test)
            with open(path) as handle:
                header = handle.readline().strip().split(',')
            loaded = read_corpus(path)
        self.assertEqual(header[0], 's000[idle_cycles]')
        self.assertEqual(header[-1], 'label')
        self.assertEqual([label for _, label in loaded], [label for _, label in self.test])

    def test_requires_two_classes(self):
        single = [(trace, label) for trace, label in self.training if label == InterruptClass.STEP]
        with self.assertRaises(TrainingError):
            train(single, n_trees=2)
        with self.assertRaises(TrainingError):
            train([], n_trees=2)


class ForestTest(SimpleTestCase):
    def setUp(self):
        rng = np.random.default_rng(0)
        self.X = rng.normal(size=(150, 6))
        self.y = (self.X[:, 0] > 0).astype(int) + (self.X[:, 1] > 0.5).astype(int)

    def test_fits_separable_data(self):
        forest = RandomForest(n_trees=10, max_depth=10, max_features='all', bootstrap=False, seed=1).fit(self.X, self.y)
        np.testing.assert_array_equal(forest.predict(self.X), self.y)

    def test_seeded_forests_agree(self):
        first = RandomForest(n_trees=5, seed=3).fit(self.X, self.y)
        second = RandomForest(n_trees=5, seed=3).fit(self.X, self.y)
        self.assertEqual(first.to_dict(), second.to_dict())

    def test_ties_go_to_lower_label(self):
        forest = RandomForest(n_trees=2, seed=0)
        forest.n_classes = 3
        forest.votes = lambda X: np.array([[1, 1, 0], [0, 1, 1]])
        np.testing.assert_array_equal(forest.predict(np.zeros((2, 6))), [0, 1])

    def test_single_class_rejected(self):
        with self.assertRaises(TrainingError):
            RandomForest(n_trees=2).fit(self.X, np.zeros(150, dtype=int))

    def test_feature_budget(self):
        self.assertEqual(resolve_max_features('sqrt', 239), 15)
        self.assertEqual(resolve_max_features('log2', 239), 7)
        self.assertEqual(resolve_max_features('all', 239), 239)
        self.assertEqual(resolve_max_features('500', 239), 239)

    def test_gini(self):
        self.assertEqual(gini(np.array([5, 5])), 0.5)
        self.assertEqual(gini(np.array([4, 0])), 0.0)
