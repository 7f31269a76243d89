import numpy as np
from django.test import SimpleTestCase

from core.exceptions import CalibrationError, ConfigurationError
from core.interrupts import (
    ArrivalDistribution, IpiPlan, NopSlideAdapter, PlanMode, calibrate_lbms, calibrate_pss, plan_quantile, quantile,
    sample_arrival, sample_arrivals,
)

DIST = ArrivalDistribution(mean_offset=300.0, std_dev=100.0)


class SampleArrivalTest(SimpleTestCase):
    def test_degenerate_distribution(self):
        plan = IpiPlan(fire_delay=25.0, mode=PlanMode.PSS)
        rng = np.random.default_rng(0)
        self.assertEqual(sample_arrival(ArrivalDistribution(300.0, 0.0), plan, rng), 325.0)

    def test_sample_mean(self):
        plan = IpiPlan(fire_delay=1000.0, mode=PlanMode.PSS)
        draws = sample_arrivals(DIST, plan, np.random.default_rng(1), 1_000_000)
        self.assertLess(abs(draws.mean() - 1300.0), 4 * 100.0 / 1000)

    def test_truncation_by_resampling(self):
        dist = ArrivalDistribution(mean_offset=-500.0, std_dev=100.0)
        plan = IpiPlan(fire_delay=0.0, mode=PlanMode.PSS)
        rng = np.random.default_rng(2)
        self.assertTrue(np.all(sample_arrivals(dist, plan, rng, 1000) >= 0))
        self.assertGreaterEqual(sample_arrival(dist, plan, rng), 0)

    def test_negative_std_dev(self):
        with self.assertRaises(ConfigurationError):
            ArrivalDistribution(300.0, -1.0)


class QuantileTest(SimpleTestCase):
    def test_median_and_symmetry(self):
        self.assertEqual(quantile(DIST, 0.5), 300.0)
        self.assertAlmostEqual(quantile(DIST, 0.9), 428.155, places=3)
        self.assertAlmostEqual(quantile(DIST, 0.9) - 300.0, 300.0 - quantile(DIST, 0.1))

    def test_fire_delay_shifts_quantiles(self):
        plan = IpiPlan(fire_delay=40.0, mode=PlanMode.PSS)
        for p in (0.01, 0.5, 0.99):
            self.assertAlmostEqual(plan_quantile(DIST, plan, p), quantile(DIST, p) + 40.0)

    def test_probability_bounds(self):
        for p in (0, 1, -0.2):
            with self.assertRaises(ConfigurationError):
                quantile(DIST, p)


class CalibrationTest(SimpleTestCase):
    def test_pss_mean_below_mitigation_end(self):
        plan = calibrate_pss(DIST, 2000.0, 0.1)
        self.assertAlmostEqual(DIST.mean_offset + plan.fire_delay, 1871.845, places=2)
        self.assertEqual(plan.mode, PlanMode.PSS)

    def test_pss_tail_mass(self):
        plan = calibrate_pss(DIST, 1840.0, 0.1)
        draws = sample_arrivals(DIST, plan, np.random.default_rng(3), 100_000)
        self.assertLess(abs(np.mean(draws > 1840.0) - 0.1), 0.02)

    def test_pss_without_spread(self):
        plan = calibrate_pss(ArrivalDistribution(300.0, 0.0), 1840.0, 0.1)
        self.assertEqual(300.0 + plan.fire_delay, 1840.0)

    def test_pss_infeasible(self):
        with self.assertRaises(CalibrationError):
            calibrate_pss(ArrivalDistribution(5000.0, 100.0), 1840.0, 0.1)
        with self.assertRaises(ConfigurationError):
            calibrate_pss(DIST, 1840.0, 0.5)

    def test_lbms_margin(self):
        plan = calibrate_lbms(DIST, 1840.0, 95.0, 1e-6)
        self.assertEqual(plan.lbms_lower_bound, 1935.0)
        self.assertGreaterEqual(DIST.mean_offset + plan.fire_delay, 1935.0 + 475.3)

    def test_lbms_violation_rate(self):
        plan = calibrate_lbms(DIST, 1840.0, 95.0, 1e-3)
        draws = sample_arrivals(DIST, plan, np.random.default_rng(4), 100_000)
        self.assertLessEqual(np.mean(draws < plan.lbms_lower_bound), 1e-2)

    def test_lbms_without_spread(self):
        plan = calibrate_lbms(ArrivalDistribution(300.0, 0.0), 1840.0, 95.0, 1e-3)
        self.assertEqual(300.0 + plan.fire_delay, 1935.0)

    def test_lbms_epsilon_range(self):
        with self.assertRaises(ConfigurationError):
            calibrate_lbms(DIST, 1840.0, 95.0, 1e-2)

    def test_plan_invariants(self):
        with self.assertRaises(CalibrationError):
            IpiPlan(fire_delay=-1.0, mode=PlanMode.PSS)
        with self.assertRaises(ConfigurationError):
            IpiPlan(fire_delay=1.0, mode=PlanMode.LBMS)


class NopSlideAdapterTest(SimpleTestCase):
    def setUp(self):
        self.plan = IpiPlan(fire_delay=1400.0, mode=PlanMode.PSS)

    def test_delays_when_mitigation_share_is_high(self):
        adapter = NopSlideAdapter(tail_mass=0.1, step=20.0, window=10, sigmas=0.0)
        plan = self.plan
        for _ in range(10):
            plan = adapter.observe(plan, True)
        self.assertEqual(plan.fire_delay, 1420.0)
        self.assertEqual(adapter.adjustments, 1)
        self.assertEqual(len(adapter.recent), 0)

    def test_keeps_plan_below_threshold(self):
        adapter = NopSlideAdapter(tail_mass=0.1, step=20.0, window=10, sigmas=0.0)
        plan = self.plan
        for index in range(10):
            plan = adapter.observe(plan, index > 1)
        self.assertEqual(plan, self.plan)

    def test_threshold_uses_binomial_spread(self):
        adapter = NopSlideAdapter(tail_mass=0.1, step=20.0, window=200, sigmas=3.0)
        self.assertAlmostEqual(adapter.threshold, 0.9 + 3 * np.sqrt(0.9 * 0.1 / 200))
