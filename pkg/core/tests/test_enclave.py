from fractions import Fraction

import numpy as np
from django.test import SimpleTestCase

from core.enclave import (
    STOP_PAGE, Cause, EnclaveSession, InstructionSpec, MitigationModel, Phase, ProgramCounter, compile_victim,
    cost_to_ticks, effective_cost, ground_truth_step_count, mitigation_duration,
)
from core.exceptions import ConfigurationError, MalformedVictimError, UsageError
from core.profiles import load_profile
from core.victims import DEFAULT_OPCODES, Block, VictimProgram, default_opcodes, make_delta_victim, uniform_filler_victim


def budget(nop_probability=0.0):
    return MitigationModel(
        restore_cost=150,
        pte_check_cost=250,
        warmup_iterations=12,
        warmup_cost_uncached=120,
        warmup_cost_cached=40,
        nop_probability=nop_probability,
    )


class EffectiveCostTest(SimpleTestCase):
    def test_slowdown_applies_only_to_uncached_memory_work(self):
        nop = InstructionSpec('nop', '0.25', True)
        addl = InstructionSpec('addl', 5, True)
        mov = InstructionSpec('mov', 1, False)
        self.assertEqual(effective_cost(nop, True, 300), Fraction(1, 4))
        self.assertEqual(effective_cost(addl, True, 300), 5)
        self.assertEqual(effective_cost(addl, False, 300), 1500)
        self.assertEqual(effective_cost(mov, False, 300), 1)

    def test_invalid_slowdown(self):
        addl = InstructionSpec('addl', 5, True)
        for slowdown in (0, -1, 0.5):
            with self.assertRaises(ConfigurationError):
                effective_cost(addl, False, slowdown)

    def test_disabling_cache_never_lowers_cost(self):
        table = default_opcodes()
        for tag in DEFAULT_OPCODES:
            inst = table.instruction(tag)
            self.assertGreaterEqual(table.cost(inst, False), table.cost(inst, True), tag)

    def test_tick_resolution(self):
        self.assertEqual(cost_to_ticks('0.25'), 250)
        self.assertEqual(cost_to_ticks(9.5), 9500)
        with self.assertRaises(ConfigurationError):
            cost_to_ticks(Fraction(1, 3))

    def test_instruction_invariants(self):
        with self.assertRaises(ConfigurationError):
            InstructionSpec('nop', 0, False)
        with self.assertRaises(ConfigurationError):
            InstructionSpec('nop', 1, False, page_id=-1)


class MitigationDurationTest(SimpleTestCase):
    def test_shipped_budget(self):
        m = MitigationModel.from_profile(load_profile('paper-like').data)
        self.assertEqual(mitigation_duration(m, 0, False), 1840)
        self.assertEqual(mitigation_duration(m, 1, False), 1860)
        self.assertEqual(mitigation_duration(m, 0, True), 880)
        self.assertEqual(mitigation_duration(m, 1, False) - mitigation_duration(m, 0, False), 20 * m.nop_cost)

    def test_sum_of_configured_phases(self):
        m = MitigationModel(restore_cost=0, pte_check_cost=0, warmup_iterations=10, warmup_cost_uncached=100,
                            warmup_cost_cached=100, nop_slide_length=20, nop_cost='0.5')
        self.assertEqual(mitigation_duration(m, 0, False), 1000)
        self.assertEqual(mitigation_duration(m, 1, False), 1010)

    def test_invalid_budget(self):
        with self.assertRaises(ConfigurationError):
            MitigationModel(restore_cost=-1, pte_check_cost=0, warmup_iterations=0, warmup_cost_uncached=0,
                            warmup_cost_cached=0)
        with self.assertRaises(ConfigurationError):
            MitigationModel(restore_cost=0, pte_check_cost=0, warmup_iterations=0, warmup_cost_uncached=0,
                            warmup_cost_cached=0, nop_probability=1.5)


class ResumeAndRunTest(SimpleTestCase):
    """Five uncached addl (30 cycles each) after an 1840-cycle mitigation."""

    def setUp(self):
        self.opcodes = default_opcodes()
        self.compiled = compile_victim(uniform_filler_victim(5, 'addl', self.opcodes), {}, self.opcodes, False)

    def session(self, seed=0, nop_probability=0.0, trace_id='trace-0'):
        return EnclaveSession(self.compiled, budget(nop_probability), np.random.default_rng(seed), trace_id)

    def test_interrupt_inside_mitigation(self):
        session = self.session()
        event = session.resume(100)
        self.assertTrue(event.is_mitigation_landing)
        self.assertEqual(event.phase, Phase.RESTORE)
        self.assertEqual(event.position, 0)
        self.assertTrue(session.state.in_mitigation)
        self.assertIsNotNone(session.state.saved_params)

        self.assertEqual(session.resume(500).phase, Phase.WARMUP)

    def test_interrupt_during_third_instruction(self):
        event = self.session().resume(1840 + 60 + 10)
        self.assertEqual(event.cause, Cause.IPI)
        self.assertEqual(event.landing, 2)
        self.assertEqual(event.erip, ProgramCounter(0, 2))
        self.assertEqual(event.elapsed_cycles, 1910)

    def test_retire_boundary_counts_as_retired(self):
        self.assertEqual(self.session().resume(1870).landing, 1)

    def test_zero_step_on_earp(self):
        event = self.session().resume(1845)
        self.assertTrue(event.is_zero_step)
        self.assertEqual(event.earp_opcode, 'addl')

    def test_no_interrupt_reaches_boundary(self):
        session = self.session()
        event = session.resume(None)
        self.assertEqual(event.cause, Cause.PAGE_FAULT)
        self.assertEqual(event.faulting_page, STOP_PAGE)
        self.assertIn(event.faulting_page, self.compiled.boundary_pages)
        self.assertEqual(event.position, 5)
        self.assertTrue(session.finished)
        with self.assertRaises(UsageError):
            session.resume(None)

    def test_arrival_before_resume_rejected(self):
        with self.assertRaises(UsageError):
            self.session().resume(-1)

    def test_r_bit_restored_after_mitigation_landing(self):
        for seed in range(40):
            session = self.session(seed, nop_probability=0.5)
            first = session.resume(100)
            second = session.resume(300)
            self.assertEqual(first.r_bit, second.r_bit)
            session.resume(1910)
            self.assertIsNone(session.state.saved_params)

    def test_zero_step_resamples_r(self):
        # 1865 is a zero-step for either slide setting
        session = self.session(7, nop_probability=0.5)
        resumes = 20_000
        bits = np.array([session.resume(1865).r_bit for _ in range(resumes)])
        self.assertEqual(session.state.position, 0)
        band = 4 * np.sqrt(0.25 / resumes)
        self.assertLess(abs(bits.mean() - 0.5), band)
        # consecutive zero-steps draw independent bits
        self.assertLess(abs(np.mean(bits[1:] == bits[:-1]) - 0.5), band)

    def test_identical_seeds_replay_identically(self):
        schedule = [100, 1910, 1845, None]
        runs = []
        for _ in range(2):
            session = self.session(3, nop_probability=0.5)
            runs.append([session.resume(at) for at in schedule])
        self.assertEqual(runs[0], runs[1])

    def test_ground_truth_step_count(self):
        session = self.session()
        first = session.resume(1910)
        held = session.resume(100)
        stepped = session.resume(1870)
        self.assertEqual(ground_truth_step_count(first, held), 0)
        self.assertEqual(ground_truth_step_count(held, stepped), 1)
        other = self.session(trace_id='trace-1').resume(100)
        with self.assertRaises(UsageError):
            ground_truth_step_count(first, other)

    def test_step_count_across_long_branch(self):
        victim = make_delta_victim(6, 0, 'nop', self.opcodes)
        compiled = compile_victim(victim, {'guess': 1}, self.opcodes, False)
        session = EnclaveSession(compiled, budget(), np.random.default_rng(0), 'delta')
        start = session.resume(100)
        end = session.resume(None)
        self.assertEqual(ground_truth_step_count(start, end), 16)

    def test_victim_without_boundary(self):
        victim = VictimProgram('open-ended', (Block(None, self.opcodes.run('addl', 3)),))
        compiled = compile_victim(victim, {}, self.opcodes, False)
        session = EnclaveSession(compiled, budget(), np.random.default_rng(0), 'open')
        with self.assertRaises(MalformedVictimError):
            session.resume(None)

    def test_nop_pairs_retire_together(self):
        compiled = compile_victim(uniform_filler_victim(4, 'nop', self.opcodes), {}, self.opcodes, False)
        self.assertEqual(len(compiled.groups), 3)
        self.assertEqual(compiled.cycles_between(), 38)

    def test_cached_session_uses_cached_warmup(self):
        compiled = compile_victim(uniform_filler_victim(5, 'addl', self.opcodes), {}, self.opcodes, True)
        session = EnclaveSession(compiled, budget(), np.random.default_rng(0), 'cached', cache_enabled=True)
        event = session.resume(None)
        self.assertEqual(event.mitigation_end, cost_to_ticks(880))
        self.assertEqual(event.elapsed_cycles, 880 + 25)
