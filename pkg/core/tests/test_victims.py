import itertools

from django.test import SimpleTestCase

from core.attacks import Platform
from core.exceptions import ConfigurationError, MalformedVictimError, UsageError
from core.profiles import load_profile
from core.victims import (
    NONCE_BITS, Block, Guard, GuardKind, VictimProgram, default_opcodes, make_delta_victim, make_lzb_victim,
    make_memcmp_victim, make_truncation_victim, memcmp_expected_count,
)


class DeltaVictimTest(SimpleTestCase):
    def setUp(self):
        self.opcodes = default_opcodes()

    def test_branch_lengths(self):
        balanced = make_delta_victim(0, 1, 'nop', self.opcodes)
        self.assertEqual(balanced.instruction_count({'guess': 0}), 10)
        self.assertEqual(balanced.instruction_count({'guess': 1}), 10)

        victim = make_delta_victim(6, 1, 'nop', self.opcodes)
        self.assertEqual(victim.instruction_count({'guess': 1}), 10)
        self.assertEqual(victim.instruction_count({'guess': 0}), 16)

    def test_negative_delta(self):
        with self.assertRaises(ConfigurationError):
            make_delta_victim(-1, 0)

    def test_guess_is_required(self):
        with self.assertRaises(UsageError):
            make_delta_victim(3, 0).instruction_count()

    def test_descriptor_rebinds_secret(self):
        descriptor = make_delta_victim(4, 0, 'addl', self.opcodes).to_dict()
        self.assertNotIn('secrets', descriptor)
        victim = VictimProgram.from_dict(descriptor, secrets={'s': 1})
        self.assertEqual(victim.instruction_count({'guess': 0}), 14)
        self.assertEqual(victim.instruction_count({'guess': 1}), 10)


class MemcmpVictimTest(SimpleTestCase):
    def test_counts(self):
        victim = make_memcmp_victim('SECRET')
        expected = {'A': 4, 'XECRET': 10, 'SEXXXX': 22, 'SECREX': 40, 'SECRET': 46}
        for candidate, count in expected.items():
            self.assertEqual(victim.instruction_count({'input': candidate}), count, candidate)

    def test_count_oracle_over_small_domain(self):
        charset = 'ABC'
        for length in range(1, 4):
            for secret in map(''.join, itertools.product(charset, repeat=length)):
                victim = make_memcmp_victim(secret, charset=charset, max_length=3)
                for size in range(1, 4):
                    for candidate in map(''.join, itertools.product(charset, repeat=size)):
                        self.assertEqual(
                            victim.instruction_count({'input': candidate}),
                            memcmp_expected_count(secret, candidate),
                        )

    def test_longer_matching_prefix_runs_longer(self):
        victim = make_memcmp_victim('ABCD', charset='ABCD', max_length=4)
        counts = [victim.instruction_count({'input': candidate}) for candidate in ('DDDD', 'ADDD', 'ABDD', 'ABCA', 'ABCD')]
        self.assertEqual(counts, sorted(set(counts)))

    def test_invalid_secrets(self):
        for secret in ('', 'TOOLONGSECRET', 'abc', 'AB1'):
            with self.assertRaises(ConfigurationError):
                make_memcmp_victim(secret)


class NonceVictimTest(SimpleTestCase):
    def test_truncation_paths(self):
        biased = ((1 << 15) - 1) << (NONCE_BITS - 15)
        self.assertEqual(make_truncation_victim(biased).instruction_count(), 92)
        self.assertEqual(make_truncation_victim(biased - 1).instruction_count(), 40)
        self.assertEqual(make_truncation_victim(0).instruction_count(), 40)
        self.assertEqual(make_truncation_victim((1 << NONCE_BITS) - 1).instruction_count(), 92)

    def test_lzb_paths(self):
        self.assertEqual(make_lzb_victim(1).instruction_count(), 14)
        self.assertEqual(make_lzb_victim((1 << 155) - 1).instruction_count(), 14)
        self.assertEqual(make_lzb_victim(1 << 155).instruction_count(), 12)
        self.assertEqual(make_lzb_victim(1 << 159).instruction_count(), 12)

    def test_replay_agrees_with_instruction_count(self):
        platform = Platform.from_profile(load_profile('paper-like').data)
        victims = [
            make_truncation_victim(0, platform.opcodes),
            make_truncation_victim(((1 << 15) - 1) << 145, platform.opcodes),
            make_lzb_victim(1, platform.opcodes),
            make_lzb_victim(1 << 159, platform.opcodes),
        ]
        for victim in victims:
            compiled = platform.compile(victim)
            self.assertEqual(compiled.retired_before_boundary(), victim.instruction_count())


class GuardValidationTest(SimpleTestCase):
    def test_undeclared_guard_variable(self):
        opcodes = default_opcodes()
        with self.assertRaises(MalformedVictimError):
            VictimProgram(
                name='bad',
                blocks=(Block(Guard(GuardKind.EQUALS, 'guess', 'key'), opcodes.run('nop', 2)),),
                inputs=('guess',),
            )

    def test_unbound_secret(self):
        with self.assertRaises(MalformedVictimError):
            VictimProgram(name='bad', blocks=(), secret_env={'s': 'bit'})

    def test_unknown_guard_kind(self):
        with self.assertRaises(MalformedVictimError):
            Guard.from_dict({'kind': 'parity', 'variable': 's'})

    def test_path_without_boundary(self):
        opcodes = default_opcodes()
        victim = VictimProgram(name='open', blocks=(Block(None, opcodes.run('addl', 2)),))
        with self.assertRaises(MalformedVictimError):
            victim.instruction_count()
