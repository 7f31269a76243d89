from collections.abc import Mapping
from fractions import Fraction
import logging

from rest_framework import serializers

from .curves import SECP160R1
from .enclave import TICKS_PER_CYCLE


logger = logging.getLogger(__name__)


class StrictSerializer(serializers.Serializer):
    """Serializer that rejects keys it does not declare."""

    def to_internal_value(self, data):
        if isinstance(data, Mapping):
            unknown = sorted(set(data) - set(self.fields))
            if unknown:
                raise serializers.ValidationError({key: ["Unknown field."] for key in unknown})
        return super().to_internal_value(data)


class ExactNumberField(serializers.Field):
    """Number kept as its decimal string so it converts to an exact Fraction."""

    default_error_messages = {
        'invalid': "Expected a number.",
        'negative': "Value must be non-negative.",
    }

    def parse(self, data) -> Fraction:
        if isinstance(data, bool):
            self.fail('invalid')
        try:
            value = Fraction(str(data))
        except (TypeError, ValueError, ZeroDivisionError):
            self.fail('invalid')
        if value < 0:
            self.fail('negative')
        return value

    def to_internal_value(self, data):
        self.parse(data)
        return str(data)

    def to_representation(self, value):
        return str(value)


class CycleCostField(ExactNumberField):
    """Non-negative cycle count, exact at tick resolution."""

    default_error_messages = {
        'invalid': "Expected a number of cycles.",
        'negative': "Cycle costs must be non-negative.",
        'resolution': "Cycle costs must be exact at 1/{ticks} cycle resolution.",
    }

    def to_internal_value(self, data):
        if (self.parse(data) * TICKS_PER_CYCLE).denominator != 1:
            self.fail('resolution', ticks=TICKS_PER_CYCLE)
        return str(data)


class OpcodeSerializer(StrictSerializer):
    base_cost = CycleCostField()
    memory_dependent = serializers.BooleanField(default=False)
    slowdown = CycleCostField(required=False, allow_null=True)
    retire_width = serializers.IntegerField(min_value=1, default=1)


class EnclaveSerializer(StrictSerializer):
    slowdown = CycleCostField()
    cache_enabled = serializers.BooleanField(default=False)
    opcodes = serializers.DictField(child=OpcodeSerializer())

    def validate_slowdown(self, value):
        if Fraction(value) < 1:
            raise serializers.ValidationError("Slowdown must be at least 1.")
        return value

    def validate_opcodes(self, value):
        missing = sorted({'touch'} - set(value))
        if missing:
            raise serializers.ValidationError(f"Missing opcodes: {', '.join(missing)}")
        return value


class MitigationSerializer(StrictSerializer):
    eresume_cost = CycleCostField(default='0')
    restore_cost = CycleCostField()
    pte_check_cost = CycleCostField()
    warmup_iterations = serializers.IntegerField(min_value=0)
    warmup_iteration_cost_uncached = CycleCostField()
    warmup_iteration_cost_cached = CycleCostField()
    nop_slide_length = serializers.IntegerField(min_value=0, default=20)
    nop_cost = CycleCostField(default='1')
    nop_probability = serializers.FloatField(min_value=0.0, max_value=1.0, default=0.5)


class InterruptsSerializer(StrictSerializer):
    mean_offset = serializers.FloatField()
    std_dev = serializers.FloatField(min_value=0.0)


class FingerprintSerializer(StrictSerializer):
    samples = serializers.IntegerField(min_value=2)
    sample_period = serializers.FloatField(min_value=0.001)
    noise_std = serializers.FloatField(min_value=0.0)
    contention_jitter = serializers.FloatField(min_value=0.0)
    levels = serializers.DictField(child=serializers.FloatField(min_value=0.0))
    earp_levels = serializers.DictField(child=serializers.FloatField(min_value=0.0))
    drain_cycles = serializers.DictField(child=serializers.FloatField(min_value=0.0), default=dict)
    per_class = serializers.IntegerField(min_value=1)
    test_fraction = serializers.FloatField(min_value=0.01, max_value=0.99)
    trees = serializers.IntegerField(min_value=1)
    max_depth = serializers.IntegerField(min_value=1)
    max_features = serializers.CharField()
    min_samples_leaf = serializers.IntegerField(min_value=1, default=1)
    corpus_filler = serializers.CharField()
    corpus_region_length = serializers.IntegerField(min_value=1)
    online_interrupts = serializers.IntegerField(min_value=1)
    transfer_filler = serializers.CharField()

    def validate_levels(self, value):
        required = {'eresume', 'restore', 'pte_check', 'warmup', 'nop_slide', 'exited'}
        missing = sorted(required - set(value))
        if missing:
            raise serializers.ValidationError(f"Missing levels: {', '.join(missing)}")
        return value

    def validate_max_features(self, value):
        if value not in ('sqrt', 'log2', 'all') and not value.isdigit():
            raise serializers.ValidationError("Use sqrt, log2, all or a feature count.")
        return value

    def validate_earp_levels(self, value):
        if 'default' not in value:
            raise serializers.ValidationError("An earp level named 'default' is required.")
        return value


class AdaptationSerializer(StrictSerializer):
    enabled = serializers.BooleanField(default=False)
    window = serializers.IntegerField(min_value=1, default=200)
    sigmas = serializers.FloatField(min_value=0.0, default=3.0)


class PssSerializer(StrictSerializer):
    tail_mass = serializers.FloatField()
    samples_per_guess = serializers.IntegerField(min_value=1)
    trials = serializers.IntegerField(min_value=1)
    max_interrupts_per_trace = serializers.IntegerField(min_value=1)
    fire_delay_offset = serializers.FloatField(default=0.0)
    classifier = serializers.ChoiceField(choices=['forest', 'oracle'])
    deltas = serializers.ListField(child=serializers.IntegerField(min_value=0), min_length=1)
    filler = serializers.CharField()
    base_length = serializers.IntegerField(min_value=1)
    nop_slide_adaptation = AdaptationSerializer()

    def validate_tail_mass(self, value):
        if not 0 < value < 0.5:
            raise serializers.ValidationError("tail_mass must lie in (0, 0.5).")
        return value


class SteppingSerializer(StrictSerializer):
    interrupts = serializers.IntegerField(min_value=1)
    region_length = serializers.IntegerField(min_value=1)
    fillers = serializers.ListField(child=serializers.CharField(), min_length=1)


class LbmsSerializer(StrictSerializer):
    epsilon = serializers.FloatField()
    deltas = serializers.ListField(child=serializers.IntegerField(min_value=0), min_length=1)
    traces = serializers.IntegerField(min_value=1)
    runs = serializers.IntegerField(min_value=1)
    filler = serializers.CharField()
    base_length = serializers.IntegerField(min_value=1)
    max_interrupts_per_trace = serializers.IntegerField(min_value=1, default=10000)

    def validate_epsilon(self, value):
        if not 0 < value <= 1e-3:
            raise serializers.ValidationError("epsilon must lie in (0, 1e-3].")
        return value


class MemcmpSerializer(StrictSerializer):
    secret = serializers.RegexField(r'^[A-Z]{1,8}$')
    samples = serializers.IntegerField(min_value=1)
    charset = serializers.CharField()
    max_length = serializers.IntegerField(min_value=1, max_value=8)
    classifier_filler = serializers.CharField(default='load')


class NaturalModeSerializer(StrictSerializer):
    bias_bits = serializers.IntegerField(min_value=1, max_value=160)
    flagged_target = serializers.IntegerField(min_value=1)
    subset_size = serializers.IntegerField(min_value=1)
    signature_budget = serializers.IntegerField(min_value=1)


class EcdsaSerializer(StrictSerializer):
    curve = serializers.ChoiceField(choices=[SECP160R1.name])
    mode = serializers.ChoiceField(choices=['forced', 'natural'])
    forced_every = serializers.IntegerField(min_value=1)
    bias_bits = serializers.IntegerField(min_value=1, max_value=160)
    flagged_target = serializers.IntegerField(min_value=1)
    subset_size = serializers.IntegerField(min_value=1)
    signature_budget = serializers.IntegerField(min_value=1)
    budget_factor = serializers.FloatField(min_value=1.0)
    assumed_tp_rate = serializers.FloatField(min_value=0.0, max_value=1.0)
    epsilon = serializers.FloatField()
    detection_threshold = serializers.IntegerField(min_value=1)
    lll_delta = ExactNumberField()
    block2_passes = serializers.IntegerField(min_value=0, default=0)
    natural = NaturalModeSerializer()

    def validate_lll_delta(self, value):
        if not Fraction(1, 4) < Fraction(value) <= 1:
            raise serializers.ValidationError("lll_delta must lie in (0.25, 1].")
        return value


class LzbSerializer(StrictSerializer):
    signatures = serializers.IntegerField(min_value=1)
    leading_zeros = serializers.IntegerField(min_value=1, max_value=159)
    epsilon = serializers.FloatField()
    tsc_noise_std = serializers.FloatField(min_value=0.0)
    timing_gap = serializers.FloatField(min_value=0.0, max_value=1.0)
    subset_size = serializers.IntegerField(min_value=1)
    max_subset_size = serializers.IntegerField(min_value=1)
    recover = serializers.BooleanField(default=False)
    lll_delta = ExactNumberField()
    block2_passes = serializers.IntegerField(min_value=0, default=0)


class MonteCarloSerializer(StrictSerializer):
    flagged = serializers.IntegerField(min_value=1)
    tp_rate = serializers.FloatField(min_value=0.0, max_value=1.0)
    subset_size = serializers.IntegerField(min_value=1)
    draws = serializers.IntegerField(min_value=1)


class ExpectedReductionsSerializer(StrictSerializer):
    flagged = serializers.IntegerField(min_value=1)
    tp_rates = serializers.ListField(child=serializers.FloatField(min_value=0.0, max_value=1.0), min_length=1)
    subset_size = serializers.IntegerField(min_value=1)
    monte_carlo = MonteCarloSerializer()


class ProfileSerializer(StrictSerializer):
    name = serializers.CharField()
    description = serializers.CharField(required=False, allow_blank=True, default='')
    enclave = EnclaveSerializer()
    mitigation = MitigationSerializer()
    interrupts = InterruptsSerializer()
    fingerprint = FingerprintSerializer()
    pss = PssSerializer()
    stepping = SteppingSerializer()
    lbms = LbmsSerializer()
    memcmp = MemcmpSerializer()
    ecdsa = EcdsaSerializer()
    lzb = LzbSerializer()
    expected_reductions = ExpectedReductionsSerializer()

    def validate(self, data):
        opcodes = data['enclave']['opcodes']
        fillers = [data['pss']['filler'], data['lbms']['filler'], data['fingerprint']['corpus_filler'],
                   data['fingerprint']['transfer_filler'], data['memcmp']['classifier_filler'],
                   *data['stepping']['fillers']]
        unknown = sorted({filler for filler in fillers if filler not in opcodes})
        if unknown:
            raise serializers.ValidationError({'enclave': [f"Fillers without an opcode entry: {', '.join(unknown)}"]})
        return data
