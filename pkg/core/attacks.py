"""
PSS and LBMS attacker strategies on top of the enclave simulator.

Attacker-side code only sees interrupt counts, counter traces and timing.
Ground-truth landings travel with events for evaluation and for the
debug-only GroundTruthOracle classifier.
"""
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .enclave import (
    Cause, CompiledVictim, EnclaveSession, MitigationModel, OpcodeTable, Phase, compile_victim, mitigation_duration,
)
from .exceptions import ConfigurationError, InconclusiveResultError, UsageError
from .fingerprint import (
    CounterTrace, GroundTruthOracle, InterruptClass, TraceShape, classification_report, generator_margins,
    synthesize_trace,
)
from .func import stream
from .interrupts import ArrivalDistribution, IpiPlan, NopSlideAdapter, calibrate_lbms, calibrate_pss, sample_arrival
from .victims import (
    MEMCMP_CHARSET, MEMCMP_MAX_LENGTH, VictimProgram, uniform_filler_victim,
)

logger = logging.getLogger(__name__)

CALL_TIMING_GAP = 0.057
MEMCMP_STREAM = 7


@dataclass(frozen=True)
class Platform:
    """Everything the simulated machine needs besides the victim."""
    opcodes: OpcodeTable
    mitigation: MitigationModel
    arrivals: ArrivalDistribution
    shape: TraceShape
    noise_std: float
    cache_enabled: bool = False

    @classmethod
    def from_profile(cls, profile: Mapping) -> 'Platform':
        return cls(
            opcodes=OpcodeTable.from_profile(profile),
            mitigation=MitigationModel.from_profile(profile),
            arrivals=ArrivalDistribution.from_profile(profile),
            shape=TraceShape.from_profile(profile),
            noise_std=float(profile['fingerprint']['noise_std']),
            cache_enabled=bool(profile['enclave'].get('cache_enabled', False)),
        )

    def mitigation_end(self, r_bit: int = 0) -> float:
        return float(mitigation_duration(self.mitigation, r_bit, self.cache_enabled))

    def compile(self, victim: VictimProgram, inputs: Optional[Mapping] = None) -> CompiledVictim:
        return compile_victim(victim, inputs or {}, self.opcodes, self.cache_enabled)

    def session(self, compiled: CompiledVictim, rng, trace_id: str) -> EnclaveSession:
        return EnclaveSession(compiled, self.mitigation, rng, trace_id, self.cache_enabled)

    def with_arrivals(self, arrivals: ArrivalDistribution) -> 'Platform':
        return Platform(self.opcodes, self.mitigation, arrivals, self.shape, self.noise_std, self.cache_enabled)


def pss_plan(platform: Platform, tail_mass: float, offset: float = 0.0) -> IpiPlan:
    return calibrate_pss(platform.arrivals, platform.mitigation_end(0), tail_mass, offset)


def lbms_plan(platform: Platform, short_branch_cycles: float, epsilon: float) -> IpiPlan:
    return calibrate_lbms(platform.arrivals, platform.mitigation_end(0), short_branch_cycles, epsilon)


@dataclass
class PssConfig:
    classifier: object
    plan: IpiPlan
    samples_per_guess: int = 40
    tail_mass: float = 0.1
    max_interrupts_per_trace: int = 10_000
    adaptation: Optional[Mapping] = None

    def __post_init__(self):
        if self.samples_per_guess < 1 or self.max_interrupts_per_trace < 1:
            raise ConfigurationError("PSS needs k >= 1 and a positive interrupt cap")

    def adapter(self, platform: Platform) -> Optional[NopSlideAdapter]:
        if not self.adaptation or not self.adaptation.get('enabled'):
            return None
        step = platform.mitigation.nop_slide_length * float(platform.mitigation.nop_cost)
        return NopSlideAdapter(self.tail_mass, step, int(self.adaptation.get('window', 200)),
                               float(self.adaptation.get('sigmas', 3.0)))


@dataclass
class PssTraceRecord:
    trace_id: str
    step_count: int
    interrupts: int
    zero_steps: int
    mitigation_labels: int
    aborted: bool
    retired: int


def _fire(session: EnclaveSession, platform: Platform, plan: IpiPlan, rng):
    arrival = sample_arrival(platform.arrivals, plan, rng)
    return session.resume(arrival)


def pss_trace(compiled: CompiledVictim, platform: Platform, cfg: PssConfig, rng, trace_id: str,
              adapter: Optional[NopSlideAdapter] = None) -> PssTraceRecord:
    """Count Step-classified interrupts over one boundary-to-boundary region."""
    session = platform.session(compiled, rng, trace_id)
    plan = cfg.plan
    traces: List[CounterTrace] = []
    events = []
    labels: List[InterruptClass] = []
    aborted = False
    while not session.finished:
        if len(events) >= cfg.max_interrupts_per_trace:
            aborted = True
            logger.warning(f"{trace_id}: aborted after {len(events)} interrupts")
            break
        event = _fire(session, platform, plan, rng)
        if event.cause == Cause.PAGE_FAULT:
            break
        events.append(event)
        traces.append(synthesize_trace(event, platform.mitigation, platform.noise_std, rng,
                                       platform.shape, plan.fire_delay))
        if adapter is not None:
            label = cfg.classifier.label_interrupts(traces[-1:], events[-1:])[0]
            labels.append(label)
            plan = adapter.observe(plan, label == InterruptClass.MITIGATION)
    if adapter is None:
        labels = cfg.classifier.label_interrupts(traces, events)
    tally = Counter(labels)
    return PssTraceRecord(
        trace_id=trace_id,
        step_count=tally[InterruptClass.STEP],
        interrupts=len(events),
        # each zero-step resumes with a freshly sampled r bit
        zero_steps=tally[InterruptClass.ZERO_STEP],
        mitigation_labels=tally[InterruptClass.MITIGATION],
        aborted=aborted,
        retired=session.state.position,
    )


@dataclass
class PssResult:
    per_guess_mean_counts: Dict[object, float]
    predicted_secret: object
    raw_counts: Dict[object, List[PssTraceRecord]] = field(default_factory=dict)

    @property
    def interrupts(self) -> int:
        return sum(record.interrupts for records in self.raw_counts.values() for record in records)


def pick_min(means: Mapping) -> object:
    return min(means, key=lambda guess: (means[guess], guess))


def pss_attack(victim: VictimProgram, guesses: Sequence, cfg: PssConfig, platform: Platform, rng,
               input_name: str = 'guess', trace_prefix: str = 'pss') -> PssResult:
    if len(guesses) < 2:
        raise UsageError("PSS needs at least two guesses", guesses=list(guesses))
    adapter = cfg.adapter(platform)
    raw = {}
    means = {}
    for guess in guesses:
        compiled = platform.compile(victim, {input_name: guess})
        records = [
            pss_trace(compiled, platform, cfg, rng, f'{trace_prefix}-{guess}-{index}', adapter)
            for index in range(cfg.samples_per_guess)
        ]
        kept = [record.step_count for record in records if not record.aborted]
        if not kept:
            raise InconclusiveResultError("every trace for this guess hit the interrupt cap", guess=guess)
        raw[guess] = records
        means[guess] = float(np.mean(kept))
    return PssResult(per_guess_mean_counts=means, predicted_secret=pick_min(means), raw_counts=raw)


@dataclass
class SteppingStats:
    filler: str
    fired: int = 0
    mitigation_landings: int = 0
    zero_steps: int = 0
    step_histogram: Counter = field(default_factory=Counter)
    false_positives: Counter = field(default_factory=Counter)
    nop_slide_landings: int = 0
    nop_slide_as_mitigation: int = 0

    @property
    def step_interrupts(self) -> int:
        return sum(self.step_histogram.values())

    @property
    def single_step_share(self) -> float:
        total = self.step_interrupts
        return self.step_histogram.get(1, 0) / total if total else 0.0

    @property
    def mode(self) -> Optional[int]:
        if not self.step_histogram:
            return None
        return min(self.step_histogram, key=lambda n: (-self.step_histogram[n], n))

    @property
    def mitigation_share(self) -> float:
        return self.mitigation_landings / self.fired if self.fired else 0.0

    def share(self, n: int) -> float:
        total = self.step_interrupts
        return self.step_histogram.get(n, 0) / total if total else 0.0


def stepping_rate_experiment(platform: Platform, filler: str, classifier, plan: IpiPlan, interrupts: int, rng,
                             region_length: int = 500, batch: int = 512) -> SteppingStats:
    """Ground-truth step histogram of Step-classified interrupts in a uniform debug region."""
    compiled = platform.compile(uniform_filler_victim(region_length, filler, platform.opcodes))
    stats = SteppingStats(filler=filler)
    trace_index = 0
    session = platform.session(compiled, rng, f'step-{filler}-{trace_index}')
    pending_traces, pending_events = [], []

    def flush():
        labels = classifier.label_interrupts(pending_traces, pending_events)
        for event, label in zip(pending_events, labels):
            truth = InterruptClass.from_landing(event.landing)
            if event.phase == Phase.NOP_SLIDE:
                stats.nop_slide_landings += 1
                stats.nop_slide_as_mitigation += int(label == InterruptClass.MITIGATION)
            if label != InterruptClass.STEP:
                continue
            if truth == InterruptClass.STEP:
                stats.step_histogram[event.landing] += 1
            else:
                stats.false_positives[truth.label] += 1
        pending_traces.clear()
        pending_events.clear()

    while stats.fired < interrupts:
        if session.finished:
            trace_index += 1
            session = platform.session(compiled, rng, f'step-{filler}-{trace_index}')
        event = _fire(session, platform, plan, rng)
        if event.cause == Cause.PAGE_FAULT:
            continue
        stats.fired += 1
        stats.mitigation_landings += int(event.landing < 0)
        stats.zero_steps += int(event.landing == 0)
        pending_events.append(event)
        pending_traces.append(synthesize_trace(event, platform.mitigation, platform.noise_std, rng,
                                               platform.shape, plan.fire_delay))
        if len(pending_events) >= batch:
            flush()
    flush()
    logger.info(
        f"stepping {filler}: fired={stats.fired} mitigation={stats.mitigation_share:.3f} "
        f"single={stats.single_step_share:.3f} mode={stats.mode}"
    )
    return stats


def generate_corpus(platform: Platform, plan: IpiPlan, per_class: int, rng, filler: str = 'addl',
                    region_length: int = 500, max_interrupts: Optional[int] = None) -> List[Tuple[CounterTrace, InterruptClass]]:
    """Class-balanced labeled traces from a debug enclave, balanced by rejection."""
    compiled = platform.compile(uniform_filler_victim(region_length, filler, platform.opcodes))
    counts = Counter()
    labeled = []
    fired = 0
    limit = max_interrupts or per_class * 400
    trace_index = 0
    session = platform.session(compiled, rng, f'corpus-{trace_index}')
    while min(counts[cls] for cls in InterruptClass) < per_class:
        if fired >= limit:
            raise ConfigurationError(
                "corpus generation could not balance the classes",
                counts={cls.label: counts[cls] for cls in InterruptClass},
            )
        if session.finished:
            trace_index += 1
            session = platform.session(compiled, rng, f'corpus-{trace_index}')
        event = _fire(session, platform, plan, rng)
        if event.cause == Cause.PAGE_FAULT:
            continue
        fired += 1
        label = InterruptClass.from_landing(event.landing)
        if counts[label] >= per_class:
            continue
        counts[label] += 1
        labeled.append((synthesize_trace(event, platform.mitigation, platform.noise_std, rng,
                                         platform.shape, plan.fire_delay), label))
    logger.info(f"corpus of {len(labeled)} traces from {fired} interrupts ({filler})")
    return labeled


def online_evaluation(platform: Platform, classifier, plan: IpiPlan, interrupts: int, rng,
                      filler: str = 'addl', region_length: int = 500) -> dict:
    """Classifier report on the natural, mitigation-heavy interrupt stream."""
    compiled = platform.compile(uniform_filler_victim(region_length, filler, platform.opcodes))
    traces, events = [], []
    trace_index = 0
    session = platform.session(compiled, rng, f'online-{trace_index}')
    while len(events) < interrupts:
        if session.finished:
            trace_index += 1
            session = platform.session(compiled, rng, f'online-{trace_index}')
        event = _fire(session, platform, plan, rng)
        if event.cause == Cause.PAGE_FAULT:
            continue
        events.append(event)
        traces.append(synthesize_trace(event, platform.mitigation, platform.noise_std, rng,
                                       platform.shape, plan.fire_delay))
    labels = classifier.label_interrupts(traces, events)
    report = classification_report(
        [int(InterruptClass.from_landing(event.landing)) for event in events], [int(label) for label in labels],
    )
    slide = [label for event, label in zip(events, labels) if event.phase == Phase.NOP_SLIDE]
    report['nop_slide'] = {
        'landings': len(slide),
        'classified_mitigation': sum(1 for label in slide if label == InterruptClass.MITIGATION),
    }
    report['generator_margins'] = generator_margins(events, platform.mitigation, platform.shape, platform.noise_std)
    return report


@dataclass
class LbmsConfig:
    plan: IpiPlan
    detection_threshold: int = 1
    max_interrupts_per_trace: int = 10_000

    def __post_init__(self):
        if self.detection_threshold < 1:
            raise ConfigurationError("detection threshold must be at least 1")

    @property
    def lower_bound_cycles(self) -> float:
        return self.plan.lbms_lower_bound


@dataclass
class Observation:
    trace_id: str
    interrupts_before_boundary: int
    boundary_reached: bool
    # cycles from the last resume to the closing fault, as the TSC sees it
    fault_elapsed: float = 0.0
    aborted: bool = False
    debug_positions: Tuple[int, ...] = ()


def lbms_trace(compiled: CompiledVictim, platform: Platform, cfg: LbmsConfig, rng, trace_id: str) -> Observation:
    session = platform.session(compiled, rng, trace_id)
    interrupts = 0
    positions = []
    while True:
        if interrupts >= cfg.max_interrupts_per_trace:
            logger.warning(f"{trace_id}: LBMS trace aborted after {interrupts} interrupts")
            return Observation(trace_id, interrupts, False, aborted=True, debug_positions=tuple(positions))
        event = _fire(session, platform, cfg.plan, rng)
        if event.cause == Cause.PAGE_FAULT:
            return Observation(trace_id, interrupts, True, float(event.elapsed_cycles),
                               debug_positions=tuple(positions))
        interrupts += 1
        positions.append(event.position)


def lbms_detect(obs: Observation, cfg: LbmsConfig) -> bool:
    return obs.interrupts_before_boundary >= cfg.detection_threshold


def call_landing_filter(delta: float, baseline: float, gap: float = CALL_TIMING_GAP) -> bool:
    """Keep an observation unless its resume-to-fault delta looks like a landing on the call."""
    return delta > (1.0 - gap / 2.0) * baseline


@dataclass
class LbmsBenchRow:
    delta: int
    traces: int
    detections: int
    short_branch_detections: int


def lbms_delta_run(victim_factory, delta: int, traces: int, platform: Platform, cfg: LbmsConfig, rng,
                   run: int = 0) -> LbmsBenchRow:
    """Detections over `traces` longer-branch traces plus as many short-branch ones."""
    victim = victim_factory(delta)
    long_path = platform.compile(victim, {'guess': 1 - victim.secrets['s']})
    short_path = platform.compile(victim, {'guess': victim.secrets['s']})
    detections = sum(
        lbms_detect(lbms_trace(long_path, platform, cfg, rng, f'lbms-{delta}-{run}-long-{i}'), cfg)
        for i in range(traces)
    )
    short = sum(
        lbms_detect(lbms_trace(short_path, platform, cfg, rng, f'lbms-{delta}-{run}-short-{i}'), cfg)
        for i in range(traces)
    )
    return LbmsBenchRow(delta, traces, int(detections), int(short))


@dataclass
class MemcmpResult:
    recovered: str
    interrupts: int
    dss_interrupts: int
    ambiguous_positions: List[int] = field(default_factory=list)
    length_means: Dict[int, float] = field(default_factory=dict)
    character_means: List[Dict[str, float]] = field(default_factory=list)


@dataclass
class CandidateMeasurement:
    counts: List[int]
    interrupts: int
    dss_interrupts: int

    def to_dict(self) -> dict:
        return {'counts': self.counts, 'interrupts': self.interrupts, 'dss_interrupts': self.dss_interrupts}

    @classmethod
    def from_dict(cls, data: Mapping) -> 'CandidateMeasurement':
        return cls(list(data['counts']), int(data['interrupts']), int(data['dss_interrupts']))


def measure_candidate(victim: VictimProgram, cfg: PssConfig, platform: Platform, seed: int, candidate: str,
                      samples: int, position: int, round_: int = 0) -> CandidateMeasurement:
    """`samples` PSS traces of one memcmp input on its own (seed, position, round, candidate) stream."""
    rng = stream(seed, MEMCMP_STREAM, position + 1, round_, *candidate.encode())
    compiled = platform.compile(victim, {'input': candidate})
    counts, interrupts = [], 0
    for index in range(samples):
        record = pss_trace(compiled, platform, cfg, rng, f'memcmp-{position}-{candidate}-{round_}-{index}')
        interrupts += record.interrupts
        if not record.aborted:
            counts.append(record.step_count)
    return CandidateMeasurement(counts, interrupts, compiled.retired_before_boundary() * samples)


class MemcmpAttack:
    """Length phase then one PSS argmax per character position.

    `dispatch` maps a list of (candidate, samples, position, round) jobs to
    CandidateMeasurements in job order; by default the jobs run in-process.
    """

    def __init__(self, victim: VictimProgram, cfg: PssConfig, platform: Platform, seed: int,
                 charset: str = MEMCMP_CHARSET, max_length: int = MEMCMP_MAX_LENGTH, pad: Optional[str] = None,
                 dispatch: Optional[Callable[[List[tuple]], List[CandidateMeasurement]]] = None):
        self.victim = victim
        self.cfg = cfg
        self.platform = platform
        self.seed = seed
        self.charset = charset
        self.max_length = max_length
        self.pad = pad or charset[0]
        self.dispatch = dispatch or self.measure_all
        self.interrupts = 0
        self.dss_interrupts = 0
        self.ambiguous: List[int] = []

    def measure_all(self, jobs: List[tuple]) -> List[CandidateMeasurement]:
        return [measure_candidate(self.victim, self.cfg, self.platform, self.seed, *job) for job in jobs]

    def _collect(self, candidates: Mapping[object, str], keys: Sequence, position: int, round_: int, totals):
        samples = self.cfg.samples_per_guess
        jobs = [(candidates[key], samples, position, round_) for key in keys]
        for key, measurement in zip(keys, self.dispatch(jobs)):
            self.interrupts += measurement.interrupts
            self.dss_interrupts += measurement.dss_interrupts
            totals[key] = totals.get(key, []) + measurement.counts

    def argmax_phase(self, candidates: Mapping[object, str], position: int) -> Tuple[object, Dict[object, float]]:
        totals: Dict[object, List[int]] = {}
        self._collect(candidates, list(candidates), position, 0, totals)
        means = self._means(totals)
        best = self._leaders(means)
        if len(best) > 1:
            logger.warning(f"memcmp phase {position}: tie between {best}; resampling once")
            self._collect(candidates, best, position, 1, totals)
            means = self._means(totals)
            best = self._leaders({key: means[key] for key in best})
            if len(best) > 1:
                self.ambiguous.append(position)
                logger.warning(f"memcmp phase {position}: still ambiguous between {best}")
        return best[0], means

    @staticmethod
    def _means(totals):
        means = {}
        for key, counts in totals.items():
            if not counts:
                raise InconclusiveResultError("every memcmp trace hit the interrupt cap", candidate=key)
            means[key] = float(np.mean(counts))
        return means

    @staticmethod
    def _leaders(means):
        top = max(means.values())
        return sorted(key for key, value in means.items() if value == top)

    def run(self) -> MemcmpResult:
        length_candidates = {length: self.pad * length for length in range(1, self.max_length + 1)}
        length, length_means = self.argmax_phase(length_candidates, -1)
        logger.info(f"memcmp: length {length}")
        prefix = ''
        char_means = []
        for position in range(length):
            tail = self.pad * (length - position - 1)
            candidates = {char: prefix + char + tail for char in self.charset}
            char, means = self.argmax_phase(candidates, position)
            prefix += char
            char_means.append(means)
            logger.info(f"memcmp: position {position} -> {char}")
        return MemcmpResult(
            recovered=prefix,
            interrupts=self.interrupts,
            dss_interrupts=self.dss_interrupts,
            ambiguous_positions=list(self.ambiguous),
            length_means=length_means,
            character_means=char_means,
        )


def memcmp_attack(victim: VictimProgram, cfg: PssConfig, platform: Platform, seed: int,
                  charset: str = MEMCMP_CHARSET, max_length: int = MEMCMP_MAX_LENGTH, dispatch=None) -> MemcmpResult:
    return MemcmpAttack(victim, cfg, platform, seed, charset, max_length, dispatch=dispatch).run()


def oracle_classifier() -> GroundTruthOracle:
    return GroundTruthOracle()
