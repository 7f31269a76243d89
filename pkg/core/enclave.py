"""
Cycle-level discrete-event model of an AEX-Notify enclave.

Time is kept in integer ticks (TICKS_PER_CYCLE per cycle) so fractional
instruction costs such as 0.25 cycles accumulate without drift. A trace starts
at stage-II mitigation entry (the single-steppable stage-I prologue is folded
into the start marker) and ends at the first boundary page fault.
"""
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from typing import Dict, Mapping, Optional, Tuple

from .exceptions import ConfigurationError, MalformedVictimError, UsageError

logger = logging.getLogger(__name__)

TICKS_PER_CYCLE = 1000

CODE_PAGE = 0
START_PAGE = 1
STOP_PAGE = 2


def as_fraction(value) -> Fraction:
    """Exact rational for a config value; floats go through their decimal repr."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        return Fraction(repr(value))
    return Fraction(value)


def cost_to_ticks(cycles) -> int:
    ticks = as_fraction(cycles) * TICKS_PER_CYCLE
    if ticks.denominator != 1:
        raise ConfigurationError(
            "cycle cost is not representable at tick resolution",
            cycles=cycles,
            ticks_per_cycle=TICKS_PER_CYCLE,
        )
    return int(ticks)


def time_to_ticks(cycles: float) -> int:
    """Arrival times are continuous; they are rounded to the nearest tick."""
    return int(round(float(cycles) * TICKS_PER_CYCLE))


def ticks_to_cycles(ticks: int) -> Fraction:
    return Fraction(ticks, TICKS_PER_CYCLE)


class Phase(str, Enum):
    ERESUME = 'eresume'
    RESTORE = 'restore'
    PTE_CHECK = 'pte_check'
    WARMUP = 'warmup'
    NOP_SLIDE = 'nop_slide'
    ENCLAVE = 'enclave'


class Cause(str, Enum):
    IPI = 'ipi'
    PAGE_FAULT = 'page_fault'


@dataclass(frozen=True)
class InstructionSpec:
    opcode_tag: str
    base_cost: Fraction
    memory_dependent: bool
    page_id: int = CODE_PAGE
    # same-opcode neighbours retiring in the same slot
    retire_width: int = 1

    def __post_init__(self):
        object.__setattr__(self, 'base_cost', as_fraction(self.base_cost))
        if self.base_cost <= 0:
            raise ConfigurationError("instruction base_cost must be positive", opcode=self.opcode_tag)
        if self.page_id < 0:
            raise ConfigurationError("page_id must be non-negative", opcode=self.opcode_tag)
        if self.retire_width < 1:
            raise ConfigurationError("retire_width must be at least 1", opcode=self.opcode_tag)

    def on_page(self, page_id: int) -> 'InstructionSpec':
        return replace(self, page_id=page_id)

    def to_dict(self) -> dict:
        return {
            'opcode_tag': self.opcode_tag,
            'base_cost': str(self.base_cost),
            'memory_dependent': self.memory_dependent,
            'page_id': self.page_id,
            'retire_width': self.retire_width,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> 'InstructionSpec':
        return cls(
            opcode_tag=data['opcode_tag'],
            base_cost=Fraction(data['base_cost']),
            memory_dependent=bool(data['memory_dependent']),
            page_id=int(data.get('page_id', CODE_PAGE)),
            retire_width=int(data.get('retire_width', 1)),
        )


def effective_cost(inst: InstructionSpec, cache_enabled: bool, slowdown) -> Fraction:
    """Cycles one instruction occupies; the slowdown only hits uncached memory work."""
    slowdown = as_fraction(slowdown)
    if slowdown <= 0:
        raise ConfigurationError("slowdown must be positive", slowdown=slowdown)
    if slowdown < 1:
        raise ConfigurationError("slowdown below 1 would speed instructions up", slowdown=slowdown)
    if cache_enabled or not inst.memory_dependent:
        return inst.base_cost
    return inst.base_cost * slowdown


class OpcodeTable:
    """Opcode tag -> instruction template plus per-opcode cache-off slowdown."""

    def __init__(self, entries: Mapping[str, Mapping], default_slowdown):
        self.default_slowdown = as_fraction(default_slowdown)
        self._templates: Dict[str, InstructionSpec] = {}
        self._slowdowns: Dict[str, Fraction] = {}
        for tag, entry in entries.items():
            self._templates[tag] = InstructionSpec(
                opcode_tag=tag,
                base_cost=entry['base_cost'],
                memory_dependent=bool(entry.get('memory_dependent', False)),
                retire_width=int(entry.get('retire_width', 1)),
            )
            if entry.get('slowdown') is not None:
                self._slowdowns[tag] = as_fraction(entry['slowdown'])
        effective_cost(InstructionSpec('check', 1, True), False, self.default_slowdown)

    @classmethod
    def from_profile(cls, profile: Mapping) -> 'OpcodeTable':
        enclave = profile['enclave']
        return cls(enclave['opcodes'], enclave['slowdown'])

    def __contains__(self, tag):
        return tag in self._templates

    def instruction(self, tag: str, page_id: int = CODE_PAGE) -> InstructionSpec:
        try:
            template = self._templates[tag]
        except KeyError:
            raise ConfigurationError("unknown opcode", opcode=tag)
        return template if page_id == template.page_id else template.on_page(page_id)

    def run(self, tag: str, count: int):
        inst = self.instruction(tag)
        return tuple(inst for _ in range(count))

    def slowdown_for(self, tag: str) -> Fraction:
        return self._slowdowns.get(tag, self.default_slowdown)

    def cost(self, inst: InstructionSpec, cache_enabled: bool) -> Fraction:
        return effective_cost(inst, cache_enabled, self.slowdown_for(inst.opcode_tag))


@dataclass(frozen=True)
class MitigationModel:
    restore_cost: Fraction
    pte_check_cost: Fraction
    warmup_iterations: int
    warmup_cost_uncached: Fraction
    warmup_cost_cached: Fraction
    nop_slide_length: int = 20
    nop_cost: Fraction = Fraction(1)
    nop_probability: float = 0.5
    eresume_cost: Fraction = Fraction(0)

    def __post_init__(self):
        for name in ('restore_cost', 'pte_check_cost', 'warmup_cost_uncached',
                     'warmup_cost_cached', 'nop_cost', 'eresume_cost'):
            value = as_fraction(getattr(self, name))
            if value < 0:
                raise ConfigurationError("mitigation costs must be non-negative", field=name)
            object.__setattr__(self, name, value)
        if self.warmup_iterations < 0 or self.nop_slide_length < 0:
            raise ConfigurationError("mitigation counts must be non-negative")
        if not 0.0 <= float(self.nop_probability) <= 1.0:
            raise ConfigurationError("nop_probability must lie in [0, 1]", nop_probability=self.nop_probability)

    @classmethod
    def from_profile(cls, profile: Mapping) -> 'MitigationModel':
        m = profile['mitigation']
        return cls(
            restore_cost=m['restore_cost'],
            pte_check_cost=m['pte_check_cost'],
            warmup_iterations=int(m['warmup_iterations']),
            warmup_cost_uncached=m['warmup_iteration_cost_uncached'],
            warmup_cost_cached=m['warmup_iteration_cost_cached'],
            nop_slide_length=int(m['nop_slide_length']),
            nop_cost=m['nop_cost'],
            nop_probability=float(m['nop_probability']),
            eresume_cost=m.get('eresume_cost', 0),
        )

    def warmup_iteration_cost(self, cache_enabled: bool) -> Fraction:
        return self.warmup_cost_cached if cache_enabled else self.warmup_cost_uncached

    def phases(self, r_bit: int, cache_enabled: bool) -> Tuple[Tuple[Phase, Fraction], ...]:
        phases = [
            (Phase.ERESUME, self.eresume_cost),
            (Phase.RESTORE, self.restore_cost),
            (Phase.PTE_CHECK, self.pte_check_cost),
            (Phase.WARMUP, self.warmup_iterations * self.warmup_iteration_cost(cache_enabled)),
        ]
        if r_bit:
            phases.append((Phase.NOP_SLIDE, self.nop_slide_length * self.nop_cost))
        return tuple(phases)


def mitigation_duration(m: MitigationModel, r: int, cache_enabled: bool) -> Fraction:
    return sum((cost for _, cost in m.phases(r, cache_enabled)), Fraction(0))


@dataclass(frozen=True)
class ProgramCounter:
    """eRIP analog: block and offset of the next instruction to retire."""
    block_index: int
    instruction_index: int


@dataclass(frozen=True)
class SavedParams:
    tickle_token: int
    r_bit: int


@dataclass(frozen=True)
class RetireGroup:
    start: int
    end: int
    cost: int
    opcode_tag: str
    boundary_page: Optional[int] = None


@dataclass(frozen=True)
class CompiledVictim:
    """A victim path resolved for one input binding and one cache setting."""
    name: str
    instructions: Tuple[InstructionSpec, ...]
    locations: Tuple[ProgramCounter, ...]
    groups: Tuple[RetireGroup, ...]
    boundary_pages: frozenset
    group_at: Mapping[int, int] = field(repr=False, default_factory=dict)

    def program_counter(self, position: int) -> ProgramCounter:
        if position < len(self.locations):
            return self.locations[position]
        if self.locations:
            last = self.locations[-1]
            return ProgramCounter(last.block_index, last.instruction_index + 1)
        return ProgramCounter(0, 0)

    def cycles_between(self, start: int = 0, stop: Optional[int] = None) -> Fraction:
        """Cycles from position `start` up to the boundary touch (or `stop`)."""
        total = 0
        for group in self.groups[self.group_at[start]:]:
            if group.boundary_page is not None or (stop is not None and group.start >= stop):
                break
            total += group.cost
        return ticks_to_cycles(total)

    def retired_before_boundary(self) -> int:
        for group in self.groups:
            if group.boundary_page is not None:
                return group.start
        return len(self.instructions)


def compile_victim(victim, inputs: Mapping, opcodes: OpcodeTable, cache_enabled: bool) -> CompiledVictim:
    """Resolve guards and fold the path into retire groups with tick costs."""
    resolved = victim.resolve(inputs)
    instructions = tuple(inst for _, _, inst in resolved)
    locations = tuple(ProgramCounter(block, offset) for block, offset, _ in resolved)
    groups = []
    group_at = {}
    position = 0
    while position < len(instructions):
        inst = instructions[position]
        group_at[position] = len(groups)
        if inst.page_id in victim.boundary_pages:
            groups.append(RetireGroup(position, position + 1, 0, inst.opcode_tag, inst.page_id))
            position += 1
            continue
        end = position + 1
        while (end < len(instructions) and end - position < inst.retire_width
               and instructions[end].opcode_tag == inst.opcode_tag
               and instructions[end].page_id not in victim.boundary_pages):
            end += 1
        ticks = sum(cost_to_ticks(opcodes.cost(instructions[i], cache_enabled)) for i in range(position, end))
        groups.append(RetireGroup(position, end, ticks, inst.opcode_tag))
        position = end
    group_at[position] = len(groups)
    return CompiledVictim(
        name=victim.name,
        instructions=instructions,
        locations=locations,
        groups=tuple(groups),
        boundary_pages=frozenset(victim.boundary_pages),
        group_at=group_at,
    )


@dataclass(frozen=True)
class EnclaveState:
    trace_id: str
    program_counter: ProgramCounter = ProgramCounter(0, 0)
    position: int = 0
    cycle_clock: int = 0
    cache_enabled: bool = False
    in_mitigation: bool = False
    phase: Optional[Phase] = None
    saved_params: Optional[SavedParams] = None
    aexnotify_bit: bool = False
    finished: bool = False
    resumes: int = 0


@dataclass(frozen=True)
class AexEvent:
    trace_id: str
    sequence: int
    cause: Cause
    at_cycle: Fraction
    landing: int
    erip: ProgramCounter
    position: int
    faulting_page: Optional[int]
    r_bit: int
    cache_enabled: bool
    phase: Phase
    # ticks since the resume that produced this event
    elapsed: int
    mitigation_end: int
    earp_opcode: Optional[str] = None

    @property
    def is_mitigation_landing(self) -> bool:
        return self.landing < 0

    @property
    def is_zero_step(self) -> bool:
        return self.cause == Cause.IPI and self.landing == 0

    @property
    def elapsed_cycles(self) -> Fraction:
        return ticks_to_cycles(self.elapsed)


def _phase_at(phases, m_ticks: int) -> Phase:
    edge = 0
    for phase, cost in phases:
        edge += cost_to_ticks(cost)
        if m_ticks < edge:
            return phase
    return Phase.ENCLAVE


def resume_and_run(state: EnclaveState, victim: CompiledVictim, m: MitigationModel,
                   interrupt_at: Optional[float], rng) -> Tuple[EnclaveState, AexEvent]:
    """Resume the enclave and run until the IPI lands or a boundary page faults.

    `interrupt_at` is measured in cycles from the resume. Saved tickle
    parameters (and with them the r bit) are restored after a mitigation
    landing; any other resume samples fresh ones.
    """
    if state.finished:
        raise UsageError("trace already reached its closing boundary", trace_id=state.trace_id)

    if state.saved_params is not None:
        saved = state.saved_params
    else:
        saved = SavedParams(
            tickle_token=int(rng.integers(0, 2 ** 32)),
            r_bit=int(rng.random() < m.nop_probability),
        )

    phases = m.phases(saved.r_bit, state.cache_enabled)
    mitigation_end = sum(cost_to_ticks(cost) for _, cost in phases)
    arrival = None if interrupt_at is None else time_to_ticks(interrupt_at)
    if arrival is not None and arrival < 0:
        raise UsageError("interrupt cannot arrive before the resume", interrupt_at=interrupt_at)
    aexnotify = state.aexnotify_bit or arrival is None or arrival >= cost_to_ticks(m.eresume_cost + m.restore_cost)
    sequence = state.resumes
    earp = victim.instructions[state.position].opcode_tag if state.position < len(victim.instructions) else None

    def make_event(cause, elapsed, landing, position, phase, page=None):
        return AexEvent(
            trace_id=state.trace_id,
            sequence=sequence,
            cause=cause,
            at_cycle=ticks_to_cycles(state.cycle_clock + elapsed),
            landing=landing,
            erip=victim.program_counter(position),
            position=position,
            faulting_page=page,
            r_bit=saved.r_bit,
            cache_enabled=state.cache_enabled,
            phase=phase,
            elapsed=elapsed,
            mitigation_end=mitigation_end,
            earp_opcode=earp,
        )

    if arrival is not None and arrival < mitigation_end:
        phase = _phase_at(phases, arrival)
        event = make_event(Cause.IPI, arrival, -1, state.position, phase)
        new_state = replace(
            state,
            cycle_clock=state.cycle_clock + arrival,
            in_mitigation=True,
            phase=phase,
            saved_params=saved,
            aexnotify_bit=aexnotify,
            resumes=state.resumes + 1,
        )
        return new_state, event

    clock = mitigation_end
    position = state.position
    try:
        index = victim.group_at[position]
    except KeyError:
        raise UsageError("program counter is not at a retire boundary", position=position)
    while True:
        if index >= len(victim.groups):
            raise MalformedVictimError(
                "victim exhausted its blocks without touching a boundary page",
                victim=victim.name,
            )
        group = victim.groups[index]
        if group.boundary_page is not None:
            event = make_event(Cause.PAGE_FAULT, clock, position - state.position, position,
                               Phase.ENCLAVE, group.boundary_page)
            break
        retire_at = clock + group.cost
        if arrival is not None and arrival < retire_at:
            event = make_event(Cause.IPI, arrival, position - state.position, position, Phase.ENCLAVE)
            break
        clock = retire_at
        position = group.end
        index += 1

    new_state = replace(
        state,
        program_counter=victim.program_counter(position),
        position=position,
        cycle_clock=state.cycle_clock + event.elapsed,
        in_mitigation=False,
        phase=Phase.ENCLAVE,
        saved_params=None,
        aexnotify_bit=aexnotify,
        finished=event.cause == Cause.PAGE_FAULT,
        resumes=state.resumes + 1,
    )
    return new_state, event


def ground_truth_step_count(prev: AexEvent, cur: AexEvent) -> int:
    """Retired-instruction delta between two eRIPs; evaluation code only."""
    if prev.trace_id != cur.trace_id:
        raise UsageError("events come from different traces", prev=prev.trace_id, cur=cur.trace_id)
    return cur.position - prev.position


class EnclaveSession:
    """One boundary-to-boundary trace of a compiled victim."""

    def __init__(self, compiled: CompiledVictim, mitigation: MitigationModel, rng,
                 trace_id: str, cache_enabled: bool = False):
        self.compiled = compiled
        self.mitigation = mitigation
        self.rng = rng
        self.state = EnclaveState(trace_id=trace_id, cache_enabled=cache_enabled)
        self.events = []

    @property
    def finished(self) -> bool:
        return self.state.finished

    def resume(self, interrupt_at: Optional[float]) -> AexEvent:
        self.state, event = resume_and_run(self.state, self.compiled, self.mitigation, interrupt_at, self.rng)
        self.events.append(event)
        logger.debug(f"{event.trace_id}#{event.sequence}: {event.cause.value} landing={event.landing}")
        return event
