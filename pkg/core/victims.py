"""
Victim programs: abstract instruction streams framed by boundary pages.

A program is a list of blocks, each guarded by a predicate over secret and
attacker-controlled variables. Entering the trace touches the start page;
the closing `touch` on the stop page ends it with a page fault.
"""
import logging
import string
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Optional, Tuple

from .enclave import START_PAGE, STOP_PAGE, InstructionSpec, OpcodeTable
from .exceptions import ConfigurationError, MalformedVictimError, UsageError

logger = logging.getLogger(__name__)

NONCE_BITS = 160
MEMCMP_CHARSET = string.ascii_uppercase
MEMCMP_MAX_LENGTH = 8


class GuardKind(str, Enum):
    EQUALS = 'eq'
    NOT_EQUALS = 'ne'
    MSB_ONES = 'msb_ones'
    LEADING_ZEROS = 'leading_zeros'
    LENGTH_EQUALS = 'length_eq'
    PREFIX_MATCH = 'prefix_match'


def msb_ones(value: int, bits: int, width: int = NONCE_BITS) -> bool:
    return (value >> (width - bits)) == (1 << bits) - 1


def leading_zeros_at_least(value: int, zeros: int, width: int = NONCE_BITS) -> bool:
    return value < (1 << (width - zeros))


@dataclass(frozen=True)
class Guard:
    kind: GuardKind
    variable: str
    other: Optional[str] = None
    arg: Optional[int] = None

    def variables(self) -> Tuple[str, ...]:
        return (self.variable,) if self.other is None else (self.variable, self.other)

    def evaluate(self, env: Mapping) -> bool:
        value = env[self.variable]
        if self.kind == GuardKind.EQUALS:
            return value == env[self.other]
        if self.kind == GuardKind.NOT_EQUALS:
            return value != env[self.other]
        if self.kind == GuardKind.MSB_ONES:
            return msb_ones(value, self.arg)
        if self.kind == GuardKind.LEADING_ZEROS:
            return leading_zeros_at_least(value, self.arg)
        if self.kind == GuardKind.LENGTH_EQUALS:
            return len(value) == len(env[self.other])
        # prefix_match: equal lengths and the first `arg` characters agree
        secret = env[self.other]
        return len(value) == len(secret) and value[:self.arg] == secret[:self.arg]

    def to_dict(self) -> dict:
        data = {'kind': self.kind.value, 'variable': self.variable}
        if self.other is not None:
            data['other'] = self.other
        if self.arg is not None:
            data['arg'] = self.arg
        return data

    @classmethod
    def from_dict(cls, data: Mapping) -> 'Guard':
        try:
            kind = GuardKind(data['kind'])
        except ValueError:
            raise MalformedVictimError("unknown guard kind", kind=data.get('kind'))
        return cls(kind, data['variable'], data.get('other'), data.get('arg'))


@dataclass(frozen=True)
class Block:
    guard: Optional[Guard]
    instructions: Tuple[InstructionSpec, ...]


@dataclass(frozen=True)
class VictimProgram:
    name: str
    blocks: Tuple[Block, ...]
    boundary_pages: frozenset = frozenset({START_PAGE, STOP_PAGE})
    secret_env: Mapping[str, str] = field(default_factory=dict)
    inputs: Tuple[str, ...] = ()
    secrets: Mapping = field(default_factory=dict, repr=False)
    meta: Mapping = field(default_factory=dict)

    def __post_init__(self):
        declared = set(self.secret_env) | set(self.inputs)
        for index, block in enumerate(self.blocks):
            if block.guard is None:
                continue
            unknown = [name for name in block.guard.variables() if name not in declared]
            if unknown:
                raise MalformedVictimError(
                    "guard references undeclared variables", victim=self.name, block=index, names=unknown,
                )
        missing = [name for name in self.secret_env if name not in self.secrets]
        if missing:
            raise MalformedVictimError("secret variables left unbound", victim=self.name, names=missing)

    def resolve(self, inputs: Optional[Mapping] = None) -> Tuple[Tuple[int, int, InstructionSpec], ...]:
        """Flatten the blocks taken for this binding into (block, offset, instruction)."""
        inputs = dict(inputs or {})
        missing = [name for name in self.inputs if name not in inputs]
        if missing:
            raise UsageError("attacker inputs missing", victim=self.name, names=missing)
        env = {**self.secrets, **inputs}
        path = []
        for block_index, block in enumerate(self.blocks):
            if block.guard is not None and not block.guard.evaluate(env):
                continue
            path.extend((block_index, offset, inst) for offset, inst in enumerate(block.instructions))
        return tuple(path)

    def instruction_count(self, inputs: Optional[Mapping] = None) -> int:
        """Instructions retired between the start and stop boundary faults."""
        count = 0
        for _, _, inst in self.resolve(inputs):
            if inst.page_id in self.boundary_pages:
                return count
            count += 1
        raise MalformedVictimError("path never touches a boundary page", victim=self.name)

    def with_secrets(self, **secrets) -> 'VictimProgram':
        return VictimProgram(
            name=self.name,
            blocks=self.blocks,
            boundary_pages=self.boundary_pages,
            secret_env=self.secret_env,
            inputs=self.inputs,
            secrets={**self.secrets, **secrets},
            meta=self.meta,
        )

    def to_dict(self, include_secrets: bool = False) -> dict:
        data = {
            'name': self.name,
            'boundary_pages': sorted(self.boundary_pages),
            'secret_env': dict(self.secret_env),
            'inputs': list(self.inputs),
            'meta': dict(self.meta),
            'blocks': [
                {
                    'guard': None if block.guard is None else block.guard.to_dict(),
                    'instructions': [inst.to_dict() for inst in block.instructions],
                }
                for block in self.blocks
            ],
        }
        if include_secrets:
            data['secrets'] = {key: _encode_secret(value) for key, value in self.secrets.items()}
        return data

    @classmethod
    def from_dict(cls, data: Mapping, secrets: Optional[Mapping] = None) -> 'VictimProgram':
        blocks = tuple(
            Block(
                guard=None if entry.get('guard') is None else Guard.from_dict(entry['guard']),
                instructions=tuple(InstructionSpec.from_dict(inst) for inst in entry['instructions']),
            )
            for entry in data['blocks']
        )
        bound = {key: _decode_secret(value) for key, value in data.get('secrets', {}).items()}
        bound.update(secrets or {})
        return cls(
            name=data['name'],
            blocks=blocks,
            boundary_pages=frozenset(data.get('boundary_pages', (START_PAGE, STOP_PAGE))),
            secret_env=data.get('secret_env', {}),
            inputs=tuple(data.get('inputs', ())),
            secrets=bound,
            meta=data.get('meta', {}),
        )


def _encode_secret(value):
    return hex(value) if isinstance(value, int) and not isinstance(value, bool) else value


def _decode_secret(value):
    if isinstance(value, str) and value.startswith('0x'):
        return int(value, 16)
    return value


def _closing(opcodes: OpcodeTable) -> Block:
    return Block(None, (opcodes.instruction('touch', STOP_PAGE),))


def make_delta_victim(delta: int, secret_bit: int, filler: str = 'nop', opcodes: OpcodeTable = None,
                      base_length: int = 10) -> VictimProgram:
    """Branch on `guess == s`: the equal arm runs base_length fillers, the other base_length + delta."""
    if delta < 0:
        raise ConfigurationError("delta must be non-negative", delta=delta)
    opcodes = opcodes or default_opcodes()
    return VictimProgram(
        name=f'delta-{delta}-{filler}',
        blocks=(
            Block(Guard(GuardKind.EQUALS, 'guess', 's'), opcodes.run(filler, base_length)),
            Block(Guard(GuardKind.NOT_EQUALS, 'guess', 's'), opcodes.run(filler, base_length + delta)),
            _closing(opcodes),
        ),
        secret_env={'s': 'bit'},
        inputs=('guess',),
        secrets={'s': int(secret_bit)},
        meta={'kind': 'delta', 'delta': delta, 'base_length': base_length, 'filler': filler},
    )


MEMCMP_LENGTH_BLOCK = ('load', 'load', 'cmp', 'jcc')
MEMCMP_COMPARE_BLOCK = ('load', 'load', 'cmp', 'jcc', 'inc', 'test')
MEMCMP_LOOP_EXIT = ('load', 'test', 'cmp', 'jcc', 'inc', 'test')


def validate_memcmp_secret(secret: str, charset: str = MEMCMP_CHARSET, max_length: int = MEMCMP_MAX_LENGTH):
    if not 1 <= len(secret) <= max_length:
        raise ConfigurationError("memcmp secret length out of bounds", length=len(secret), max_length=max_length)
    invalid = sorted(set(secret) - set(charset))
    if invalid:
        raise ConfigurationError("memcmp secret outside the charset", characters=''.join(invalid))


def make_memcmp_victim(secret: str, opcodes: OpcodeTable = None, charset: str = MEMCMP_CHARSET,
                       max_length: int = MEMCMP_MAX_LENGTH) -> VictimProgram:
    """Early-exit comparison of attacker `input` against `secret`.

    Compare block i runs when the lengths agree and the first i characters
    match. The loop-exit check only runs after a full match.
    """
    validate_memcmp_secret(secret, charset, max_length)
    opcodes = opcodes or default_opcodes()
    blocks = [Block(None, tuple(opcodes.instruction(tag) for tag in MEMCMP_LENGTH_BLOCK))]
    compare = tuple(opcodes.instruction(tag) for tag in MEMCMP_COMPARE_BLOCK)
    for index in range(len(secret)):
        blocks.append(Block(Guard(GuardKind.PREFIX_MATCH, 'input', 'secret', index), compare))
    blocks.append(Block(
        Guard(GuardKind.PREFIX_MATCH, 'input', 'secret', len(secret)),
        tuple(opcodes.instruction(tag) for tag in MEMCMP_LOOP_EXIT),
    ))
    blocks.append(_closing(opcodes))
    return VictimProgram(
        name='memcmp',
        blocks=tuple(blocks),
        secret_env={'secret': f'[{charset[0]}-{charset[-1]}]{{1,{max_length}}}'},
        inputs=('input',),
        secrets={'secret': secret},
        meta={'kind': 'memcmp', 'charset': charset, 'max_length': max_length},
    )


def memcmp_expected_count(secret: str, candidate: str) -> int:
    """Closed-form instruction count of the memcmp victim."""
    count = len(MEMCMP_LENGTH_BLOCK)
    if len(candidate) != len(secret):
        return count
    prefix = 0
    while prefix < len(secret) and candidate[prefix] == secret[prefix]:
        prefix += 1
    count += min(prefix + 1, len(secret)) * len(MEMCMP_COMPARE_BLOCK)
    if prefix == len(secret):
        count += len(MEMCMP_LOOP_EXIT)
    return count


def make_truncation_victim(nonce: int, opcodes: OpcodeTable = None, bias_bits: int = 15,
                           common_length: int = 40, extra_length: int = 52) -> VictimProgram:
    """Nonce truncation loop: a second iteration of `extra_length` addl for MsbOnes nonces."""
    opcodes = opcodes or default_opcodes()
    return VictimProgram(
        name='truncation',
        blocks=(
            Block(None, opcodes.run('addl', common_length)),
            Block(Guard(GuardKind.MSB_ONES, 'nonce', arg=bias_bits), opcodes.run('addl', extra_length)),
            _closing(opcodes),
        ),
        secret_env={'nonce': f'int[{NONCE_BITS}]'},
        secrets={'nonce': nonce},
        meta={'kind': 'truncation', 'bias_bits': bias_bits, 'common_length': common_length,
              'extra_length': extra_length},
    )


LZB_COMMON = 11
LZB_EXTRA = 2


def make_lzb_victim(nonce: int, opcodes: OpcodeTable = None, leading_zeros: int = 5) -> VictimProgram:
    """Scalar-multiplication gadget between two mp_copy boundaries: 12 or 14 instructions."""
    opcodes = opcodes or default_opcodes()
    return VictimProgram(
        name='lzb',
        blocks=(
            Block(None, opcodes.run('mov', LZB_COMMON)),
            Block(Guard(GuardKind.LEADING_ZEROS, 'nonce', arg=leading_zeros), opcodes.run('mov', LZB_EXTRA)),
            Block(None, (opcodes.instruction('call'),)),
            _closing(opcodes),
        ),
        secret_env={'nonce': f'int[{NONCE_BITS}]'},
        secrets={'nonce': nonce},
        meta={'kind': 'lzb', 'leading_zeros': leading_zeros},
    )


def uniform_filler_victim(length: int, filler: str, opcodes: OpcodeTable = None) -> VictimProgram:
    """Debug region of `length` identical instructions, used for stepping and corpus runs."""
    opcodes = opcodes or default_opcodes()
    return VictimProgram(
        name=f'{filler}-region-{length}',
        blocks=(Block(None, opcodes.run(filler, length)), _closing(opcodes)),
        meta={'kind': 'filler', 'length': length, 'filler': filler},
    )


DEFAULT_OPCODES = {
    'addl': {'base_cost': '5', 'memory_dependent': True},
    'nop': {'base_cost': '0.25', 'memory_dependent': True, 'slowdown': '38', 'retire_width': 2},
    'mov': {'base_cost': '1', 'memory_dependent': True, 'slowdown': '250'},
    'call': {'base_cost': '5', 'memory_dependent': True, 'slowdown': '60'},
    'cmp': {'base_cost': '5', 'memory_dependent': True},
    'jcc': {'base_cost': '5', 'memory_dependent': True},
    'inc': {'base_cost': '5', 'memory_dependent': True},
    'load': {'base_cost': '5', 'memory_dependent': True},
    'test': {'base_cost': '5', 'memory_dependent': True},
    'touch': {'base_cost': '5', 'memory_dependent': True},
}


def default_opcodes() -> OpcodeTable:
    return OpcodeTable(DEFAULT_OPCODES, default_slowdown='6')
