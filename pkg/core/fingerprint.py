"""
Contention fingerprints of the stage-II mitigation and the interrupt classifier.

The generator replaces hardware idle-cycle sampling: every phase of the
mitigation holds the sibling core's idle-cycle rate at a characteristic level,
the EARP runs at an opcode-specific level and after the exit the core idles.
Each sample integrates that piecewise-constant curve over one sampling period.
"""
import csv
import logging
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .enclave import AexEvent, Cause, MitigationModel, ticks_to_cycles
from .exceptions import TrainingError, UsageError
from .forest import RandomForest
from .func import performance_monitor

logger = logging.getLogger(__name__)

TRACE_LENGTH = 120
MODEL_FORMAT_VERSION = 1


class InterruptClass(IntEnum):
    MITIGATION = 0
    ZERO_STEP = 1
    STEP = 2

    @classmethod
    def from_landing(cls, landing: int) -> 'InterruptClass':
        if landing < 0:
            return cls.MITIGATION
        return cls.ZERO_STEP if landing == 0 else cls.STEP

    @property
    def label(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class TraceShape:
    samples: int = TRACE_LENGTH
    sample_period: float = 18.0
    contention_jitter: float = 0.001
    levels: Mapping[str, float] = field(default_factory=lambda: {
        'eresume': 20.0, 'restore': 20.0, 'pte_check': 35.0, 'warmup': 60.0, 'nop_slide': 12.0, 'exited': 4.0,
    })
    earp_levels: Mapping[str, float] = field(default_factory=lambda: {'nop': 85.0, 'addl': 85.0, 'default': 70.0})
    # cycles the sibling stays busy after the exit, per EARP opcode
    drain_cycles: Mapping[str, float] = field(default_factory=lambda: {'nop': 30.0})

    @classmethod
    def from_profile(cls, profile: Mapping) -> 'TraceShape':
        section = profile['fingerprint']
        return cls(
            samples=int(section['samples']),
            sample_period=float(section['sample_period']),
            contention_jitter=float(section['contention_jitter']),
            levels=dict(section['levels']),
            earp_levels=dict(section['earp_levels']),
            drain_cycles=dict(section.get('drain_cycles') or {}),
        )

    def earp_level(self, opcode: Optional[str]) -> float:
        return float(self.earp_levels.get(opcode, self.earp_levels['default']))

    def drain(self, opcode: Optional[str]) -> float:
        return float(self.drain_cycles.get(opcode, self.drain_cycles.get('default', 0.0)))


@dataclass(frozen=True)
class CounterTrace:
    samples: np.ndarray
    fire_delay: float = 0.0
    seed: Optional[int] = None

    def __post_init__(self):
        if self.samples.ndim != 1:
            raise UsageError("counter trace must be one-dimensional")
        if np.any(self.samples < 0):
            raise UsageError("idle-cycle counts cannot be negative")


def mean_curve(event: AexEvent, m: MitigationModel, shape: TraceShape, stretch: float = 1.0) -> np.ndarray:
    """Noise-free samples for one AEX; `stretch` scales the timeline."""
    segments = []
    start = 0.0
    for phase, cost in m.phases(event.r_bit, event.cache_enabled):
        end = start + float(cost) * stretch
        segments.append((start, end, shape.levels[phase.value]))
        start = end
    exit_at = float(ticks_to_cycles(event.elapsed)) * stretch
    if event.landing < 0:
        clipped = []
        for seg_start, seg_end, level in segments:
            if seg_start >= exit_at:
                break
            clipped.append((seg_start, min(seg_end, exit_at), level))
        segments = clipped
    else:
        # the EARP keeps the sibling busy until its in-flight work drains
        exit_at = max(start, exit_at) + shape.drain(event.earp_opcode) * stretch
        segments.append((start, exit_at, shape.earp_level(event.earp_opcode)))
    horizon = shape.samples * shape.sample_period
    segments.append((exit_at, max(horizon, exit_at), shape.levels['exited']))

    edges = np.arange(shape.samples + 1) * shape.sample_period
    lo, hi = edges[:-1], edges[1:]
    curve = np.zeros(shape.samples)
    for seg_start, seg_end, level in segments:
        overlap = np.clip(np.minimum(hi, seg_end) - np.maximum(lo, seg_start), 0.0, None)
        curve += level * overlap
    return curve / shape.sample_period


def class_mean_curves(events: Iterable[AexEvent], m: MitigationModel,
                      shape: TraceShape) -> Dict[InterruptClass, np.ndarray]:
    """Average noise-free curve of each interrupt class present in `events`."""
    grouped: Dict[InterruptClass, List[np.ndarray]] = {}
    for event in events:
        if event.cause != Cause.IPI:
            continue
        grouped.setdefault(InterruptClass.from_landing(event.landing), []).append(mean_curve(event, m, shape))
    return {cls: np.mean(curves, axis=0) for cls, curves in grouped.items()}


def separability_margin(first: np.ndarray, second: np.ndarray, noise_std: float) -> float:
    """Largest per-sample gap between two mean curves, in units of counter noise."""
    gap = float(np.max(np.abs(np.asarray(first) - np.asarray(second))))
    if noise_std <= 0:
        return np.inf if gap > 0 else 0.0
    return gap / noise_std


def generator_margins(events: Iterable[AexEvent], m: MitigationModel, shape: TraceShape,
                      noise_std: float) -> Dict[str, float]:
    curves = class_mean_curves(events, m, shape)
    margins = {}
    for first, second in ((InterruptClass.MITIGATION, InterruptClass.STEP),
                          (InterruptClass.ZERO_STEP, InterruptClass.STEP),
                          (InterruptClass.MITIGATION, InterruptClass.ZERO_STEP)):
        if first in curves and second in curves:
            margins[f'{first.label}-{second.label}'] = separability_margin(curves[first], curves[second], noise_std)
    return margins


def synthesize_trace(event: AexEvent, m: MitigationModel, noise_std: float, rng,
                     shape: TraceShape = TraceShape(), fire_delay: float = 0.0,
                     seed: Optional[int] = None) -> CounterTrace:
    if event.cause != Cause.IPI:
        raise UsageError("only interrupt exits carry a contention fingerprint", cause=event.cause.value)
    stretch = 1.0
    if shape.contention_jitter > 0:
        stretch += shape.contention_jitter * rng.standard_normal()
    samples = mean_curve(event, m, shape, stretch)
    if noise_std > 0:
        samples = samples + rng.normal(0.0, noise_std, shape.samples)
    return CounterTrace(np.clip(samples, 0.0, None), fire_delay=fire_delay, seed=seed)


def features(samples: np.ndarray) -> np.ndarray:
    """Raw samples followed by their first differences."""
    samples = np.atleast_2d(samples)
    return np.hstack([samples, np.diff(samples, axis=1)])


@dataclass
class ClassifierModel:
    forest: RandomForest
    class_counts: Mapping[str, int]
    seed: int
    profile_hash: str = ''
    trace_length: int = TRACE_LENGTH

    def predict_samples(self, samples: np.ndarray) -> np.ndarray:
        return self.forest.predict(features(samples))

    def label_interrupts(self, traces: Sequence[CounterTrace], events: Sequence[AexEvent] = ()) -> List[InterruptClass]:
        if not traces:
            return []
        stacked = np.vstack([trace.samples for trace in traces])
        return [InterruptClass(int(label)) for label in self.predict_samples(stacked)]

    def to_dict(self) -> dict:
        return {
            'format_version': MODEL_FORMAT_VERSION,
            'seed': self.seed,
            'profile_hash': self.profile_hash,
            'class_counts': dict(self.class_counts),
            'trace_length': self.trace_length,
            'feature_mode': 'raw+diff',
            'forest': self.forest.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> 'ClassifierModel':
        if data.get('format_version') != MODEL_FORMAT_VERSION:
            raise UsageError("unsupported model format", format_version=data.get('format_version'))
        return cls(
            forest=RandomForest.from_dict(data['forest']),
            class_counts=data['class_counts'],
            seed=data['seed'],
            profile_hash=data.get('profile_hash', ''),
            trace_length=data.get('trace_length', TRACE_LENGTH),
        )


class GroundTruthOracle:
    """Debug-mode classifier that reads the landing straight off the event."""

    def label_interrupts(self, traces: Sequence[CounterTrace], events: Sequence[AexEvent]) -> List[InterruptClass]:
        return [InterruptClass.from_landing(event.landing) for event in events]


def predict(model: ClassifierModel, trace: CounterTrace) -> InterruptClass:
    return InterruptClass(int(model.predict_samples(trace.samples)[0]))


@performance_monitor
def train(labeled: Iterable[Tuple[CounterTrace, InterruptClass]], n_trees: int = 100, max_depth: int = 12,
          seed: int = 0, max_features='sqrt', min_samples_leaf: int = 1, profile_hash: str = '') -> ClassifierModel:
    labeled = list(labeled)
    if not labeled:
        raise TrainingError("no labeled traces supplied")
    X = features(np.vstack([trace.samples for trace, _ in labeled]))
    y = np.asarray([int(label) for _, label in labeled], dtype=np.int64)
    present = sorted(set(y.tolist()))
    if len(present) < 2:
        raise TrainingError("training needs at least two interrupt classes", classes=present)
    forest = RandomForest(n_trees=n_trees, max_depth=max_depth, max_features=max_features,
                          min_samples_leaf=min_samples_leaf, seed=seed).fit(X, y)
    counts = {cls.label: int(np.sum(y == cls)) for cls in InterruptClass}
    logger.info(f"trained forest on {len(y)} traces: {counts}")
    return ClassifierModel(forest=forest, class_counts=counts, seed=seed, profile_hash=profile_hash,
                           trace_length=X.shape[1] // 2 + 1)


def classification_report(truth: Sequence[int], predicted: Sequence[int]) -> dict:
    """Per-class precision/recall/F1 from the 3x3 confusion matrix (rows = truth)."""
    truth = np.asarray(truth, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    if truth.size == 0:
        raise UsageError("cannot evaluate an empty test set")
    n = len(InterruptClass)
    confusion = np.zeros((n, n), dtype=np.int64)
    np.add.at(confusion, (truth, predicted), 1)
    per_class = {}
    for cls in InterruptClass:
        tp = confusion[cls, cls]
        predicted_total = confusion[:, cls].sum()
        support = confusion[cls, :].sum()
        precision = tp / predicted_total if predicted_total else 0.0
        recall = tp / support if support else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class[cls.label] = {
            'precision': float(precision),
            'recall': float(recall),
            'f1': float(f1),
            'support': int(support),
        }
    return {
        'classes': per_class,
        'confusion': confusion.tolist(),
        'accuracy': float(np.trace(confusion) / confusion.sum()),
    }


def evaluate(model, test: Sequence[Tuple[CounterTrace, InterruptClass]]) -> dict:
    if not test:
        raise UsageError("cannot evaluate an empty test set")
    predicted = model.label_interrupts([trace for trace, _ in test], [])
    return classification_report([int(label) for _, label in test], [int(label) for label in predicted])


def write_corpus(path, labeled: Sequence[Tuple[CounterTrace, InterruptClass]]):
    length = len(labeled[0][0].samples) if labeled else TRACE_LENGTH
    header = [f's{index:03d}[idle_cycles]' for index in range(length)] + ['label']
    with open(path, 'w', newline='') as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for trace, label in labeled:
            writer.writerow([f'{value:.6f}' for value in trace.samples] + [label.label])


def read_corpus(path) -> List[Tuple[CounterTrace, InterruptClass]]:
    by_name = {cls.label: cls for cls in InterruptClass}
    labeled = []
    with open(path, newline='') as handle:
        reader = csv.reader(handle)
        next(reader)
        for row in reader:
            samples = np.asarray([float(value) for value in row[:-1]])
            labeled.append((CounterTrace(samples), by_name[row[-1]]))
    return labeled
