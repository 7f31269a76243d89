"""
IPI arrival model and the two attacker calibrations placed on top of it.
"""
import logging
import math
from collections import deque
from dataclasses import dataclass, replace
from enum import Enum
from typing import Mapping, Optional

import numpy as np
from scipy.stats import norm, truncnorm

from .exceptions import CalibrationError, ConfigurationError

logger = logging.getLogger(__name__)

MAX_REJECTIONS = 64


class PlanMode(str, Enum):
    PSS = 'pss'
    LBMS = 'lbms'


@dataclass(frozen=True)
class ArrivalDistribution:
    mean_offset: float
    std_dev: float
    truncate_at: float = 0.0

    def __post_init__(self):
        if self.std_dev < 0:
            raise ConfigurationError("std_dev must be non-negative", std_dev=self.std_dev)

    @classmethod
    def from_profile(cls, profile: Mapping) -> 'ArrivalDistribution':
        section = profile['interrupts']
        return cls(float(section['mean_offset']), float(section['std_dev']))


@dataclass(frozen=True)
class IpiPlan:
    fire_delay: float
    mode: PlanMode
    lbms_lower_bound: Optional[float] = None
    mitigation_end: Optional[float] = None

    def __post_init__(self):
        if self.fire_delay < 0:
            raise CalibrationError("fire_delay must be non-negative", fire_delay=self.fire_delay)
        if self.mode == PlanMode.LBMS and self.lbms_lower_bound is None:
            raise ConfigurationError("LBMS plans need a lower bound")

    def delayed(self, extra: float) -> 'IpiPlan':
        return replace(self, fire_delay=self.fire_delay + extra)

    def to_dict(self) -> dict:
        return {
            'fire_delay': self.fire_delay,
            'mode': self.mode.value,
            'lbms_lower_bound': self.lbms_lower_bound,
            'mitigation_end': self.mitigation_end,
        }


def sample_arrival(dist: ArrivalDistribution, plan: IpiPlan, rng) -> float:
    """One arrival time in cycles from the resume, truncated at zero by resampling."""
    mean = dist.mean_offset + plan.fire_delay
    if dist.std_dev == 0:
        if mean < dist.truncate_at:
            raise ConfigurationError("degenerate arrival distribution below the truncation point", mean=mean)
        return float(mean)
    for _ in range(MAX_REJECTIONS):
        value = rng.normal(mean, dist.std_dev)
        if value >= dist.truncate_at:
            return float(value)
    # far tail: invert the truncated CDF instead of rejecting forever
    low = (dist.truncate_at - mean) / dist.std_dev
    return float(truncnorm.ppf(rng.random(), low, np.inf, loc=mean, scale=dist.std_dev))


def sample_arrivals(dist: ArrivalDistribution, plan: IpiPlan, rng, size: int) -> np.ndarray:
    """Vectorised `sample_arrival` for Monte-Carlo checks."""
    mean = dist.mean_offset + plan.fire_delay
    if dist.std_dev == 0:
        return np.full(size, float(sample_arrival(dist, plan, rng)))
    values = rng.normal(mean, dist.std_dev, size)
    for _ in range(MAX_REJECTIONS):
        rejected = values < dist.truncate_at
        if not rejected.any():
            return values
        values[rejected] = rng.normal(mean, dist.std_dev, int(rejected.sum()))
    low = (dist.truncate_at - mean) / dist.std_dev
    rejected = values < dist.truncate_at
    values[rejected] = truncnorm.ppf(rng.random(int(rejected.sum())), low, np.inf, loc=mean, scale=dist.std_dev)
    return values


def quantile(dist: ArrivalDistribution, p: float) -> float:
    """Inverse CDF of the untruncated normal."""
    if not 0 < p < 1:
        raise ConfigurationError("quantile probability must lie in (0, 1)", p=p)
    return float(dist.mean_offset + dist.std_dev * norm.ppf(p))


def plan_quantile(dist: ArrivalDistribution, plan: IpiPlan, p: float) -> float:
    return quantile(dist, p) + plan.fire_delay


def calibrate_pss(dist: ArrivalDistribution, mitigation_end: float, tail_mass: float,
                  offset: float = 0.0) -> IpiPlan:
    """Place the arrival mean so that `tail_mass` of the IPIs arrive after the mitigation.

    `mitigation_end` is the r=0 duration. `offset` shifts the plan after
    calibration (used by deterministic profiles to aim inside the EARP).
    """
    if not 0 < tail_mass < 0.5:
        raise ConfigurationError("tail_mass must lie in (0, 0.5)", tail_mass=tail_mass)
    target_mean = mitigation_end - dist.std_dev * norm.ppf(1 - tail_mass) + offset
    fire_delay = target_mean - dist.mean_offset
    if fire_delay < 0:
        raise CalibrationError(
            "PSS calibration needs a negative fire delay",
            mitigation_end=mitigation_end,
            mean_offset=dist.mean_offset,
            fire_delay=round(fire_delay, 3),
        )
    plan = IpiPlan(fire_delay=float(fire_delay), mode=PlanMode.PSS, mitigation_end=float(mitigation_end))
    logger.info(f"PSS calibration: mean arrival {target_mean:.2f} cycles, fire_delay {fire_delay:.2f}")
    return plan


def calibrate_lbms(dist: ArrivalDistribution, mitigation_end: float, short_branch_cycles: float,
                   epsilon: float) -> IpiPlan:
    """Keep arrivals before mitigation_end + short_branch_cycles below probability epsilon."""
    if not 0 < epsilon <= 1e-3:
        raise ConfigurationError("LBMS epsilon must lie in (0, 1e-3]", epsilon=epsilon)
    bound = mitigation_end + short_branch_cycles
    target_mean = bound + dist.std_dev * norm.ppf(1 - epsilon)
    fire_delay = target_mean - dist.mean_offset
    if fire_delay < 0:
        raise CalibrationError(
            "LBMS bound lies before the bare interrupt latency",
            bound=bound,
            mean_offset=dist.mean_offset,
        )
    logger.info(f"LBMS calibration: bound {bound:.2f} cycles, mean arrival {target_mean:.2f}")
    return IpiPlan(
        fire_delay=float(fire_delay),
        mode=PlanMode.LBMS,
        lbms_lower_bound=float(bound),
        mitigation_end=float(mitigation_end),
    )


class NopSlideAdapter:
    """Delays the IPI by one NOP slide when mitigation landings pile up.

    Watches the last `window` classified interrupts; once the mitigation
    share exceeds the calibrated expectation by `sigmas` binomial standard
    deviations the plan is pushed back by `step` cycles and the window resets.
    """

    def __init__(self, tail_mass: float, step: float, window: int = 200, sigmas: float = 3.0):
        self.expected = 1.0 - tail_mass
        self.step = step
        self.window = window
        self.threshold = self.expected + sigmas * math.sqrt(self.expected * tail_mass / window)
        self.recent = deque(maxlen=window)
        self.adjustments = 0

    def observe(self, plan: IpiPlan, mitigation_landing: bool) -> IpiPlan:
        self.recent.append(bool(mitigation_landing))
        if len(self.recent) < self.window:
            return plan
        share = sum(self.recent) / self.window
        if share <= self.threshold:
            return plan
        self.recent.clear()
        self.adjustments += 1
        logger.warning(
            f"mitigation share {share:.3f} above {self.threshold:.3f}; delaying IPI by {self.step} cycles"
        )
        return plan.delayed(self.step)
