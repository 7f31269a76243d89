"""
Celery tasks for independent trials.

Payloads are plain JSON: the validated profile dict, an optional classifier
model dict, seeds and trial coordinates. Each task rebuilds what it needs
and owns its random stream, so results do not depend on which worker ran it.
"""
from celery import shared_task
import logging

from .attacks import (
    LbmsConfig, Platform, PssConfig, lbms_delta_run, lbms_plan, measure_candidate, pss_attack, pss_plan,
)
from .curves import Signature, get_curve
from .fingerprint import ClassifierModel, GroundTruthOracle
from .func import stream
from .hnp import BiasSpec, recover_key
from .interrupts import IpiPlan, PlanMode
from .victims import make_delta_victim, make_memcmp_victim

logger = logging.getLogger(__name__)

PSS_STREAM = 3
LBMS_STREAM = 5


def classifier_from_payload(model_data):
    if model_data is None:
        return GroundTruthOracle()
    return ClassifierModel.from_dict(model_data)


def plan_from_payload(plan_data) -> IpiPlan:
    return IpiPlan(
        fire_delay=float(plan_data['fire_delay']),
        mode=PlanMode(plan_data['mode']),
        lbms_lower_bound=plan_data.get('lbms_lower_bound'),
        mitigation_end=plan_data.get('mitigation_end'),
    )


def pss_config(profile_data, platform: Platform, classifier, plan: IpiPlan = None) -> PssConfig:
    section = profile_data['pss']
    return PssConfig(
        classifier=classifier,
        plan=plan or pss_plan(platform, float(section['tail_mass']), float(section['fire_delay_offset'])),
        samples_per_guess=int(section['samples_per_guess']),
        tail_mass=float(section['tail_mass']),
        max_interrupts_per_trace=int(section['max_interrupts_per_trace']),
        adaptation=section['nop_slide_adaptation'],
    )


@shared_task
def run_pss_trial(profile_data, model_data, seed, delta, trial):
    """One PSS guess between the two branches of a delta victim."""
    try:
        platform = Platform.from_profile(profile_data)
        section = profile_data['pss']
        rng = stream(seed, PSS_STREAM, delta, trial)
        secret = int(rng.integers(0, 2))
        victim = make_delta_victim(delta, secret, section['filler'], platform.opcodes, int(section['base_length']))
        cfg = pss_config(profile_data, platform, classifier_from_payload(model_data))
        result = pss_attack(victim, [0, 1], cfg, platform, rng, trace_prefix=f'pss-{delta}-{trial}')
        return {
            'delta': delta,
            'trial': trial,
            'secret': secret,
            'predicted': result.predicted_secret,
            'success': result.predicted_secret == secret,
            'mean_count_0': result.per_guess_mean_counts[0],
            'mean_count_1': result.per_guess_mean_counts[1],
            'interrupts': result.interrupts,
        }
    except Exception as e:
        logger.error(f"PSS trial delta={delta} trial={trial} failed: {str(e)}")
        raise


@shared_task
def run_lbms_batch(profile_data, seed, delta, run):
    """Longer- and shorter-branch detections for one delta and run."""
    try:
        platform = Platform.from_profile(profile_data)
        section = profile_data['lbms']
        base_length = int(section['base_length'])
        filler = section['filler']

        def factory(d):
            return make_delta_victim(d, 0, filler, platform.opcodes, base_length)

        short = float(platform.compile(factory(delta), {'guess': 0}).cycles_between())
        cfg = LbmsConfig(
            plan=lbms_plan(platform, short, float(section['epsilon'])),
            detection_threshold=1,
            max_interrupts_per_trace=int(section['max_interrupts_per_trace']),
        )
        rng = stream(seed, LBMS_STREAM, delta, run)
        row = lbms_delta_run(factory, delta, int(section['traces']), platform, cfg, rng, run)
        return {
            'delta': row.delta,
            'run': run,
            'traces': row.traces,
            'detections': row.detections,
            'short_branch_detections': row.short_branch_detections,
            'short_branch_cycles': short,
            'fire_delay': cfg.plan.fire_delay,
        }
    except Exception as e:
        logger.error(f"LBMS batch delta={delta} run={run} failed: {str(e)}")
        raise


@shared_task
def run_memcmp_candidate(profile_data, model_data, plan_data, seed, secret, candidate, samples, position, round_):
    """PSS step counts for one memcmp input."""
    try:
        platform = Platform.from_profile(profile_data)
        section = profile_data['memcmp']
        victim = make_memcmp_victim(secret, platform.opcodes, section['charset'], int(section['max_length']))
        cfg = pss_config(profile_data, platform, classifier_from_payload(model_data), plan_from_payload(plan_data))
        return measure_candidate(victim, cfg, platform, seed, candidate, samples, position, round_).to_dict()
    except Exception as e:
        logger.error(f"memcmp candidate {candidate!r} at position {position} failed: {str(e)}")
        raise


@shared_task
def run_subset_reduction(signatures, bias, curve_name, pub, lll_delta, block2_passes):
    """One lattice reduction; returns the verified key as hex or None."""
    try:
        curve = get_curve(curve_name)
        key = recover_key(
            [Signature.from_dict(sig) for sig in signatures],
            BiasSpec.from_dict(bias),
            curve,
            tuple(int(value, 16) for value in pub),
            lll_delta,
            int(block2_passes),
        )
        return hex(key) if key is not None else None
    except Exception as e:
        logger.error(f"Subset reduction failed: {str(e)}")
        raise
