"""Contrastive-weight schedules w_c(step).

Every ramp starts at exactly 0 and ends at exactly w_c_max; "one" is constant
at w_c_max and "zero" switches the contrastive term off.
"""
import math

from app.core.errors import SpecError, StepIndexError
from app.schemas.training import WeightSchedule


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def schedule_weight(step: int, schedule: WeightSchedule, w_c_max: float) -> float:
    total = schedule.total_steps
    if not 0 <= step <= total:
        raise StepIndexError(f"step {step} outside [0, {total}]")
    x = step / total
    kind = schedule.kind
    if kind == "zero":
        return 0.0
    if kind == "one":
        return w_c_max
    if kind == "linear":
        frac = x
    elif kind == "cosine":
        frac = 0.5 * (1.0 - math.cos(math.pi * x))
    elif kind == "sigmoid":
        k = schedule.shape
        lo, hi = _sigmoid(-k / 2), _sigmoid(k / 2)
        frac = (_sigmoid(k * (x - 0.5)) - lo) / (hi - lo)
    elif kind == "exponential":
        k = schedule.shape
        frac = -math.expm1(-k * x) / -math.expm1(-k)
    else:
        raise SpecError(f"unknown schedule kind {kind!r}")
    # exact endpoints
    if step == 0:
        return 0.0
    if step == total:
        return w_c_max
    return w_c_max * min(max(frac, 0.0), 1.0)
