"""Central finite-difference oracle for analytic gradients."""

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from numerics.errors import NumericError
from numerics.rng import stream

logger = logging.getLogger(__name__)

RELATIVE_FLOOR = 1e-8

LossAndGrads = Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]]


@dataclass(frozen=True)
class GradCheckReport:
    max_relative_error: dict[str, float]
    eps: float
    tolerance: float
    passed: bool

    @property
    def worst(self) -> float:
        return max(self.max_relative_error.values(), default=0.0)


def relative_error(analytic: float, numeric: float, floor: float = RELATIVE_FLOOR) -> float:
    scale = max(abs(analytic), abs(numeric), floor)
    return abs(analytic - numeric) / scale


def finite_diff_check(
    forward_fn: LossAndGrads,
    params: dict[str, np.ndarray],
    eps: float = 1e-5,
    tolerance: float = 1e-4,
    max_entries_per_param: int | None = None,
    seed: int = 0,
    floor: float = RELATIVE_FLOOR,
) -> GradCheckReport:
    """Compares forward_fn's analytic gradients against central differences.

    forward_fn maps a parameter dict to (scalar loss, gradient dict). When
    max_entries_per_param is set, a seeded subset of each tensor's entries is
    checked instead of every entry. Relative errors are taken against
    max(|analytic|, |numeric|, floor).
    """
    if eps <= 0:
        raise NumericError(f"eps must be positive, got {eps}")
    base = {name: np.array(value, dtype=np.float64) for name, value in params.items()}
    base_value, analytic = forward_fn(base)
    if not math.isfinite(base_value):
        raise NumericError(f"forward function returned non-finite value {base_value}")

    def evaluate(shifted: dict[str, np.ndarray]) -> float:
        value, _ = forward_fn(shifted)
        if not math.isfinite(value):
            raise NumericError(f"forward function returned non-finite value {value}")
        return value

    errors: dict[str, float] = {}
    for name, tensor in base.items():
        flat_indices = np.arange(tensor.size)
        if max_entries_per_param is not None and tensor.size > max_entries_per_param:
            rng = stream(seed, "gradcheck", name)
            flat_indices = np.sort(
                rng.choice(tensor.size, size=max_entries_per_param, replace=False)
            )
        worst = 0.0
        for flat in flat_indices:
            index = np.unravel_index(int(flat), tensor.shape)
            original = tensor[index]
            tensor[index] = original + eps
            upper = evaluate(base)
            tensor[index] = original - eps
            lower = evaluate(base)
            tensor[index] = original
            numeric = (upper - lower) / (2.0 * eps)
            worst = max(worst, relative_error(float(analytic[name][index]), numeric, floor))
        errors[name] = worst
        logger.debug("gradcheck %s: max relative error %.3e", name, worst)

    passed = all(error < tolerance for error in errors.values())
    return GradCheckReport(
        max_relative_error=errors, eps=eps, tolerance=tolerance, passed=passed
    )
