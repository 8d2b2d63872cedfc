"""
Step-indexed schedules: the LPF filter radius, the Entropy-SGD scoping
parameter, and step decay of the learning rate.
"""

import math
from typing import Sequence

from sharpctl.errors import ConfigError
from sharpctl.utils import get_logger

logger = get_logger(__name__)


def gamma_schedule(t: int, T: int, gamma0: float, alpha: float) -> float:
    """
    Cosine-increasing filter radius.

    gamma_t = gamma0 * (alpha / 2 * (1 - cos(t * pi / T)) + 1), so gamma_0 = gamma0
    and gamma_T = (alpha + 1) * gamma0.

    Args:
        t: Current step, 0 <= t <= T.
        T: Total number of steps (>= 1).
        gamma0: Initial radius.
        alpha: Growth factor (>= 0 keeps the schedule non-decreasing).

    Returns:
        Radius at step t.
    """
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not 0 <= t <= T:
        raise ConfigError(f"step {t} outside schedule range [0, {T}]")
    return gamma0 * (alpha / 2.0 * (1.0 - math.cos(t * math.pi / T)) + 1.0)


def scoping_schedule(t: int, gamma0: float, gamma1: float) -> float:
    """Entropy-SGD scoping: gamma0 * (1 + gamma1)^t."""
    if gamma0 <= 0:
        raise ConfigError(f"gamma0 must be > 0, got {gamma0}")
    if gamma1 < 0 or t < 0:
        raise ConfigError("gamma1 and t must be non-negative")
    return gamma0 * (1.0 + gamma1) ** t


def step_lr(base_lr: float, epoch: int, milestones: Sequence[int], decay: float) -> float:
    """Learning rate after multiplying by ``decay`` at every milestone already reached."""
    passed = sum(1 for milestone in milestones if epoch >= milestone)
    return base_lr * decay**passed
