"""Clinical reward functions for the sepsis and acute-hypotension cohorts."""

from __future__ import annotations

import math

from ..tensor import ContractError


def sepsis_reward(sofa_t: float, sofa_prev: float, lactate_t: float, lactate_prev: float) -> float:
    """Three-part sepsis reward: flat-SOFA penalty, SOFA change, lactate change."""
    if sofa_t < 0 or sofa_prev < 0:
        raise ContractError(f"SOFA scores must be >= 0, got {sofa_t} and {sofa_prev}")
    if not (math.isfinite(lactate_t) and math.isfinite(lactate_prev)):
        raise ContractError("lactate values must be finite")
    r1 = -0.025 if (sofa_t == sofa_prev and sofa_t > 0) else 0.0
    r2 = -0.125 * (sofa_t - sofa_prev)
    r3 = -2.0 * math.tanh(lactate_t - lactate_prev)
    return r1 + r2 + r3


def hypotension_reward(map_t: float, urine_t: float = 0.0, urine_measured: bool = False) -> float:
    """Piecewise-linear MAP reward, zeroed by adequate measured urine output above MAP 55."""
    if not map_t > 0:
        raise ContractError(f"MAP must be positive, got {map_t}")
    if urine_measured and urine_t > 30 and map_t > 55:
        return 0.0
    if map_t > 65:
        return 0.0
    if map_t > 60:
        return -0.05 * (65 - map_t) / 5
    if map_t > 55:
        return -0.1 * (60 - map_t) / 5 - 0.05
    return -0.85 * (55 - map_t) / 15 - 0.15
