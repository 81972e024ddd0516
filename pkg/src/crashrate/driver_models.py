"""Parametric car-following policies used for the vehicle under test and its
surrogates.

Two families are provided: the intelligent-driver model and a full
velocity-difference model with an optimal-velocity curve and a configurable
deceleration floor.  Accelerations are clamped to a global physical range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

__all__ = [
    "IdmParams",
    "FvdmParams",
    "DriverParams",
    "idm_acceleration",
    "idm_free_acceleration",
    "fvdm_acceleration",
    "driver_acceleration",
    "driver_free_acceleration",
    "params_to_dict",
    "params_from_dict",
    "ACCEL_FLOOR",
    "ACCEL_CEIL",
]

# Global physical-plausibility clamp applied to every model output.
ACCEL_FLOOR = -8.0
ACCEL_CEIL = 4.0


@dataclass(frozen=True, slots=True)
class IdmParams:
    """Intelligent-driver model parameters."""

    accel_max: float = 2.0  # maximum acceleration, m/s^2
    v_desired: float = 33.3  # desired speed, m/s
    time_headway: float = 1.5  # s
    jam_distance: float = 2.0  # m
    decel_comfortable: float = 3.0  # m/s^2
    exponent: float = 4.0

    def __post_init__(self):
        if self.accel_max <= 0 or self.v_desired <= 0 or self.decel_comfortable <= 0:
            raise ValueError("accel_max, v_desired, decel_comfortable must be positive")
        if self.time_headway < 0 or self.jam_distance < 0:
            raise ValueError("time_headway and jam_distance must be nonnegative")


@dataclass(frozen=True, slots=True)
class FvdmParams:
    """Full velocity-difference model with tanh optimal-velocity curve."""

    gain_v: float = 0.41  # 1/s, pull toward the optimal velocity
    gain_dv: float = 0.5  # 1/s, response to the approach rate
    accel_min: float = -1.0  # deceleration floor, m/s^2
    v_max: float = 33.3
    s_transition: float = 15.0  # m, midpoint of the optimal-velocity curve
    s_width: float = 8.0  # m

    def __post_init__(self):
        if self.accel_min >= 0:
            raise ValueError("accel_min must be negative")
        if self.gain_v <= 0 or self.s_width <= 0 or self.v_max <= 0:
            raise ValueError("gain_v, s_width, v_max must be positive")


DriverParams = IdmParams | FvdmParams


def _pow_exponent(x: float, exponent: float) -> float:
    # keep the common integer exponents as explicit products so scalar and
    # vectorized evaluation are bit-identical
    if exponent == 4.0:
        x2 = x * x
        return x2 * x2
    if exponent == 2.0:
        return x * x
    if exponent == 1.0:
        return x
    return x**exponent


def idm_acceleration(params: IdmParams, v: float, gap: float, approach_rate: float) -> float:
    """Car-following acceleration toward a leader.

    ``approach_rate`` is the closing speed (follower speed minus leader
    speed; positive when closing).  Raises when the gap is not positive.
    """
    if gap <= 0.0:
        raise ValueError("overlap before model evaluation: gap must be positive")
    s_star = (
        params.jam_distance
        + v * params.time_headway
        + v * approach_rate / (2.0 * math.sqrt(params.accel_max * params.decel_comfortable))
    )
    ratio = s_star / gap
    a = params.accel_max * (
        1.0 - _pow_exponent(v / params.v_desired, params.exponent) - ratio * ratio
    )
    return min(max(a, ACCEL_FLOOR), ACCEL_CEIL)


def idm_free_acceleration(params: IdmParams, v: float) -> float:
    """Free-driving limit of the model (no leader in range)."""
    a = params.accel_max * (1.0 - _pow_exponent(v / params.v_desired, params.exponent))
    return min(max(a, ACCEL_FLOOR), ACCEL_CEIL)


def optimal_velocity(params: FvdmParams, gap: float) -> float:
    return (
        0.5
        * params.v_max
        * (
            math.tanh((gap - params.s_transition) / params.s_width)
            + math.tanh(params.s_transition / params.s_width)
        )
    )


def fvdm_acceleration(params: FvdmParams, v: float, gap: float, approach_rate: float) -> float:
    """Velocity-difference response with the configured deceleration floor."""
    if gap <= 0.0:
        raise ValueError("overlap before model evaluation: gap must be positive")
    a = params.gain_v * (optimal_velocity(params, gap) - v) - params.gain_dv * approach_rate
    a = max(a, params.accel_min)
    return min(max(a, ACCEL_FLOOR), ACCEL_CEIL)


def fvdm_free_acceleration(params: FvdmParams, v: float) -> float:
    a = params.gain_v * (params.v_max - v)
    a = max(a, params.accel_min)
    return min(max(a, ACCEL_FLOOR), ACCEL_CEIL)


def driver_acceleration(params: DriverParams, v: float, gap: float, approach_rate: float) -> float:
    if isinstance(params, IdmParams):
        return idm_acceleration(params, v, gap, approach_rate)
    return fvdm_acceleration(params, v, gap, approach_rate)


def driver_free_acceleration(params: DriverParams, v: float) -> float:
    if isinstance(params, IdmParams):
        return idm_free_acceleration(params, v)
    return fvdm_free_acceleration(params, v)


def sm1_params() -> IdmParams:
    """First surrogate: the default car-following model."""
    return IdmParams(accel_max=2.0)


def sm2_params() -> FvdmParams:
    """Second surrogate: weak braking capability."""
    return FvdmParams(accel_min=-1.0)


def sm3_params() -> FvdmParams:
    """Third surrogate: strong braking capability."""
    return FvdmParams(accel_min=-6.0)


def params_to_dict(params: DriverParams) -> dict:
    if isinstance(params, IdmParams):
        return {
            "type": "idm",
            "accel_max": params.accel_max,
            "v_desired": params.v_desired,
            "time_headway": params.time_headway,
            "jam_distance": params.jam_distance,
            "decel_comfortable": params.decel_comfortable,
            "exponent": params.exponent,
        }
    return {
        "type": "fvdm",
        "gain_v": params.gain_v,
        "gain_dv": params.gain_dv,
        "accel_min": params.accel_min,
        "v_max": params.v_max,
        "s_transition": params.s_transition,
        "s_width": params.s_width,
    }


def params_from_dict(obj: dict) -> DriverParams:
    kind = obj.get("type")
    fields = {k: v for k, v in obj.items() if k != "type"}
    if kind == "idm":
        return IdmParams(**fields)
    if kind == "fvdm":
        return FvdmParams(**fields)
    raise ValueError(f"unknown driver model type {kind!r}")
