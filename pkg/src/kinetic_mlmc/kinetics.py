"""Model parameters and the time-step dependent coefficients of the AP scheme.

The kinetic model is parametrized by the mean free path ``epsilon`` and the
characteristic velocity ``v_char`` of the unit-variance equilibrium velocity
distribution.  For a simulation time step ``dt`` the asymptotic-preserving
scheme replaces the raw model coefficients by scaled ones:

    v_char_dt = eps * v_char / (eps^2 + dt)      scaled characteristic velocity
    diff_coef = v_char^2 * dt / (eps^2 + dt)     diffusion coefficient
    p_collide = dt / (eps^2 + dt)                per-step collision probability

As dt -> 0 the scheme recovers the plain kinetic dynamics; as dt (or 1/eps)
grows it degenerates into pure diffusion with coefficient v_char^2.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "VelocityDist",
    "ModelParams",
    "ScaledParams",
    "InvalidParameterError",
    "ContractViolationError",
    "scaled_params",
    "sample_unit_velocity",
    "collision_dominance_holds",
]


class InvalidParameterError(ValueError):
    """Raised when an operation is called with out-of-domain parameters."""


class ContractViolationError(ValueError):
    """Raised when a caller violates a documented precondition."""


class VelocityDist(enum.Enum):
    """Equilibrium velocity distribution kind (unit mean-zero variance)."""

    TWO_SPEED = "two_speed"
    GAUSSIAN = "gaussian"


@dataclass(frozen=True)
class ModelParams:
    """Kinetic model parameters: mean free path, velocity scale, equilibrium kind."""

    epsilon: float
    v_char: float = 1.0
    dist: VelocityDist = VelocityDist.TWO_SPEED

    def __post_init__(self):
        if not (math.isfinite(self.epsilon) and self.epsilon > 0):
            raise InvalidParameterError(f"epsilon must be finite and > 0, got {self.epsilon}")
        if not (math.isfinite(self.v_char) and self.v_char > 0):
            raise InvalidParameterError(f"v_char must be finite and > 0, got {self.v_char}")


@dataclass(frozen=True)
class ScaledParams:
    """Time-step dependent coefficients of the AP scheme for one dt."""

    dt: float
    v_char_dt: float
    diff_coef: float
    p_collide: float
    p_no_collide: float


def scaled_params(model: ModelParams, dt: float) -> ScaledParams:
    """Scaled coefficients for time step ``dt``.

    ``dt = 0`` is allowed and returns the analytic zero-step limit
    (v_char/eps, 0, 0, 1) so that analysis code can query limits directly.
    """
    if not math.isfinite(dt) or dt < 0:
        raise InvalidParameterError(f"dt must be finite and >= 0, got {dt}")
    eps2 = model.epsilon * model.epsilon
    denom = eps2 + dt
    # p_no_collide is derived from p_collide so the two sum to 1 exactly.
    p_collide = dt / denom
    return ScaledParams(
        dt=dt,
        v_char_dt=model.epsilon * model.v_char / denom,
        diff_coef=model.v_char * model.v_char * dt / denom,
        p_collide=p_collide,
        p_no_collide=1.0 - p_collide,
    )


def sample_unit_velocity(dist: VelocityDist, rng: np.random.Generator, size=None):
    """Draw from the unit equilibrium distribution (mean 0, variance 1).

    TWO_SPEED yields -1/+1 with equal probability; GAUSSIAN a standard normal.
    With ``size=None`` a Python float is returned, otherwise an ndarray.
    """
    if dist is VelocityDist.TWO_SPEED:
        if size is None:
            return float(2 * rng.integers(0, 2) - 1)
        return (2 * rng.integers(0, 2, size=size) - 1).astype(np.float64)
    if size is None:
        return float(rng.standard_normal())
    return rng.standard_normal(size)


def collision_dominance_holds(epsilon: float, dt_fine: float, m_factor: int) -> bool:
    """Truth of (eps^2/(eps^2+dt))^M <= eps^2/(eps^2+M*dt).

    This is the inequality that makes a coarse collision impossible without at
    least one fine collision in the block.  It holds for every valid input;
    the function exists as a runtime sanity assertion for the coupling code.
    """
    if not (epsilon > 0 and dt_fine > 0 and m_factor >= 1):
        raise InvalidParameterError(
            f"need epsilon > 0, dt_fine > 0, m_factor >= 1, got "
            f"({epsilon}, {dt_fine}, {m_factor})"
        )
    eps2 = epsilon * epsilon
    # log-space comparison; p_nc^M underflows for large M * dt/eps^2
    lhs = m_factor * math.log(eps2 / (eps2 + dt_fine))
    rhs = math.log(eps2 / (eps2 + m_factor * dt_fine))
    return lhs <= rhs + 1e-12 * abs(rhs)
