"""Asymptotic-preserving particle time step and single-level path simulation.

One AP step is transport-diffusion with the current velocity followed by a
collision test; a collision draws a fresh unit velocity that takes effect from
the next step on.  The stored state is the unit velocity ``vbar``; the
physical velocity is always ``v = v_char_dt * vbar`` for the step size in use.

``ap_step``/``simulate_path`` operate on a single particle and are the
reference implementation.  ``simulate_ensemble`` is the vectorized kernel the
estimator layer runs on; a test pins the two to identical trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .kinetics import (
    ContractViolationError,
    InvalidParameterError,
    ModelParams,
    ScaledParams,
    sample_unit_velocity,
    scaled_params,
)

__all__ = [
    "ParticleState",
    "StepDraws",
    "ap_step",
    "init_particle",
    "simulate_path",
    "path_with_collision_flags",
    "steps_for_horizon",
    "simulate_ensemble",
    "EnsembleResult",
    "draw_step_draws",
    "trace_csv_rows",
]

# relative tolerance for the t_end/dt divisibility check
_DIVISIBILITY_RTOL = 1e-9


@dataclass(frozen=True)
class ParticleState:
    """Particle state at one discrete time index; ``vbar`` is authoritative."""

    x: float
    v: float
    vbar: float


@dataclass(frozen=True)
class StepDraws:
    """Random draws consumed by one AP step.

    ``vbar_new`` must be present exactly when the step collides,
    i.e. when ``u >= p_no_collide``.
    """

    xi: float
    u: float
    vbar_new: Optional[float] = None


def init_particle(model: ModelParams, params: ScaledParams, rng: np.random.Generator) -> ParticleState:
    """Point source at the origin with an equilibrium-sampled velocity."""
    vbar = sample_unit_velocity(model.dist, rng)
    return ParticleState(x=0.0, v=params.v_char_dt * vbar, vbar=vbar)


def draw_step_draws(model: ModelParams, params: ScaledParams, rng: np.random.Generator) -> StepDraws:
    """Draw the (xi, u, V*) triple for one step; V* only on collision."""
    xi = float(rng.standard_normal())
    u = float(rng.random())
    vbar_new = None
    if u >= params.p_no_collide:
        vbar_new = sample_unit_velocity(model.dist, rng)
    return StepDraws(xi=xi, u=u, vbar_new=vbar_new)


def ap_step(state: ParticleState, params: ScaledParams, draws: StepDraws) -> ParticleState:
    """One transport-diffusion + collision step.

    x' = x + v dt + sqrt(2 dt) sqrt(D_dt) xi, with v the pre-step velocity;
    the collision (u >= p_no_collide, ties collide) replaces vbar afterwards.
    """
    if not np.isfinite(draws.xi):
        raise ContractViolationError(f"xi must be finite, got {draws.xi}")
    if not 0.0 <= draws.u <= 1.0:
        raise ContractViolationError(f"u must lie in [0, 1], got {draws.u}")
    collides = draws.u >= params.p_no_collide
    if collides and draws.vbar_new is None:
        raise ContractViolationError(
            f"colliding step (u={draws.u} >= p_nc={params.p_no_collide}) is missing vbar_new"
        )
    if not collides and draws.vbar_new is not None:
        raise ContractViolationError(
            f"non-colliding step (u={draws.u} < p_nc={params.p_no_collide}) carries vbar_new"
        )
    x_new = state.x + state.v * params.dt + np.sqrt(2.0 * params.dt * params.diff_coef) * draws.xi
    vbar_new = draws.vbar_new if collides else state.vbar
    return ParticleState(x=x_new, v=params.v_char_dt * vbar_new, vbar=vbar_new)


def steps_for_horizon(t_end: float, dt: float) -> int:
    """Number of steps N with t_end = N dt; rejects non-divisible horizons."""
    if not (np.isfinite(t_end) and t_end >= 0):
        raise InvalidParameterError(f"t_end must be finite and >= 0, got {t_end}")
    if not (np.isfinite(dt) and dt > 0):
        raise InvalidParameterError(f"dt must be finite and > 0, got {dt}")
    ratio = t_end / dt
    n = round(ratio)
    if abs(ratio - n) > _DIVISIBILITY_RTOL * max(1.0, abs(ratio)):
        raise InvalidParameterError(
            f"horizon t_end={t_end} is not an integer multiple of dt={dt} (N={ratio})"
        )
    return int(n)


def simulate_path(
    model: ModelParams,
    dt: float,
    t_end: float,
    rng: np.random.Generator,
    trace: bool = False,
):
    """Simulate one particle to t_end with fresh draws per step.

    Returns the final state, or the full list of N+1 states when ``trace``.
    """
    states, _ = path_with_collision_flags(model, dt, t_end, rng, keep_trace=trace)
    return states if trace else states[-1]


def path_with_collision_flags(
    model: ModelParams,
    dt: float,
    t_end: float,
    rng: np.random.Generator,
    keep_trace: bool = True,
):
    """Like ``simulate_path`` but also reports which steps collided.

    Returns (states, flags) with flags[i] = 1 if step i collided; the state
    list collapses to [final] when ``keep_trace`` is off.
    """
    params = scaled_params(model, dt)
    n_steps = steps_for_horizon(t_end, dt)
    state = init_particle(model, params, rng)
    states = [state]
    flags = []
    for _ in range(n_steps):
        draws = draw_step_draws(model, params, rng)
        state = ap_step(state, params, draws)
        flags.append(int(draws.u >= params.p_no_collide))
        if keep_trace:
            states.append(state)
    if not keep_trace:
        states = [state]
    return states, flags


@dataclass
class EnsembleResult:
    """Final ensemble arrays plus step diagnostics.

    ``x_hist`` is only filled when positions are recorded per step
    (shape (n_steps+1, count)).
    """

    x: np.ndarray
    vbar: np.ndarray
    v_char_dt: float
    collisions: int
    steps_total: int
    x_hist: Optional[np.ndarray] = None


def simulate_ensemble(
    model: ModelParams,
    dt: float,
    n_steps: int,
    rng: np.random.Generator,
    count: int,
    record_positions: bool = False,
) -> EnsembleResult:
    """Vectorized single-level simulation of ``count`` independent paths.

    Draw order per step is (xi, u, V*) with V* drawn for every path so that
    the stream consumption does not depend on the collision pattern.
    """
    params = scaled_params(model, dt)
    x = np.zeros(count)
    vbar = sample_unit_velocity(model.dist, rng, size=count)
    noise_scale = np.sqrt(2.0 * dt * params.diff_coef)
    collisions = 0
    x_hist = None
    if record_positions:
        x_hist = np.empty((n_steps + 1, count))
        x_hist[0] = x
    for n in range(n_steps):
        xi = rng.standard_normal(count)
        u = rng.random(count)
        vstar = sample_unit_velocity(model.dist, rng, size=count)
        x += vbar * (params.v_char_dt * dt) + noise_scale * xi
        collide = u >= params.p_no_collide
        vbar = np.where(collide, vstar, vbar)
        collisions += int(np.count_nonzero(collide))
        if record_positions:
            x_hist[n + 1] = x
    return EnsembleResult(
        x=x,
        vbar=vbar,
        v_char_dt=params.v_char_dt,
        collisions=collisions,
        steps_total=n_steps * count,
        x_hist=x_hist,
    )


def trace_csv_rows(states, flags, dt: float):
    """Rows (step_index, time, x, v, collided) for a traced path.

    ``flags`` are per-step collision indicators from
    ``path_with_collision_flags``; row 0 (the initial state) never collides.
    """
    rows = [(0, 0.0, states[0].x, states[0].v, 0)]
    for i in range(1, len(states)):
        rows.append((i, i * dt, states[i].x, states[i].v, int(flags[i - 1])))
    return rows
