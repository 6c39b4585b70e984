"""Correlated coarse/fine pair simulation over blocks of M fine steps.

A coupled pair advances one coarse step of size M*dt_fine at a time: first the
M fine sub-steps run and their draws are buffered, then the coarse step
consumes derived draws so that its marginal law is untouched:

  * coarse normal   xi_c = (1/sqrt(M)) * sum_m xi_m
  * coarse uniform  u_c  = (max_m u_m)^M          (inverse transform of the max CDF)
  * coarse velocity on collision = the fine unit velocity in effect at the
    end of the block (the most recently drawn V* inside it)

The powered-maximum uniform makes a coarse collision impossible without at
least one fine collision in the block; the kernels count violations of that
guarantee so tests can assert zero.

``simulate_coupled_pair`` is the scalar reference; ``simulate_coupled_ensemble``
is the vectorized kernel used everywhere performance matters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .kinetics import (
    ContractViolationError,
    InvalidParameterError,
    ModelParams,
    ScaledParams,
    collision_dominance_holds,
    sample_unit_velocity,
    scaled_params,
)
from .scheme import ParticleState, StepDraws, ap_step, steps_for_horizon

__all__ = [
    "BlockDraws",
    "CoupledPairResult",
    "couple_xi",
    "couple_u",
    "coarse_collision_and_velocity",
    "simulate_coupled_pair",
    "simulate_coupled_ensemble",
    "CoupledEnsembleResult",
]


@dataclass(frozen=True)
class BlockDraws:
    """The M fine-step draw triples consumed by one coarse step."""

    steps: Sequence[StepDraws]

    def __post_init__(self):
        if len(self.steps) == 0:
            raise ContractViolationError("a block must contain at least one fine step")


def couple_xi(fine_xis: Sequence[float]) -> float:
    """Coarse standard normal from M fine ones: (1/sqrt(M)) * sum."""
    m = len(fine_xis)
    if m == 0:
        raise ContractViolationError("couple_xi needs at least one fine draw")
    return float(np.sum(fine_xis)) / math.sqrt(m)


def couple_u(fine_us: Sequence[float]) -> float:
    """Coarse uniform from M fine ones: (max u)^M."""
    m = len(fine_us)
    if m == 0:
        raise ContractViolationError("couple_u needs at least one fine draw")
    us = np.asarray(fine_us, dtype=float)
    if np.any(us < 0.0) or np.any(us > 1.0):
        raise ContractViolationError(f"uniform draws must lie in [0, 1], got {fine_us}")
    return float(np.max(us)) ** m


def coarse_collision_and_velocity(
    coarse_u: float,
    coarse_params: ScaledParams,
    prev_vbar: float,
    last_fine_vbar: float,
) -> float:
    """Unit velocity for the next coarse step.

    On a coarse collision (coarse_u >= p_no_collide, ties collide) the fine
    unit velocity in effect at the block end is reused; otherwise the previous
    coarse velocity is kept.
    """
    if not 0.0 <= coarse_u <= 1.0:
        raise ContractViolationError(f"coarse_u must lie in [0, 1], got {coarse_u}")
    if coarse_u >= coarse_params.p_no_collide:
        return last_fine_vbar
    return prev_vbar


@dataclass
class CoupledPairResult:
    """Final states of one coupled pair, plus traces when requested."""

    fine: ParticleState
    coarse: ParticleState
    fine_states: Optional[list] = None
    coarse_states: Optional[list] = None
    fine_flags: Optional[list] = None
    coarse_flags: Optional[list] = None


def _check_pair_geometry(model: ModelParams, dt_fine: float, m_factor: int, t_end: float) -> int:
    if not (isinstance(m_factor, (int, np.integer)) and m_factor >= 2):
        raise InvalidParameterError(f"m_factor must be an integer >= 2, got {m_factor}")
    n_blocks = steps_for_horizon(t_end, m_factor * dt_fine)
    # Lemma 1 sanity: the coupled-uniform construction never produces a coarse
    # collision without a fine one; cheap to assert once per configuration.
    assert collision_dominance_holds(model.epsilon, dt_fine, m_factor)
    return n_blocks


def simulate_coupled_pair(
    model: ModelParams,
    dt_fine: float,
    m_factor: int,
    t_end: float,
    rng: np.random.Generator,
    trace: bool = False,
) -> CoupledPairResult:
    """Scalar reference simulation of one coupled (fine, coarse) pair.

    The initial unit velocity is a single shared draw, scaled by each level's
    characteristic velocity so both marginals keep the equilibrium law.
    """
    n_blocks = _check_pair_geometry(model, dt_fine, m_factor, t_end)
    params_f = scaled_params(model, dt_fine)
    params_c = scaled_params(model, m_factor * dt_fine)

    vbar0 = sample_unit_velocity(model.dist, rng)
    fine = ParticleState(x=0.0, v=params_f.v_char_dt * vbar0, vbar=vbar0)
    coarse = ParticleState(x=0.0, v=params_c.v_char_dt * vbar0, vbar=vbar0)
    fine_states, coarse_states = [fine], [coarse]
    fine_flags, coarse_flags = [], []

    for _ in range(n_blocks):
        block = []
        for _ in range(m_factor):
            xi = float(rng.standard_normal())
            u = float(rng.random())
            vstar = sample_unit_velocity(model.dist, rng)
            draws = StepDraws(xi=xi, u=u, vbar_new=vstar if u >= params_f.p_no_collide else None)
            block.append(draws)
            fine = ap_step(fine, params_f, draws)
            if trace:
                fine_states.append(fine)
                fine_flags.append(int(draws.vbar_new is not None))
        block = BlockDraws(steps=block)

        xi_c = couple_xi([d.xi for d in block.steps])
        u_c = couple_u([d.u for d in block.steps])
        collides_c = u_c >= params_c.p_no_collide
        vbar_next = coarse_collision_and_velocity(u_c, params_c, coarse.vbar, fine.vbar)
        coarse_draws = StepDraws(xi=xi_c, u=u_c, vbar_new=vbar_next if collides_c else None)
        coarse = ap_step(coarse, params_c, coarse_draws)
        if trace:
            coarse_states.append(coarse)
            coarse_flags.append(int(collides_c))

    if trace:
        return CoupledPairResult(
            fine=fine,
            coarse=coarse,
            fine_states=fine_states,
            coarse_states=coarse_states,
            fine_flags=fine_flags,
            coarse_flags=coarse_flags,
        )
    return CoupledPairResult(fine=fine, coarse=coarse)


@dataclass
class CoupledEnsembleResult:
    """Vectorized coupled-pair ensemble output.

    Position histories and transport/Brownian decompositions are optional;
    velocity sub-step samples cover the final coarse block only (enough for
    the velocity-difference oracle, which is stationary in n).
    """

    x_f: np.ndarray
    vbar_f: np.ndarray
    x_c: np.ndarray
    vbar_c: np.ndarray
    v_char_f: float
    v_char_c: float
    m_factor: int
    dt_fine: float
    fine_collisions: int = 0
    coarse_collisions: int = 0
    coarse_steps_total: int = 0
    lemma1_violations: int = 0
    # transport/Brownian position components per path
    t_f: Optional[np.ndarray] = None
    w_f: Optional[np.ndarray] = None
    t_c: Optional[np.ndarray] = None
    w_c: Optional[np.ndarray] = None
    # final-block velocity samples: unit velocities in effect during each
    # fine sub-step (M, count) and during the final coarse step (count,)
    sub_vbar_f: Optional[np.ndarray] = None
    block_vbar_c: Optional[np.ndarray] = None
    # full histories (fine grid / coarse grid)
    xf_hist: Optional[np.ndarray] = None
    xc_hist: Optional[np.ndarray] = None
    vf_hist: Optional[np.ndarray] = None
    vc_hist: Optional[np.ndarray] = None
    fine_collide_hist: Optional[np.ndarray] = None
    coarse_collide_hist: Optional[np.ndarray] = None


def simulate_coupled_ensemble(
    model: ModelParams,
    dt_fine: float,
    m_factor: int,
    n_blocks: int,
    rng: np.random.Generator,
    count: int,
    record_components: bool = False,
    record_block_velocities: bool = False,
    record_history: bool = False,
    component_burn_in: int = 0,
) -> CoupledEnsembleResult:
    """Vectorized simulation of ``count`` coupled pairs over ``n_blocks`` blocks.

    Per fine sub-step the draw order is (xi, u, V*), V* drawn for all paths so
    stream consumption is collision-independent.  The coarse level consumes no
    draws of its own.

    ``component_burn_in`` makes the transport/Brownian accumulators skip the
    first blocks, so their statistics reflect the stationary coupling
    correlation rather than the perfectly correlated shared start.
    """
    if not (isinstance(m_factor, (int, np.integer)) and m_factor >= 2):
        raise InvalidParameterError(f"m_factor must be an integer >= 2, got {m_factor}")
    assert collision_dominance_holds(model.epsilon, dt_fine, m_factor)
    m = int(m_factor)
    params_f = scaled_params(model, dt_fine)
    params_c = scaled_params(model, m * dt_fine)
    dt_c = params_c.dt

    vbar0 = sample_unit_velocity(model.dist, rng, size=count)
    x_f = np.zeros(count)
    x_c = np.zeros(count)
    vbar_f = vbar0.copy()
    vbar_c = vbar0.copy()
    noise_f = math.sqrt(2.0 * dt_fine * params_f.diff_coef)
    noise_c = math.sqrt(2.0 * dt_c * params_c.diff_coef)

    t_f = w_f = t_c = w_c = None
    if record_components:
        t_f, w_f = np.zeros(count), np.zeros(count)
        t_c, w_c = np.zeros(count), np.zeros(count)
    sub_vbar_f = block_vbar_c = None
    if record_block_velocities:
        sub_vbar_f = np.empty((m, count))
        block_vbar_c = np.empty(count)
    xf_hist = xc_hist = vf_hist = vc_hist = None
    fine_collide_hist = coarse_collide_hist = None
    if record_history:
        xf_hist = np.empty((n_blocks * m + 1, count))
        xc_hist = np.empty((n_blocks + 1, count))
        vf_hist = np.empty((n_blocks * m + 1, count))
        vc_hist = np.empty((n_blocks + 1, count))
        fine_collide_hist = np.zeros((n_blocks * m + 1, count), dtype=np.int8)
        coarse_collide_hist = np.zeros((n_blocks + 1, count), dtype=np.int8)
        xf_hist[0], xc_hist[0] = x_f, x_c
        vf_hist[0] = params_f.v_char_dt * vbar_f
        vc_hist[0] = params_c.v_char_dt * vbar_c

    fine_collisions = 0
    coarse_collisions = 0
    lemma1_violations = 0

    for n in range(n_blocks):
        last = n == n_blocks - 1
        accumulate = record_components and n >= component_burn_in
        xi_sum = np.zeros(count)
        u_max = np.zeros(count)
        any_fine_collide = np.zeros(count, dtype=bool)
        for sub in range(m):
            xi = rng.standard_normal(count)
            u = rng.random(count)
            vstar = sample_unit_velocity(model.dist, rng, size=count)
            if record_block_velocities and last:
                sub_vbar_f[sub] = vbar_f
            transport = vbar_f * (params_f.v_char_dt * dt_fine)
            brownian = noise_f * xi
            x_f += transport + brownian
            if accumulate:
                t_f += transport
                w_f += brownian
            collide = u >= params_f.p_no_collide
            vbar_f = np.where(collide, vstar, vbar_f)
            fine_collisions += int(np.count_nonzero(collide))
            any_fine_collide |= collide
            xi_sum += xi
            np.maximum(u_max, u, out=u_max)
            if record_history:
                idx = n * m + sub + 1
                xf_hist[idx] = x_f
                vf_hist[idx] = params_f.v_char_dt * vbar_f
                fine_collide_hist[idx] = collide

        xi_c = xi_sum / math.sqrt(m)
        u_c = u_max**m
        if record_block_velocities and last:
            block_vbar_c[:] = vbar_c
        transport_c = vbar_c * (params_c.v_char_dt * dt_c)
        brownian_c = noise_c * xi_c
        x_c += transport_c + brownian_c
        if accumulate:
            t_c += transport_c
            w_c += brownian_c
        collide_c = u_c >= params_c.p_no_collide
        coarse_collisions += int(np.count_nonzero(collide_c))
        lemma1_violations += int(np.count_nonzero(collide_c & ~any_fine_collide))
        vbar_c = np.where(collide_c, vbar_f, vbar_c)
        if record_history:
            xc_hist[n + 1] = x_c
            vc_hist[n + 1] = params_c.v_char_dt * vbar_c
            coarse_collide_hist[n + 1] = collide_c

    return CoupledEnsembleResult(
        x_f=x_f,
        vbar_f=vbar_f,
        x_c=x_c,
        vbar_c=vbar_c,
        v_char_f=params_f.v_char_dt,
        v_char_c=params_c.v_char_dt,
        m_factor=m,
        dt_fine=dt_fine,
        fine_collisions=fine_collisions,
        coarse_collisions=coarse_collisions,
        coarse_steps_total=n_blocks * count,
        lemma1_violations=lemma1_violations,
        t_f=t_f,
        w_f=w_f,
        t_c=t_c,
        w_c=w_c,
        sub_vbar_f=sub_vbar_f,
        block_vbar_c=block_vbar_c,
        xf_hist=xf_hist,
        xc_hist=xc_hist,
        vf_hist=vf_hist,
        vc_hist=vc_hist,
        fine_collide_hist=fine_collide_hist,
        coarse_collide_hist=coarse_collide_hist,
    )
