"""Closed-form variances of coupled differences and derived diagnostics.

The position difference of a coupled pair decomposes into independent
Brownian and transport parts.  Per coarse block of M fine steps:

  Brownian:  V = 2 dt_c (sqrt(D_f) - sqrt(D_c))^2 per block, independent
             across blocks, so the total over N blocks is N times that.

  Transport: per-block variance
                 M dt_f^2 vf^2 - dt_c^2 vc^2
                 + 2 eps^2 vf^2 (M dt_f - (eps^2 + dt_f)(1 - p_nc_f^M))
             plus cross-block covariances
                 sum_{dn=1}^{N-1} (N-dn) (s1 a1^dn + s2 a2^dn),
             a1 = p_nc_f^M, a2 = p_nc_c, with the s1/s2 prefactors below.

  Velocity:  vf^2 - vc^2, valid once both levels are past their first
             collision.  The value corresponds to a fine sub-step drawn
             uniformly from the block; tests pool sub-steps accordingly.

All formulas accept real-valued M and N so the coarse-level threshold can be
solved for fractional refinement factors.  Powers of no-collision
probabilities are evaluated in log space; the weighted geometric sums switch
to a series expansion when (1 - a) * N is tiny.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .kinetics import InvalidParameterError, ModelParams, scaled_params

__all__ = [
    "AnalysisPoint",
    "RateFit",
    "ThresholdResult",
    "brownian_diff_variance",
    "transport_diff_variance",
    "velocity_diff_variance",
    "position_diff_variance",
    "single_level_position_variance",
    "leading_order_variance",
    "variance_bound",
    "coarse_level_threshold",
    "fit_convergence_rates",
]


@dataclass(frozen=True)
class AnalysisPoint:
    """One (epsilon, v_char, dt_fine, M, t_end) configuration; N = t*/(M dt)."""

    epsilon: float
    v_char: float
    dt_fine: float
    m_factor: int
    t_end: float

    def __post_init__(self):
        if self.m_factor < 2:
            raise InvalidParameterError(f"m_factor must be >= 2, got {self.m_factor}")
        n = self.t_end / (self.m_factor * self.dt_fine)
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise InvalidParameterError(
                f"t_end={self.t_end} must be an integer number of coarse steps, got N={n}"
            )

    @property
    def n_blocks(self) -> int:
        return int(round(self.t_end / (self.m_factor * self.dt_fine)))

    @property
    def model(self) -> ModelParams:
        return ModelParams(epsilon=self.epsilon, v_char=self.v_char)


def _pow(base: float, exponent: float) -> float:
    """base**exponent via exp/log for base in (0, 1]; 0**0 = 1."""
    if base <= 0.0:
        return 0.0 if exponent > 0 else 1.0
    return math.exp(exponent * math.log(base))


def _one_minus_pow(p: float, m: float) -> float:
    """1 - p**m without cancellation for p near 1."""
    if p <= 0.0:
        return 1.0
    return -math.expm1(m * math.log(p))


def _collision_excess(p_c: float, m: float) -> float:
    """m*p - (1 - (1-p)**m) = sum_{k>=2} C(m,k) (-1)^k p^k, stable for small m*p."""
    if m * p_c < 1e-3:
        c2 = m * (m - 1) / 2.0
        c3 = c2 * (m - 2) / 3.0
        c4 = c3 * (m - 3) / 4.0
        c5 = c4 * (m - 4) / 5.0
        return p_c * p_c * (c2 - p_c * (c3 - p_c * (c4 - p_c * c5)))
    return m * p_c + math.expm1(m * math.log1p(-p_c))


def _h_over_u2(a: float, u: float, n: float) -> float:
    """(a^n - 1 + n*u) / u^2 with u = 1 - a, stable when n*u is tiny.

    Multiplying by ``a`` gives sum_{k=1}^{n-1} (n-k) a^k, the weighted
    geometric sum behind every cross-step covariance here.
    """
    if a <= 0.0:
        return n - 1.0 if n >= 1.0 else 0.0
    if n * u < 1e-4:
        c2 = n * (n - 1) / 2.0
        c3 = c2 * (n - 2) / 3.0
        c4 = c3 * (n - 3) / 4.0
        c5 = c4 * (n - 4) / 5.0
        return c2 - u * (c3 - u * (c4 - u * c5))
    return (math.expm1(n * math.log(a)) + n * u) / (u * u)


def _coeffs(model: ModelParams, dt_fine: float, m: float):
    """Scaled coefficients at the fine and coarse (m * dt_fine) step sizes."""
    pf = scaled_params(model, dt_fine)
    pc = scaled_params(model, m * dt_fine)
    return pf, pc


def brownian_diff_variance(point: AnalysisPoint) -> float:
    """Variance of the summed Brownian-increment differences after N blocks."""
    return _brownian_diff_variance(point.model, point.dt_fine, point.m_factor, point.n_blocks)


def _brownian_diff_variance(model: ModelParams, dt_fine: float, m: float, n: float) -> float:
    pf, pc = _coeffs(model, dt_fine, m)
    per_block = 2.0 * pc.dt * (math.sqrt(pf.diff_coef) - math.sqrt(pc.diff_coef)) ** 2
    return n * per_block


def transport_diff_variance(point: AnalysisPoint) -> float:
    """Variance of the summed transport-increment differences after N blocks."""
    return _transport_diff_variance(point.model, point.dt_fine, point.m_factor, point.n_blocks)


def _transport_diff_variance(model: ModelParams, dt_fine: float, m: float, n: float) -> float:
    eps2 = model.epsilon**2
    v2 = model.v_char**2
    pf, pc = _coeffs(model, dt_fine, m)
    vf, vc = pf.v_char_dt, pc.v_char_dt
    p = pf.p_no_collide
    one_minus_pm = _one_minus_pow(p, m)  # 1 - p_nc_f^M
    pm = 1.0 - one_minus_pm  # p_nc_f^M

    # per-block variance; the last term is written via the stable
    # M*p_c - (1 - p_nc^M) combination to survive dt_fine << eps^2
    coll = (eps2 + dt_fine) * _collision_excess(pf.p_collide, m)
    per_block = (
        m * dt_fine**2 * vf**2
        - pc.dt**2 * vc**2
        + 2.0 * eps2 * vf**2 * coll
    )

    # cross-block covariance sum: 2 * [s1 * wsum(a1) + s2 * wsum(a2)] with
    # wsum(a) = a * (a^N + N(1-a) - 1) / (1-a)^2.  s1*a1 is expanded
    # analytically so p^(1-M) never overflows.
    s1_a1 = eps2 * v2 * p * one_minus_pm**2 - pc.dt**2 * vc**2 * pm
    cross1 = s1_a1 * _h_over_u2(pm, one_minus_pm, n)

    a2 = pc.p_no_collide
    q = (a2 - pm) / one_minus_pm if one_minus_pm > 0 else 0.0
    inner = q * (1.0 / pf.p_collide - m * pm / one_minus_pm) + eps2 / dt_fine
    s2 = pc.dt**2 * vc**2 * (1.0 - (dt_fine * vf) / (eps2 * vc) * inner)
    cross2 = s2 * a2 * _h_over_u2(a2, pc.p_collide, n)

    return n * per_block + 2.0 * (cross1 + cross2)


def velocity_diff_variance(point: AnalysisPoint) -> float:
    """Variance of V_fine - V_coarse past the first collision: vf^2 - vc^2.

    The closed form corresponds to a fine sub-step aligned uniformly within
    the coarse block; at the block end alone the correlation is stronger.
    """
    pf, pc = _coeffs(point.model, point.dt_fine, point.m_factor)
    return pf.v_char_dt**2 - pc.v_char_dt**2


def position_diff_variance(point: AnalysisPoint) -> float:
    """Brownian plus transport difference variance (independent parts)."""
    return brownian_diff_variance(point) + transport_diff_variance(point)


def single_level_position_variance(model: ModelParams, dt: float, n_steps: float) -> float:
    """V[X(t*)] for one level at equilibrium start.

    Brownian part: 2 D dt per step, independent.  Transport part: the
    stationary velocity chain has covariance v_dt^2 p_nc^|k| across steps.
    Derived for the coarse-level threshold; validated against brute-force MC.
    """
    p = scaled_params(model, dt)
    brownian = 2.0 * p.diff_coef * dt * n_steps
    wsum = p.p_no_collide * _h_over_u2(p.p_no_collide, p.p_collide, n_steps)
    transport = dt**2 * p.v_char_dt**2 * (n_steps + 2.0 * wsum)
    return brownian + transport


def leading_order_variance(kind: str, point: AnalysisPoint) -> float:
    """First Maclaurin term in dt_fine of the matching difference variance.

    kind is one of "brownian", "transport", "velocity".
    """
    eps2 = point.epsilon**2
    v2 = point.v_char**2
    m = point.m_factor
    if kind == "brownian":
        return (2.0 * point.t_end * v2 / eps2) * (math.sqrt(m) - 1.0) ** 2 * point.dt_fine
    if kind == "transport":
        ratio = point.t_end / eps2
        return 2.0 * v2 * (m - 1) * (math.exp(-ratio) - 1.0 + ratio) * point.dt_fine
    if kind == "velocity":
        return 2.0 * v2 * (m - 1) / (eps2 * eps2) * point.dt_fine
    raise InvalidParameterError(f"unknown leading-order kind {kind!r}")


def variance_bound(point: AnalysisPoint, k_x: float, k_v: float) -> float:
    """Lipschitz bound on the difference-estimator variance.

    K_x^2 (V_W + V_T) + K_v^2 V_vel + 2 K_x K_v sqrt((V_W + V_T) V_vel).
    """
    if k_x < 0 or k_v < 0:
        raise InvalidParameterError("Lipschitz constants must be >= 0")
    pos = position_diff_variance(point)
    vel = velocity_diff_variance(point)
    return k_x**2 * pos + k_v**2 * vel + 2.0 * k_x * k_v * math.sqrt(max(pos * vel, 0.0))


@dataclass(frozen=True)
class ThresholdResult:
    """Outcome of the coarse-level threshold root search in M."""

    m_root: Optional[float]
    lhs_low: float
    lhs_high: float
    bracket: tuple

    @property
    def has_root(self) -> bool:
        return self.m_root is not None


def _threshold_lhs(model: ModelParams, t_end: float, dt1: float, m: float) -> float:
    """sqrt(C0 V[F0]) + sqrt((C0+C1) V[F1-F0]) - sqrt(C1 V[F1]); F = position.

    Costs are in units of a dt = eps^2 trajectory: C1 = eps^2/dt1 and
    C0 = eps^2/(M dt1).
    """
    eps2 = model.epsilon**2
    c1 = eps2 / dt1
    c0 = eps2 / (m * dt1)
    v1 = single_level_position_variance(model, dt1, t_end / dt1)
    v0 = single_level_position_variance(model, m * dt1, t_end / (m * dt1))
    vd = _brownian_diff_variance(model, dt1, m, t_end / (m * dt1)) + _transport_diff_variance(
        model, dt1, m, t_end / (m * dt1)
    )
    return math.sqrt(c0 * v0) + math.sqrt((c0 + c1) * max(vd, 0.0)) - math.sqrt(c1 * v1)


def coarse_level_threshold(
    epsilon: float,
    v_char: float,
    t_end: float,
    dt_level1: float,
    bracket: tuple = (1.5, 64.0),
    tol: float = 1e-3,
) -> ThresholdResult:
    """Real M where adding a coarse level Delta_t0 = M * dt_level1 breaks even.

    The left-hand side is positive while leaving the coarse level out is
    cheaper and crosses zero once M is large enough; bisection to ``tol`` in
    M.  No sign change over the bracket (or t* <= dt_level1) yields an
    explicit no-root result.
    """
    model = ModelParams(epsilon=epsilon, v_char=v_char)
    eps2 = epsilon * epsilon
    if abs(dt_level1 - eps2) > 1e-9 * eps2:
        raise InvalidParameterError(
            f"the threshold analysis fixes dt_level1 = epsilon^2; got {dt_level1} vs {eps2}"
        )
    lo, hi = bracket
    if t_end <= dt_level1:
        return ThresholdResult(m_root=None, lhs_low=math.nan, lhs_high=math.nan, bracket=bracket)
    f_lo = _threshold_lhs(model, t_end, dt_level1, lo)
    f_hi = _threshold_lhs(model, t_end, dt_level1, hi)
    if not (np.isfinite(f_lo) and np.isfinite(f_hi)) or f_lo * f_hi > 0:
        return ThresholdResult(m_root=None, lhs_low=f_lo, lhs_high=f_hi, bracket=bracket)
    a, b, fa = lo, hi, f_lo
    while b - a > tol:
        mid = 0.5 * (a + b)
        fm = _threshold_lhs(model, t_end, dt_level1, mid)
        if fa * fm <= 0:
            b = mid
        else:
            a, fa = mid, fm
    return ThresholdResult(m_root=0.5 * (a + b), lhs_low=f_lo, lhs_high=f_hi, bracket=bracket)


def threshold_lhs(epsilon: float, v_char: float, t_end: float, dt_level1: float, m: float) -> float:
    """Left-hand side of the coarse-level break-even inequality at real M."""
    model = ModelParams(epsilon=epsilon, v_char=v_char)
    return _threshold_lhs(model, t_end, dt_level1, m)


@dataclass(frozen=True)
class RateFit:
    """Fitted log2-log2 slopes of bias and variance decay against dt.

    ``gamma`` is the cost-growth exponent per level, log2(M) exactly.  The
    residuals are RMS deviations of the fits, for flagging poor power laws.
    """

    alpha: float
    beta: float
    gamma: float
    alpha_resid: float
    beta_resid: float


def fit_convergence_rates(series, m_factor: int) -> RateFit:
    """Least-squares power-law fit of (dt, |mean diff|, var diff) triples."""
    pts = list(series)
    if len(pts) < 3:
        raise InvalidParameterError(f"need at least 3 points to fit rates, got {len(pts)}")
    dts = np.array([p[0] for p in pts], dtype=float)
    means = np.array([abs(p[1]) for p in pts], dtype=float)
    variances = np.array([p[2] for p in pts], dtype=float)
    if np.any(dts <= 0) or np.any(means <= 0) or np.any(variances <= 0):
        raise InvalidParameterError("rate fitting needs positive dt, |mean| and variance values")
    x = np.log2(dts)

    def slope_resid(y):
        coef = np.polyfit(x, y, 1)
        resid = y - np.polyval(coef, x)
        return float(coef[0]), float(np.sqrt(np.mean(resid**2)))

    alpha, ra = slope_resid(np.log2(means))
    beta, rb = slope_resid(np.log2(variances))
    return RateFit(alpha=alpha, beta=beta, gamma=math.log2(m_factor), alpha_resid=ra, beta_resid=rb)
