"""Level strategies, cost model, sample allocation, and the adaptive driver.

Costs are counted in units of one trajectory at dt = eps^2.  A single-level
sample at dt costs eps^2/dt; a difference-level sample pays for both members
of the pair.  Two level ladders are supported:

  * geometric-from-eps2: dt_0 = eps^2, dt_l = eps^2 M^-l
  * extra-coarse-level:  dt_0 = t*,    dt_1 = eps^2, dt_l = eps^2 M^(1-l)

The driver warms each level up, tops existing levels up to the optimal
allocation computed from current variance estimates, and keeps appending
levels until the inter-level means certify that the remaining bias fits in
the error budget (E^2/2 to variance, E^2/2 to bias).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .estimators import (
    DEFAULT_BATCH_SIZE,
    EstimatorStats,
    QoiKind,
    coupled_qoi_stats,
    merge_stats,
    single_level_estimate,
)
from .kinetics import InvalidParameterError, ModelParams

__all__ = [
    "Strategy",
    "LevelSpec",
    "MlmcConfig",
    "MlmcLevelRow",
    "MlmcReport",
    "build_levels",
    "sample_counts",
    "classical_equivalent_cost",
    "warmup_count",
    "run_mlmc",
]


class Strategy(enum.Enum):
    GEOMETRIC_FROM_EPS2 = "geometric_from_eps2"
    EXTRA_COARSE_LEVEL = "extra_coarse_level"


@dataclass(frozen=True)
class LevelSpec:
    """One MLMC level; difference levels couple to the next-coarser step."""

    index: int
    dt: float
    steps: int
    cost: float
    is_difference: bool
    m_ratio: int = 0  # dt_coarser / dt for difference levels


def _integer_ratio(num: float, den: float, what: str) -> int:
    ratio = num / den
    n = round(ratio)
    if n < 1 or abs(ratio - n) > 1e-9 * max(1.0, abs(ratio)):
        raise InvalidParameterError(f"{what} must be a positive integer, got {ratio}")
    return int(n)


def build_levels(config: "MlmcConfig", level_count: int) -> list:
    """The first ``level_count`` level specs for the configured strategy."""
    if level_count < 1:
        raise InvalidParameterError(f"level_count must be >= 1, got {level_count}")
    eps2 = config.model.epsilon**2
    t_end = config.t_end
    m = config.m_factor
    n_eps = _integer_ratio(t_end, eps2, "t_end / epsilon^2")

    levels = []
    if config.strategy is Strategy.GEOMETRIC_FROM_EPS2:
        for l in range(level_count):
            dt = eps2 / m**l
            steps = n_eps * m**l
            cost = float(m**l) if l == 0 else float(m**l + m ** (l - 1))
            levels.append(
                LevelSpec(index=l, dt=dt, steps=steps, cost=cost, is_difference=l > 0, m_ratio=m if l > 0 else 0)
            )
    elif config.strategy is Strategy.EXTRA_COARSE_LEVEL:
        if n_eps < 2:
            raise InvalidParameterError(
                f"extra-coarse strategy needs t_end/epsilon^2 >= 2, got {n_eps}"
            )
        for l in range(level_count):
            if l == 0:
                levels.append(
                    LevelSpec(index=0, dt=t_end, steps=1, cost=1.0 / n_eps, is_difference=False)
                )
            else:
                dt = eps2 / m ** (l - 1)
                steps = n_eps * m ** (l - 1)
                coarser_steps = 1 if l == 1 else n_eps * m ** (l - 2)
                cost = (steps + coarser_steps) / n_eps
                ratio = n_eps if l == 1 else m
                levels.append(
                    LevelSpec(index=l, dt=dt, steps=steps, cost=cost, is_difference=True, m_ratio=ratio)
                )
    else:
        raise InvalidParameterError(f"unknown strategy {config.strategy!r}")
    return levels


def sample_counts(rmse_target: float, variances, costs) -> list:
    """Optimal per-level sample counts for a variance budget of E^2/2.

    ceil(2 E^-2 sqrt(V_l/C_l) * sum_k sqrt(V_k C_k)), floored at one sample.
    """
    v = np.asarray(list(variances), dtype=float)
    c = np.asarray(list(costs), dtype=float)
    if not (np.all(np.isfinite(v)) and np.all(np.isfinite(c))):
        raise InvalidParameterError("variances and costs must be finite")
    if np.any(v < 0) or np.any(c <= 0):
        raise InvalidParameterError("need variances >= 0 and costs > 0")
    if not rmse_target > 0:
        raise InvalidParameterError(f"rmse_target must be > 0, got {rmse_target}")
    if math.isinf(rmse_target):
        return [1] * len(v)
    total = float(np.sum(np.sqrt(v * c)))
    counts = 2.0 * rmse_target**-2 * np.sqrt(v / c) * total
    return [max(1, int(math.ceil(p))) for p in counts]


def classical_equivalent_cost(
    fine_variance: float, estimator_variance_sum: float, fine_cost: float
) -> float:
    """Cost of a classical MC run matching the multilevel bias and variance.

    ceil(V[F_L]/sum_l V[Y_l]) samples at (2/3) C_L each; the 2/3 removes the
    correlated-coarse share of a difference sample (exact for M = 2).
    """
    if not estimator_variance_sum > 0:
        raise InvalidParameterError(
            f"estimator_variance_sum must be > 0, got {estimator_variance_sum}"
        )
    p_classical = math.ceil(fine_variance / estimator_variance_sum)
    return p_classical * (2.0 / 3.0) * fine_cost


# warm-up sample counts per RMSE decade, geometric in between
_WARMUP_ANCHORS = ((-3.0, 1000.0), (-2.0, 500.0), (-1.0, 40.0))


def warmup_count(rmse_target: float) -> int:
    """Initial samples per level: 40/500/1000 at E = 0.1/0.01/0.001."""
    if not rmse_target > 0:
        raise InvalidParameterError(f"rmse_target must be > 0, got {rmse_target}")
    xs = [a[0] for a in _WARMUP_ANCHORS]
    ys = [math.log(a[1]) for a in _WARMUP_ANCHORS]
    x = math.log10(rmse_target) if math.isfinite(rmse_target) else xs[-1]
    x = min(max(x, xs[0]), xs[-1])
    return max(2, int(round(math.exp(np.interp(x, xs, ys)))))


@dataclass
class MlmcConfig:
    model: ModelParams
    t_end: float
    m_factor: int
    strategy: Strategy
    rmse_target: float
    qoi: QoiKind = QoiKind.X_SQUARED
    initial_samples: Optional[int] = None  # None: paper's per-E warm-up rule
    max_levels: int = 20
    alpha: Optional[float] = None  # bias decay rate per level; None: log2(M)
    threads: int = 1
    batch_size: int = DEFAULT_BATCH_SIZE

    def __post_init__(self):
        if self.m_factor < 2:
            raise InvalidParameterError(f"m_factor must be >= 2, got {self.m_factor}")
        if not self.rmse_target > 0:
            raise InvalidParameterError(f"rmse_target must be > 0, got {self.rmse_target}")


@dataclass
class MlmcLevelRow:
    """One report row, mirroring the experiment-table column layout."""

    index: int
    dt: float
    samples: int
    var_fine: float
    mean_diff: float
    var_diff: float
    var_estimator: float
    cost: float
    level_cost: float


@dataclass
class MlmcReport:
    rows: list
    estimate: float
    estimator_variance_sum: float
    total_cost: float
    converged: bool
    rmse_target: float
    bias_proxy: float
    classical_cost: Optional[float]
    speedup: Optional[float]

    def row_tuples(self):
        return [
            (
                r.index,
                r.dt,
                r.samples,
                r.var_fine,
                r.mean_diff,
                r.var_diff,
                r.var_estimator,
                r.cost,
                r.level_cost,
            )
            for r in self.rows
        ]


@dataclass
class _LevelState:
    spec: LevelSpec
    taken: int = 0
    diff: EstimatorStats = field(default_factory=EstimatorStats)
    fine: EstimatorStats = field(default_factory=EstimatorStats)


class _Sampler:
    """Tops level states up to target sample counts on deterministic substreams."""

    def __init__(self, config: MlmcConfig, seed: int):
        self.config = config
        self.seed = seed

    def top_up(self, state: _LevelState, target: int) -> None:
        if target <= state.taken:
            return
        cfg = self.config
        new = target - state.taken
        if state.spec.is_difference:
            got = coupled_qoi_stats(
                cfg.model,
                state.spec.dt,
                state.spec.m_ratio,
                cfg.t_end,
                cfg.qoi,
                new,
                self.seed,
                level=state.spec.index,
                start=state.taken,
                threads=cfg.threads,
                batch_size=cfg.batch_size,
            )
            state.diff = merge_stats(state.diff, got.diff)
            state.fine = merge_stats(state.fine, got.fine)
        else:
            got = single_level_estimate(
                cfg.model,
                state.spec.dt,
                cfg.t_end,
                cfg.qoi,
                new,
                self.seed,
                level=state.spec.index,
                start=state.taken,
                threads=cfg.threads,
                batch_size=cfg.batch_size,
            )
            state.diff = merge_stats(state.diff, got)
            state.fine = merge_stats(state.fine, got)
        state.taken = target


def _bias_converged(states, rmse_target: float, alpha: float) -> bool:
    """Weak-error test over the last three levels' inter-level means.

    The remaining bias is extrapolated as max |mean(Y_l)| / (2^alpha - 1) and
    must fit the bias half of the MSE budget, E/sqrt(2).  Needs at least four
    levels before the window is meaningful.
    """
    if not math.isfinite(rmse_target):
        return True
    if len(states) <= 3:
        return False
    window = [abs(st.diff.mean) for st in states[-3:]]
    remaining = max(window) / (2.0**alpha - 1.0)
    return remaining < rmse_target / math.sqrt(2.0)


def run_mlmc(config: MlmcConfig, seed: int) -> MlmcReport:
    """Adaptive multilevel run; returns a full report, converged or not.

    Each iteration appends one level, warms it up, tops the existing levels
    up to the allocation computed in the previous iteration, and refreshes
    the allocation from all samples taken so far.
    """
    n0 = config.initial_samples or warmup_count(config.rmse_target)
    alpha = config.alpha if config.alpha is not None else math.log2(config.m_factor)
    sampler = _Sampler(config, seed)

    states = [_LevelState(spec) for spec in build_levels(config, 2)]
    for st in states:
        sampler.top_up(st, n0)
    opt = sample_counts(
        config.rmse_target, [st.diff.variance for st in states], [st.spec.cost for st in states]
    )

    converged = False
    while True:
        if _bias_converged(states, config.rmse_target, alpha):
            converged = True
            break
        if len(states) >= config.max_levels:
            break
        new_spec = build_levels(config, len(states) + 1)[-1]
        new_state = _LevelState(new_spec)
        sampler.top_up(new_state, n0)
        for st, target in zip(states, opt):
            sampler.top_up(st, target)
        states.append(new_state)
        opt = sample_counts(
            config.rmse_target,
            [st.diff.variance for st in states],
            [st.spec.cost for st in states],
        )

    rows = []
    for st in states:
        var_est = st.diff.variance / st.taken if st.taken > 0 else math.inf
        rows.append(
            MlmcLevelRow(
                index=st.spec.index,
                dt=st.spec.dt,
                samples=st.taken,
                var_fine=st.fine.variance,
                mean_diff=st.diff.mean,
                var_diff=st.diff.variance,
                var_estimator=var_est,
                cost=st.spec.cost,
                level_cost=st.taken * st.spec.cost,
            )
        )
    est_var_sum = sum(r.var_estimator for r in rows)
    total_cost = sum(r.level_cost for r in rows)
    classical = None
    speedup = None
    if est_var_sum > 0:
        classical = classical_equivalent_cost(rows[-1].var_fine, est_var_sum, rows[-1].cost)
        if total_cost > 0:
            speedup = classical / total_cost
    return MlmcReport(
        rows=rows,
        estimate=sum(r.mean_diff for r in rows),
        estimator_variance_sum=est_var_sum,
        total_cost=total_cost,
        converged=converged,
        rmse_target=config.rmse_target,
        bias_proxy=abs(rows[-1].mean_diff),
        classical_cost=classical,
        speedup=speedup,
    )
