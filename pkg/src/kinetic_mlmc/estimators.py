"""Quantity-of-interest evaluation and Monte Carlo estimators.

Sampling is organized in fixed-size batches.  Batch ``b`` of a stream always
draws from the generator seeded by ``SeedSequence(seed, spawn_key=(domain,
level, b))`` and always simulates the full batch, consuming only the requested
slice.  Results therefore depend on (seed, key, requested sample ranges) and
on nothing else: not on the worker count, and not on how top-ups were split.

Statistics are streamed through ``EstimatorStats`` (Welford single-pass update
plus exact pairwise merge) and reduced over batches in index order.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .coupling import simulate_coupled_ensemble
from .kinetics import InvalidParameterError, ModelParams
from .scheme import ParticleState, simulate_ensemble, steps_for_horizon

__all__ = [
    "QoiKind",
    "qoi_eval",
    "qoi_eval_arrays",
    "EstimatorStats",
    "merge_stats",
    "tree_merge",
    "substream",
    "single_level_estimate",
    "difference_estimate",
    "coupled_qoi_stats",
    "PairStats",
    "DEFAULT_BATCH_SIZE",
]

DEFAULT_BATCH_SIZE = 4096

# stream domains keep the substreams of unrelated sampling tasks disjoint
DOMAIN_SINGLE = 0
DOMAIN_COUPLED = 1
DOMAIN_DEMO = 2
DOMAIN_SCAN = 3


class QoiKind(enum.Enum):
    """Scalar quantity of interest F(x, v); squared position is the default."""

    X_SQUARED = "x_squared"
    X = "x"
    V = "v"
    V_SQUARED = "v_squared"


def qoi_eval(kind: QoiKind, state: ParticleState) -> float:
    """Evaluate F at one particle state."""
    return float(qoi_eval_arrays(kind, np.asarray(state.x), np.asarray(state.v)))


def qoi_eval_arrays(kind: QoiKind, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    if kind is QoiKind.X_SQUARED:
        return x * x
    if kind is QoiKind.X:
        return x
    if kind is QoiKind.V:
        return v
    if kind is QoiKind.V_SQUARED:
        return v * v
    raise InvalidParameterError(f"unknown QoI kind {kind!r}")


@dataclass
class EstimatorStats:
    """Streaming count/mean/M2 for a scalar sample stream; mergeable."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    @property
    def variance(self) -> float:
        """Unbiased sample variance; 0 when fewer than two samples."""
        if self.count < 2:
            return 0.0
        return self.m2 / (self.count - 1)

    @property
    def std_error(self) -> float:
        """Standard error of the mean; 0 when fewer than two samples."""
        if self.count < 2:
            return 0.0
        return math.sqrt(self.variance / self.count)

    def push(self, value: float) -> None:
        """Welford single-pass update with one sample."""
        self.count += 1
        delta = value - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (value - self.mean)

    @classmethod
    def from_samples(cls, values: np.ndarray) -> "EstimatorStats":
        values = np.asarray(values, dtype=float)
        n = values.size
        if n == 0:
            return cls()
        mean = float(values.mean())
        m2 = float(np.sum((values - mean) ** 2))
        return cls(count=n, mean=mean, m2=m2)


def merge_stats(a: EstimatorStats, b: EstimatorStats) -> EstimatorStats:
    """Stats of the concatenated streams (Chan's pairwise merge)."""
    if a.count == 0:
        return EstimatorStats(b.count, b.mean, b.m2)
    if b.count == 0:
        return EstimatorStats(a.count, a.mean, a.m2)
    n = a.count + b.count
    delta = b.mean - a.mean
    mean = a.mean + delta * (b.count / n)
    m2 = a.m2 + b.m2 + delta * delta * (a.count * b.count / n)
    return EstimatorStats(count=n, mean=mean, m2=m2)


def tree_merge(stats_list) -> EstimatorStats:
    """Balanced pairwise reduction in list order (worker-count independent)."""
    items = list(stats_list)
    if not items:
        return EstimatorStats()
    while len(items) > 1:
        items = [
            merge_stats(items[i], items[i + 1]) if i + 1 < len(items) else items[i]
            for i in range(0, len(items), 2)
        ]
    return items[0]


def substream(seed: int, key: tuple) -> np.random.Generator:
    """Independent generator for a (domain, level, batch, ...) key."""
    ss = np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def _batch_slices(start: int, stop: int, batch_size: int):
    """Yield (batch_index, lo, hi) covering samples [start, stop)."""
    b = start // batch_size
    while b * batch_size < stop:
        lo = max(start, b * batch_size) - b * batch_size
        hi = min(stop, (b + 1) * batch_size) - b * batch_size
        yield b, lo, hi
        b += 1


def _run_ordered(tasks, threads: int):
    """Run thunks, preserving order; thread pool only when it can help."""
    if threads > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda f: f(), tasks))
    return [f() for f in tasks]


def single_level_estimate(
    model: ModelParams,
    dt: float,
    t_end: float,
    qoi: QoiKind,
    sample_count: int,
    seed: int,
    *,
    level: int = 0,
    start: int = 0,
    threads: int = 1,
    batch_size: int = DEFAULT_BATCH_SIZE,
    domain: int = DOMAIN_SINGLE,
) -> EstimatorStats:
    """Stats of F over independent single-level paths [start, start+sample_count)."""
    if sample_count < 2 and start == 0:
        raise InvalidParameterError(f"sample_count must be >= 2, got {sample_count}")
    n_steps = steps_for_horizon(t_end, dt)

    def make_task(b, lo, hi):
        def task():
            rng = substream(seed, (domain, level, b))
            res = simulate_ensemble(model, dt, n_steps, rng, batch_size)
            vals = qoi_eval_arrays(qoi, res.x[lo:hi], res.v_char_dt * res.vbar[lo:hi])
            return EstimatorStats.from_samples(vals)

        return task

    tasks = [make_task(b, lo, hi) for b, lo, hi in _batch_slices(start, start + sample_count, batch_size)]
    return tree_merge(_run_ordered(tasks, threads))


@dataclass
class PairStats:
    """Per-level stats from coupled pairs: difference, fine and coarse marginals."""

    diff: EstimatorStats
    fine: EstimatorStats
    coarse: EstimatorStats


def coupled_qoi_stats(
    model: ModelParams,
    dt_fine: float,
    m_factor: int,
    t_end: float,
    qoi: QoiKind,
    sample_count: int,
    seed: int,
    *,
    level: int = 0,
    start: int = 0,
    threads: int = 1,
    batch_size: int = DEFAULT_BATCH_SIZE,
    domain: int = DOMAIN_COUPLED,
) -> PairStats:
    """Difference/fine/coarse stats over coupled pairs [start, start+sample_count)."""
    n_blocks = steps_for_horizon(t_end, m_factor * dt_fine)

    def make_task(b, lo, hi):
        def task():
            rng = substream(seed, (domain, level, b))
            res = simulate_coupled_ensemble(model, dt_fine, m_factor, n_blocks, rng, batch_size)
            f = qoi_eval_arrays(qoi, res.x_f[lo:hi], res.v_char_f * res.vbar_f[lo:hi])
            c = qoi_eval_arrays(qoi, res.x_c[lo:hi], res.v_char_c * res.vbar_c[lo:hi])
            return (
                EstimatorStats.from_samples(f - c),
                EstimatorStats.from_samples(f),
                EstimatorStats.from_samples(c),
            )

        return task

    tasks = [make_task(b, lo, hi) for b, lo, hi in _batch_slices(start, start + sample_count, batch_size)]
    results = _run_ordered(tasks, threads)
    return PairStats(
        diff=tree_merge(r[0] for r in results),
        fine=tree_merge(r[1] for r in results),
        coarse=tree_merge(r[2] for r in results),
    )


def difference_estimate(
    model: ModelParams,
    dt_fine: float,
    m_factor: int,
    t_end: float,
    qoi: QoiKind,
    sample_count: int,
    seed: int,
    **kwargs,
) -> EstimatorStats:
    """Stats of F_fine - F_coarse over independent coupled pairs."""
    return coupled_qoi_stats(model, dt_fine, m_factor, t_end, qoi, sample_count, seed, **kwargs).diff
