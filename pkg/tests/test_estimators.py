import math

import numpy as np
import pytest

from kinetic_mlmc.estimators import (
    EstimatorStats,
    QoiKind,
    coupled_qoi_stats,
    difference_estimate,
    merge_stats,
    qoi_eval,
    single_level_estimate,
    tree_merge,
)
from kinetic_mlmc.kinetics import InvalidParameterError, ModelParams
from kinetic_mlmc.scheme import ParticleState


def test_qoi_eval_cases():
    s = ParticleState(x=2.0, v=-1.0, vbar=-1.0)
    assert qoi_eval(QoiKind.X_SQUARED, s) == 4.0
    assert qoi_eval(QoiKind.V, s) == -1.0
    assert qoi_eval(QoiKind.X, s) == 2.0
    assert qoi_eval(QoiKind.V_SQUARED, s) == 1.0
    assert qoi_eval(QoiKind.X_SQUARED, ParticleState(x=0.0, v=5.0, vbar=1.0)) == 0.0


def two_pass(values):
    values = np.asarray(values, dtype=float)
    return values.mean(), values.var(ddof=1) if values.size > 1 else 0.0


def test_merge_equals_concatenated_stream():
    a = EstimatorStats.from_samples([1.0, 2.0, 3.0])
    b = EstimatorStats.from_samples([4.0, 5.0])
    m = merge_stats(a, b)
    assert m.count == 5
    assert m.mean == pytest.approx(3.0)
    assert m.variance == pytest.approx(2.5)


def test_merge_identity_element():
    x = EstimatorStats.from_samples([1.0, 7.0])
    for merged in (merge_stats(x, EstimatorStats()), merge_stats(EstimatorStats(), x)):
        assert merged.count == x.count
        assert merged.mean == x.mean
        assert merged.m2 == x.m2


def test_merge_commutes_and_matches_two_pass():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n1, n2 = rng.integers(1, 50, size=2)
        xs, ys = rng.normal(size=n1) * 10, rng.normal(size=n2) + 3
        a, b = EstimatorStats.from_samples(xs), EstimatorStats.from_samples(ys)
        ab, ba = merge_stats(a, b), merge_stats(b, a)
        assert ab.mean == pytest.approx(ba.mean, rel=1e-12, abs=1e-12)
        assert ab.m2 == pytest.approx(ba.m2, rel=1e-12, abs=1e-12)
        mean, var = two_pass(np.concatenate([xs, ys]))
        assert ab.mean == pytest.approx(mean, rel=1e-12, abs=1e-12)
        if ab.count > 1:
            assert ab.variance == pytest.approx(var, rel=1e-10)


def test_streaming_welford_matches_two_pass_oracle():
    rng = np.random.default_rng(1)
    for _ in range(10_000):
        n = int(rng.integers(2, 40))
        scale = 10.0 ** rng.integers(-3, 4)
        xs = rng.normal(loc=rng.normal() * scale, scale=scale, size=n)
        st = EstimatorStats()
        for x in xs:
            st.push(float(x))
        mean, var = two_pass(xs)
        assert st.mean == pytest.approx(mean, rel=1e-10, abs=1e-12)
        assert st.variance == pytest.approx(var, rel=1e-10)


def test_tree_merge_is_partition_insensitive():
    rng = np.random.default_rng(2)
    xs = rng.normal(size=1000)
    whole = EstimatorStats.from_samples(xs)
    parts = [EstimatorStats.from_samples(xs[i : i + 100]) for i in range(0, 1000, 100)]
    merged = tree_merge(parts)
    assert merged.count == whole.count
    assert merged.mean == pytest.approx(whole.mean, rel=1e-12)
    assert merged.variance == pytest.approx(whole.variance, rel=1e-10)


def test_single_level_estimate_reference_point():
    # one-step level: E[x^2] = 0.99, V[x^2] = 1.96 exactly
    model = ModelParams(epsilon=0.1)
    stats = single_level_estimate(model, 0.5, 0.5, QoiKind.X_SQUARED, 100_000, seed=10)
    assert abs(stats.mean - 0.99) < 3 * stats.std_error
    assert stats.variance == pytest.approx(1.96, rel=0.1)


def test_single_level_estimate_requires_two_samples():
    model = ModelParams(epsilon=0.1)
    with pytest.raises(InvalidParameterError):
        single_level_estimate(model, 0.5, 0.5, QoiKind.X_SQUARED, 1, seed=0)


def test_difference_estimate_reference_point():
    # table row: dt_fine = 0.005, M = 2: mean ~ 1.07e-2, V ~ 0.437
    model = ModelParams(epsilon=0.1)
    stats = difference_estimate(model, 0.005, 2, 0.5, QoiKind.X_SQUARED, 100_000, seed=11)
    assert abs(stats.mean - 1.07e-2) < 3 * stats.std_error
    assert stats.variance == pytest.approx(0.437, rel=0.1)


def test_difference_estimate_strategy2_level1_point():
    # coarse dt = t* = 0.5, fine dt = eps^2 = 0.01: mean ~ -0.125, V ~ 1.42
    model = ModelParams(epsilon=0.1)
    stats = difference_estimate(model, 0.01, 50, 0.5, QoiKind.X_SQUARED, 100_000, seed=12)
    assert abs(stats.mean - (-0.125)) < 3 * stats.std_error
    assert stats.variance == pytest.approx(1.42, rel=0.1)


def test_difference_estimate_rejects_degenerate_ratio():
    model = ModelParams(epsilon=0.1)
    with pytest.raises(InvalidParameterError):
        difference_estimate(model, 0.005, 1, 0.5, QoiKind.X_SQUARED, 100, seed=0)


def test_cauchy_schwarz_bound_on_difference_variance():
    model = ModelParams(epsilon=0.5)
    for qoi in QoiKind:
        st = coupled_qoi_stats(model, 0.2, 5, 10.0, qoi, 20_000, seed=13)
        bound = (
            st.fine.variance
            + st.coarse.variance
            + 2 * math.sqrt(st.fine.variance * st.coarse.variance)
        )
        assert st.diff.variance <= bound * (1 + 1e-12)


def test_estimates_are_threads_invariant():
    model = ModelParams(epsilon=0.5)
    kw = dict(batch_size=1000)
    a = single_level_estimate(model, 0.5, 5.0, QoiKind.X_SQUARED, 5000, seed=14, threads=1, **kw)
    b = single_level_estimate(model, 0.5, 5.0, QoiKind.X_SQUARED, 5000, seed=14, threads=4, **kw)
    assert (a.count, a.mean, a.m2) == (b.count, b.mean, b.m2)
    c = coupled_qoi_stats(model, 0.2, 5, 10.0, QoiKind.X_SQUARED, 5000, seed=14, threads=1, **kw)
    d = coupled_qoi_stats(model, 0.2, 5, 10.0, QoiKind.X_SQUARED, 5000, seed=14, threads=4, **kw)
    assert (c.diff.mean, c.diff.m2) == (d.diff.mean, d.diff.m2)


def test_extension_equals_one_shot():
    # sampling [0, 300) in two pieces must reproduce the one-shot stream
    model = ModelParams(epsilon=0.5)
    kw = dict(batch_size=128)
    whole = single_level_estimate(model, 0.5, 5.0, QoiKind.X_SQUARED, 300, seed=15, **kw)
    first = single_level_estimate(model, 0.5, 5.0, QoiKind.X_SQUARED, 200, seed=15, **kw)
    second = single_level_estimate(model, 0.5, 5.0, QoiKind.X_SQUARED, 100, seed=15, start=200, **kw)
    merged = merge_stats(first, second)
    assert merged.count == whole.count
    assert merged.mean == pytest.approx(whole.mean, rel=1e-12)
    assert merged.m2 == pytest.approx(whole.m2, rel=1e-10)


def test_telescoping_mean_matches_fine_single_level():
    # sum of difference means across a short ladder equals the finest
    # single-level mean within combined MC error
    model = ModelParams(epsilon=0.5)
    t_end, m = 4.0, 2
    dts = [1.0, 0.5, 0.25]
    total = single_level_estimate(model, dts[0], t_end, QoiKind.X_SQUARED, 200_000, seed=16)
    mean_sum, var_sum = total.mean, total.std_error**2
    for lev, dt in enumerate(dts[1:], start=1):
        st = coupled_qoi_stats(model, dt, m, t_end, QoiKind.X_SQUARED, 200_000, seed=16, level=lev)
        mean_sum += st.diff.mean
        var_sum += st.diff.std_error**2
    fine = single_level_estimate(model, dts[-1], t_end, QoiKind.X_SQUARED, 200_000, seed=17, level=9)
    combined_se = math.sqrt(var_sum + fine.std_error**2)
    assert abs(mean_sum - fine.mean) < 3 * combined_se
