"""Command-line entry point: experiments in, reproducible CSV out.

Every run resolves its configuration from defaults, an optional flat
``key = value`` config file, and command-line flags (flags win).  The
resolved configuration, including the seed, is embedded as ``# key = value``
comment lines at the top of each CSV; re-running any command with those
values reproduces the file byte for byte, independent of the thread count.

Exit codes: 0 success, 2 invalid input, 3 non-convergence.
"""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from . import analysis
from .coupling import simulate_coupled_ensemble
from .estimators import (
    DOMAIN_DEMO,
    DOMAIN_SCAN,
    QoiKind,
    coupled_qoi_stats,
    substream,
)
from .kinetics import (
    ContractViolationError,
    InvalidParameterError,
    ModelParams,
    VelocityDist,
)
from .mlmc import MlmcConfig, Strategy, run_mlmc
from .scheme import steps_for_horizon

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NO_CONVERGENCE = 3

_DIST_ALIASES = {
    "two_speed": VelocityDist.TWO_SPEED,
    "twospeed": VelocityDist.TWO_SPEED,
    "two-speed": VelocityDist.TWO_SPEED,
    "gaussian": VelocityDist.GAUSSIAN,
    "normal": VelocityDist.GAUSSIAN,
}

_STRATEGY_ALIASES = {
    "1": Strategy.GEOMETRIC_FROM_EPS2,
    "geometric": Strategy.GEOMETRIC_FROM_EPS2,
    "geometric_from_eps2": Strategy.GEOMETRIC_FROM_EPS2,
    "2": Strategy.EXTRA_COARSE_LEVEL,
    "extra_coarse": Strategy.EXTRA_COARSE_LEVEL,
    "extra_coarse_level": Strategy.EXTRA_COARSE_LEVEL,
}

_QOI_ALIASES = {k.value: k for k in QoiKind}


def fmt(value) -> str:
    """Fixed CSV number formatting: 17 significant digits for floats."""
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, float) and math.isnan(value):
        return "nan"
    return format(float(value), ".17g")


def parse_config_file(path: str) -> dict:
    """Flat ``key = value`` lines; '#' starts a comment; later keys win."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidParameterError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, _, val = line.partition("=")
            values[key.strip()] = val.strip()
    return values


def write_csv(path: str, config: dict, columns, rows) -> None:
    lines = [f"# {key} = {config[key]}" for key in sorted(config)]
    lines.append(",".join(columns))
    for row in rows:
        lines.append(",".join(fmt(v) for v in row))
    text = "\n".join(lines) + "\n"
    if path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)


def read_csv(path: str):
    """Read a CSV written by ``write_csv``: (config dict, column dict)."""
    config = {}
    names = None
    data = []
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.rstrip("\n")
            if line.startswith("#"):
                body = line[1:].strip()
                if "=" in body:
                    key, _, val = body.partition("=")
                    config[key.strip()] = val.strip()
                continue
            if not line:
                continue
            if names is None:
                names = line.split(",")
            else:
                data.append(line.split(","))
    if names is None:
        return config, {}
    cols = {}
    for j, name in enumerate(names):
        vals = [row[j] for row in data]
        try:
            cols[name] = np.array([float(v) for v in vals])
        except ValueError:
            cols[name] = np.array(vals)
    return config, cols


class _Resolver:
    """Merge defaults, config file and CLI flags; track resolved values."""

    def __init__(self, args: argparse.Namespace):
        self.file_values = parse_config_file(args.config) if args.config else {}
        self.args = args
        self.resolved = {}

    def get(self, key: str, default, cast):
        value = getattr(self.args, key.replace("-", "_"), None)
        if value is None and key in self.file_values:
            value = self.file_values[key]
        if value is None:
            value = default
        if value is None:
            raise InvalidParameterError(f"missing required configuration key '{key}'")
        try:
            out = cast(value) if not isinstance(value, str) or cast is not str else value
            if isinstance(value, str) and cast is not str:
                out = cast(value)
        except (TypeError, ValueError) as exc:
            raise InvalidParameterError(f"invalid value for key '{key}': {value!r}") from exc
        self.resolved[key] = out
        return out

    def dist(self, key="dist"):
        raw = self.get(key, "two_speed", str).lower()
        if raw not in _DIST_ALIASES:
            raise InvalidParameterError(f"invalid value for key '{key}': {raw!r}")
        self.resolved[key] = _DIST_ALIASES[raw].value
        return _DIST_ALIASES[raw]

    def strategy(self, key="strategy"):
        raw = self.get(key, "geometric_from_eps2", str).lower()
        if raw not in _STRATEGY_ALIASES:
            raise InvalidParameterError(f"invalid value for key '{key}': {raw!r}")
        self.resolved[key] = _STRATEGY_ALIASES[raw].value
        return _STRATEGY_ALIASES[raw]

    def qoi(self, key="qoi"):
        raw = self.get(key, "x_squared", str).lower()
        if raw not in _QOI_ALIASES:
            raise InvalidParameterError(f"invalid value for key '{key}': {raw!r}")
        self.resolved[key] = raw
        return _QOI_ALIASES[raw]

    def header(self, command: str) -> dict:
        # threads is an execution detail, not configuration: leaving it out
        # keeps output files bit-identical across worker counts
        out = {"command": command}
        for key, val in self.resolved.items():
            if key == "threads":
                continue
            out[key] = fmt(val) if isinstance(val, float) else str(val)
        return out


def _model(res: _Resolver) -> ModelParams:
    return ModelParams(
        epsilon=res.get("epsilon", None, float),
        v_char=res.get("v_char", 1.0, float),
        dist=res.dist(),
    )


def cmd_demo_paths(res: _Resolver) -> int:
    """One coupled pair trace; with samples > 1 adds variance-vs-time columns.

    ``trace = 0`` drops the per-pair path columns, leaving only the variance
    curves (needs samples > 1 to have anything to emit).
    """
    model = _model(res)
    dt_fine = res.get("dt_fine", None, float)
    m_factor = res.get("m_factor", None, int)
    t_end = res.get("t_end", None, float)
    samples = res.get("samples", 1, int)
    trace = res.get("trace", 1, int)
    seed = res.get("seed", 0, int)
    out = res.get("out_path", None, str)
    if samples < 1:
        raise InvalidParameterError(f"invalid value for key 'samples': {samples}")
    if not trace and samples < 2:
        raise InvalidParameterError("key 'trace': trace = 0 needs samples > 1")

    columns = ["step_index", "time"]
    if trace:
        columns += [
            "x_fine",
            "v_fine",
            "x_coarse",
            "v_coarse",
            "fine_collided",
            "coarse_collided",
        ]
    if samples > 1:
        columns += ["var_fine", "var_coarse", "var_diff"]
    n_blocks = steps_for_horizon(t_end, m_factor * dt_fine)
    if n_blocks == 0:
        write_csv(out, res.header("demo-paths"), columns, [])
        return EXIT_OK

    rng = substream(seed, (DOMAIN_DEMO, 0, 0))
    result = simulate_coupled_ensemble(
        model, dt_fine, m_factor, n_blocks, rng, samples, record_history=True
    )
    m = int(m_factor)
    n_fine = n_blocks * m
    rows = []
    for i in range(n_fine + 1):
        block, frac = divmod(i, m)
        frac /= m
        # coarse path linearly interpolated onto the fine grid
        if i == n_fine:
            xc_i = result.xc_hist[n_blocks]
            vc_i = result.vc_hist[n_blocks]
        else:
            xc_i = (1 - frac) * result.xc_hist[block] + frac * result.xc_hist[block + 1]
            vc_i = result.vc_hist[block]
        coarse_flag = int(result.coarse_collide_hist[i // m][0]) if (i > 0 and i % m == 0) else 0
        row = [i, i * dt_fine]
        if trace:
            row += [
                result.xf_hist[i][0],
                result.vf_hist[i][0],
                xc_i[0],
                vc_i[0],
                int(result.fine_collide_hist[i][0]),
                coarse_flag,
            ]
        if samples > 1:
            xf = result.xf_hist[i]
            row += [
                xf.var(ddof=1),
                xc_i.var(ddof=1),
                (xf - xc_i).var(ddof=1),
            ]
        rows.append(row)
    write_csv(out, res.header("demo-paths"), columns, rows)
    return EXIT_OK


def cmd_variance_scan(res: _Resolver) -> int:
    """Mean/variance of fine samples and coupled differences per dt level."""
    model = _model(res)
    t_end = res.get("t_end", 5.0, float)
    m_factor = res.get("m_factor", 2, int)
    dt_max = res.get("dt_max", t_end / 2.0, float)
    level_count = res.get("levels", 10, int)
    samples = res.get("samples", 100000, int)
    qoi = res.qoi()
    k_x = res.get("kx", 0.0, float)
    k_v = res.get("kv", 0.0, float)
    seed = res.get("seed", 0, int)
    threads = res.get("threads", os.cpu_count() or 1, int)
    out = res.get("out_path", None, str)
    if level_count < 1:
        raise InvalidParameterError(f"invalid value for key 'levels': empty scan ({level_count})")

    columns = [
        "level",
        "dt",
        "mean_fine",
        "var_fine",
        "mean_diff",
        "var_diff",
        "se_mean_diff",
        "var_diff_analytic",
        "var_bound",
    ]
    rows = []
    for level in range(1, level_count + 1):
        dt = dt_max * float(m_factor) ** -level
        stats = coupled_qoi_stats(
            model,
            dt,
            m_factor,
            t_end,
            qoi,
            samples,
            seed,
            level=level,
            threads=threads,
            domain=DOMAIN_SCAN,
        )
        point = analysis.AnalysisPoint(
            epsilon=model.epsilon,
            v_char=model.v_char,
            dt_fine=dt,
            m_factor=m_factor,
            t_end=t_end,
        )
        # for the position QoI the difference variance has a closed form
        analytic = analysis.position_diff_variance(point) if qoi is QoiKind.X else math.nan
        bound = analysis.variance_bound(point, k_x, k_v) if (k_x > 0 or k_v > 0) else math.nan
        rows.append(
            [
                level,
                dt,
                stats.fine.mean,
                stats.fine.variance,
                stats.diff.mean,
                stats.diff.variance,
                stats.diff.std_error,
                analytic,
                bound,
            ]
        )
    write_csv(out, res.header("variance-scan"), columns, rows)
    return EXIT_OK


def cmd_mlmc(res: _Resolver) -> int:
    """Adaptive multilevel run; table report to stdout, CSV to out_path."""
    model = _model(res)
    config = MlmcConfig(
        model=model,
        t_end=res.get("t_end", None, float),
        m_factor=res.get("m_factor", 2, int),
        strategy=res.strategy(),
        rmse_target=res.get("rmse", None, float),
        qoi=res.qoi(),
        max_levels=res.get("max_levels", 20, int),
        threads=res.get("threads", os.cpu_count() or 1, int),
    )
    seed = res.get("seed", 0, int)
    out = res.get("out_path", None, str)
    report = run_mlmc(config, seed)

    columns = [
        "level",
        "dt",
        "samples",
        "var_fine",
        "mean_diff",
        "var_diff",
        "var_estimator",
        "cost",
        "level_cost",
    ]
    rows = [list(t) for t in report.row_tuples()]
    # totals row mirroring the experiment tables: telescoped estimate,
    # summed estimator variance and summed cost
    rows.append(
        ["total", math.nan, sum(r.samples for r in report.rows), math.nan,
         report.estimate, math.nan, report.estimator_variance_sum, math.nan,
         report.total_cost]
    )
    header = res.header("mlmc")
    header["estimate"] = fmt(report.estimate)
    header["estimator_variance_sum"] = fmt(report.estimator_variance_sum)
    header["total_cost"] = fmt(report.total_cost)
    header["bias_proxy"] = fmt(report.bias_proxy)
    header["converged"] = str(int(report.converged))
    if report.classical_cost is not None:
        header["classical_cost"] = fmt(report.classical_cost)
        header["speedup"] = fmt(report.speedup)
    write_csv(out, header, columns, rows)
    sys.stdout.write(render_report_table(report) + "\n")
    return EXIT_OK if report.converged else EXIT_NO_CONVERGENCE


def render_report_table(report) -> str:
    """Plain-text aligned per-level table plus the cost-comparison block."""
    headers = ["level", "dt", "P", "V[F]", "E[dF]", "V[dF]", "V[Y]", "C", "P*C"]
    body = []
    for r in report.rows:
        body.append(
            [
                str(r.index),
                f"{r.dt:.3e}",
                str(r.samples),
                f"{r.var_fine:.3g}",
                f"{r.mean_diff:+.3e}",
                f"{r.var_diff:.3e}",
                f"{r.var_estimator:.3e}",
                f"{r.cost:g}",
                f"{r.level_cost:.6g}",
            ]
        )
    body.append(
        [
            "total",
            "",
            "",
            "",
            f"{report.estimate:+.3e}",
            "",
            f"{report.estimator_variance_sum:.3e}",
            "",
            f"{report.total_cost:.6g}",
        ]
    )
    widths = [max(len(headers[j]), *(len(row[j]) for row in body)) for j in range(len(headers))]
    lines = ["  ".join(h.rjust(w) for h, w in zip(headers, widths))]
    for row in body:
        lines.append("  ".join(cell.rjust(w) for cell, w in zip(row, widths)))
    lines.append("")
    lines.append(f"estimate      = {report.estimate:.6g}")
    lines.append(f"bias proxy    = {report.bias_proxy:.6g}")
    lines.append(f"converged     = {report.converged}")
    if report.classical_cost is not None:
        lines.append(f"classical cost = {report.classical_cost:.6g}")
        lines.append(f"multilevel cost = {report.total_cost:.6g}")
        lines.append(f"speedup        = {report.speedup:.3g}")
    return "\n".join(lines)


def cmd_threshold_map(res: _Resolver) -> int:
    """Coarse-level break-even M over an (epsilon, t*) grid, with signs at 6/13."""
    v_char = res.get("v_char", 1.0, float)
    eps_min = res.get("eps_min", 0.01, float)
    eps_max = res.get("eps_max", 1.0, float)
    t_min = res.get("t_min", 1.0, float)
    t_max = res.get("t_max", 100.0, float)
    grid_n = res.get("grid_n", 10, int)
    out = res.get("out_path", None, str)
    if grid_n < 1 or eps_min <= 0 or t_min <= 0 or eps_max < eps_min or t_max < t_min:
        raise InvalidParameterError("invalid threshold-map grid bounds (eps_min/eps_max/t_min/t_max/grid_n)")

    eps_grid = np.geomspace(eps_min, eps_max, grid_n)
    t_grid = np.geomspace(t_min, t_max, grid_n)
    columns = ["epsilon", "t_end", "m_root", "lhs_at_m6", "lhs_at_m13"]
    rows = []
    for eps in eps_grid:
        for t_end in t_grid:
            dt1 = eps * eps
            result = analysis.coarse_level_threshold(eps, v_char, t_end, dt1)
            if t_end <= dt1:
                lhs6 = lhs13 = math.nan
            else:
                lhs6 = analysis.threshold_lhs(eps, v_char, t_end, dt1, 6.0)
                lhs13 = analysis.threshold_lhs(eps, v_char, t_end, dt1, 13.0)
            rows.append(
                [eps, t_end, result.m_root if result.has_root else math.nan, lhs6, lhs13]
            )
    write_csv(out, res.header("threshold-map"), columns, rows)
    return EXIT_OK


def cmd_rates(res: _Resolver) -> int:
    """Fit bias/variance decay slopes from a variance-scan CSV tail."""
    in_path = res.get("in_path", None, str)
    out = res.get("out_path", None, str)
    max_dt = res.get("max_dt", math.inf, float)
    config, cols = read_csv(in_path)
    for needed in ("dt", "mean_diff", "var_diff"):
        if needed not in cols:
            raise InvalidParameterError(f"input CSV {in_path} is missing column '{needed}'")
    m_factor = int(config.get("m_factor", "2"))
    keep = cols["dt"] <= max_dt
    series = list(zip(cols["dt"][keep], cols["mean_diff"][keep], cols["var_diff"][keep]))
    fit = analysis.fit_convergence_rates(series, m_factor)
    header = res.header("rates")
    header["points_used"] = str(int(np.count_nonzero(keep)))
    write_csv(
        out,
        header,
        ["alpha", "beta", "gamma", "alpha_resid", "beta_resid"],
        [[fit.alpha, fit.beta, fit.gamma, fit.alpha_resid, fit.beta_resid]],
    )
    sys.stdout.write(
        f"alpha = {fit.alpha:.4f} (resid {fit.alpha_resid:.3f}), "
        f"beta = {fit.beta:.4f} (resid {fit.beta_resid:.3f}), gamma = {fit.gamma:.4f}\n"
    )
    return EXIT_OK


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key = value configuration file")
    parser.add_argument("--seed", type=int, help="master seed (substreams derive from it)")
    parser.add_argument("--out", dest="out_path", help="output CSV path ('-' for stdout)")
    parser.add_argument("--threads", type=int, help="worker threads (results identical for any value)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kinetic-mlmc",
        description="Asymptotic-preserving particle MLMC experiments",
    )
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("demo-paths", help="coupled pair trace and variance-vs-time curves")
    _add_common(p)
    for flag, typ in [
        ("--epsilon", float),
        ("--v-char", float),
        ("--dist", str),
        ("--dt-fine", float),
        ("--m-factor", int),
        ("--t-end", float),
        ("--samples", int),
        ("--trace", int),
    ]:
        p.add_argument(flag, type=typ, dest=flag[2:].replace("-", "_"))
    p.set_defaults(func=cmd_demo_paths)

    p = sub.add_parser("variance-scan", help="per-dt means/variances of fine and difference samples")
    _add_common(p)
    for flag, typ in [
        ("--epsilon", float),
        ("--v-char", float),
        ("--dist", str),
        ("--t-end", float),
        ("--m-factor", int),
        ("--dt-max", float),
        ("--levels", int),
        ("--samples", int),
        ("--qoi", str),
        ("--kx", float),
        ("--kv", float),
    ]:
        p.add_argument(flag, type=typ, dest=flag[2:].replace("-", "_"))
    p.set_defaults(func=cmd_variance_scan)

    p = sub.add_parser("mlmc", help="adaptive multilevel estimate with table report")
    _add_common(p)
    for flag, typ in [
        ("--epsilon", float),
        ("--v-char", float),
        ("--dist", str),
        ("--t-end", float),
        ("--m-factor", int),
        ("--strategy", str),
        ("--rmse", float),
        ("--qoi", str),
        ("--max-levels", int),
    ]:
        p.add_argument(flag, type=typ, dest=flag[2:].replace("-", "_"))
    p.set_defaults(func=cmd_mlmc)

    p = sub.add_parser("threshold-map", help="coarse-level break-even M over an (epsilon, t*) grid")
    _add_common(p)
    for flag, typ in [
        ("--v-char", float),
        ("--eps-min", float),
        ("--eps-max", float),
        ("--t-min", float),
        ("--t-max", float),
        ("--grid-n", int),
    ]:
        p.add_argument(flag, type=typ, dest=flag[2:].replace("-", "_"))
    p.set_defaults(func=cmd_threshold_map)

    p = sub.add_parser("rates", help="fit convergence slopes from a variance-scan CSV")
    _add_common(p)
    p.add_argument("--in", dest="in_path", help="variance-scan CSV to fit")
    p.add_argument("--max-dt", type=float, dest="max_dt", help="use only rows with dt <= max-dt")
    p.set_defaults(func=cmd_rates)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        res = _Resolver(args)
        return args.func(res)
    except (InvalidParameterError, ContractViolationError, FileNotFoundError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
