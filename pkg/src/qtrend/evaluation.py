"""Simulation scenarios, true quantiles, metrics, MCMC diagnostics and the benchmark driver."""
from __future__ import annotations

import csv
import enum
import io
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

from .calibrate import CalibrationConfig, calibrate
from .errors import CalibrationError, NumericalBreakdown, ValidationError
from .gibbs import DEFAULT_BURNIN, DEFAULT_ITERS, DEFAULT_THIN, run_gibbs
from .model import GridDataset, Prior, QuantileModelSpec
from .vb import vb_interval

__all__ = [
    "TrendKind",
    "NoiseKind",
    "Scenario",
    "MetricsRecord",
    "gen_truth",
    "gen_noise",
    "noise_quantile",
    "true_quantiles",
    "simulate",
    "compute_metrics",
    "autocorrelation",
    "effective_sample_size",
    "chain_ess",
    "sampler_ess",
    "METHODS",
    "BenchmarkSettings",
    "run_benchmark",
    "BENCHMARK_COLUMNS",
    "benchmark_csv",
]


class TrendKind(str, enum.Enum):
    PC = "pc"
    VS = "vs"
    GP = "gp"


class NoiseKind(str, enum.Enum):
    GAUSS = "gauss"
    BETA = "beta"
    MIXED = "mixed"


MIXED_MEANS = (-0.2, 0.2)
MIXED_SPREAD = 0.5


def _mixed_sd(spread_is_sd: bool) -> float:
    return MIXED_SPREAD if spread_is_sd else math.sqrt(MIXED_SPREAD)


@dataclass(frozen=True)
class Scenario:
    """A trend/noise pair on ``n`` equispaced points.

    ``mixed_sd=True`` reads the mixed-normal spread 0.5 as a standard
    deviation instead of a variance.
    """

    kind: TrendKind
    noise: NoiseKind
    n: int = 100
    seed: int = 0
    gp_params: tuple = (2.0, 1.0, 10.0)
    mixed_sd: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", TrendKind(self.kind))
        object.__setattr__(self, "noise", NoiseKind(self.noise))
        if self.n < 4:
            raise ValidationError(f"scenario needs n >= 4, got {self.n}")

    @property
    def label(self) -> str:
        return f"{self.kind.value}/{self.noise.value}"


def _pc_trend(t):
    return np.select([t <= 20, t <= 40, t <= 60], [2.5, 1.0, 3.5], default=1.5)


def _vs_trend(x):
    u = 4.0 * x - 2.0
    return 2.0 + np.sin(u) + 2.0 * np.exp(-30.0 * u * u)


def gen_truth(kind, n: int, seed: int | None = 0, gp_params=(2.0, 1.0, 10.0)):
    """Return ``(locations, f)``.

    PC is defined on the integer locations ``1..n``; VS and GP on
    ``i / n``. The GP trend is one draw per seed with squared exponential
    covariance evaluated on ``t = 1..n``.
    """
    kind = TrendKind(kind)
    if n < 4:
        raise ValidationError(f"n must be at least 4, got {n}")
    t = np.arange(1.0, n + 1.0)
    x = t / n
    if kind is TrendKind.PC:
        return t, _pc_trend(t)
    if kind is TrendKind.VS:
        return x, _vs_trend(x)
    mu, var_f, rho = gp_params
    if var_f == 0:
        return x, np.full(n, float(mu))
    cov = var_f * np.exp(-((t[:, None] - t[None, :]) ** 2) / (2.0 * rho * rho))
    # eigen-factor: the SE kernel is numerically rank deficient
    vals, vecs = np.linalg.eigh(cov)
    root = vecs * np.sqrt(np.clip(vals, 0.0, None))
    rng = np.random.default_rng(seed)
    return x, mu + root @ rng.standard_normal(n)


def gen_noise(noise, x, rng: np.random.Generator, mixed_sd: bool = False):
    """Draw one noise value per normalized location ``x`` in (0, 1]."""
    noise = NoiseKind(noise)
    x = np.asarray(x, dtype=float)
    if noise is NoiseKind.GAUSS:
        return rng.normal(0.0, (1.0 + x * x) / 4.0)
    if noise is NoiseKind.BETA:
        return rng.beta(1.0, 11.0 - 10.0 * x)
    first = rng.random(x.shape) < x
    centre = np.where(first, MIXED_MEANS[0], MIXED_MEANS[1])
    return centre + _mixed_sd(mixed_sd) * rng.standard_normal(x.shape)


def _mixture_quantile(w, p, sd):
    def cdf_gap(q):
        return w * stats.norm.cdf(q, MIXED_MEANS[0], sd) + (1.0 - w) * stats.norm.cdf(q, MIXED_MEANS[1], sd) - p

    lo = min(MIXED_MEANS) + sd * stats.norm.ppf(p) - 1.0
    hi = max(MIXED_MEANS) + sd * stats.norm.ppf(p) + 1.0
    return optimize.bisect(cdf_gap, lo, hi, xtol=1e-10, rtol=4 * np.finfo(float).eps, maxiter=200)


def noise_quantile(noise, x, p: float, mixed_sd: bool = False):
    """p-quantile of the noise law at each normalized location."""
    noise = NoiseKind(noise)
    x = np.asarray(x, dtype=float)
    if not (0.0 < p < 1.0):
        raise ValidationError(f"quantile level must lie in (0, 1), got {p}")
    if noise is NoiseKind.GAUSS:
        return (1.0 + x * x) / 4.0 * stats.norm.ppf(p)
    if noise is NoiseKind.BETA:
        return 1.0 - (1.0 - p) ** (1.0 / (11.0 - 10.0 * x))
    sd = _mixed_sd(mixed_sd)
    return np.array([_mixture_quantile(w, p, sd) for w in np.atleast_1d(x)]).reshape(x.shape)


def true_quantiles(noise, x, p: float, f, mixed_sd: bool = False):
    return np.asarray(f, dtype=float) + noise_quantile(noise, x, p, mixed_sd)


def simulate(scenario: Scenario, rng: np.random.Generator | None = None):
    """Return ``(locations, f, y)`` for one replication of ``scenario``."""
    loc, f = gen_truth(scenario.kind, scenario.n, scenario.seed, scenario.gp_params)
    if rng is None:
        rng = np.random.default_rng(scenario.seed)
    x = np.arange(1.0, scenario.n + 1.0) / scenario.n
    return loc, f, f + gen_noise(scenario.noise, x, rng, scenario.mixed_sd)


@dataclass
class MetricsRecord:
    mse: float
    mad: float
    mciw: float
    cp: float
    ess_per_second: float = float("nan")
    wall_seconds: float = 0.0


def compute_metrics(point_est, lo, hi, truth) -> MetricsRecord:
    est, lo, hi, truth = (np.asarray(v, dtype=float) for v in (point_est, lo, hi, truth))
    if not (est.shape == lo.shape == hi.shape == truth.shape):
        raise ValidationError("metric inputs must have equal length")
    err = est - truth
    return MetricsRecord(
        mse=float(np.mean(err * err)),
        mad=float(np.mean(np.abs(err))),
        mciw=float(np.mean(hi - lo)),
        cp=float(np.mean((lo <= truth) & (truth <= hi))),
    )


def autocorrelation(chain, max_lag: int | None = None) -> np.ndarray:
    """Sample autocorrelations ``rho_0..rho_max_lag`` (FFT, biased normalization)."""
    x = np.asarray(chain, dtype=float).ravel()
    m = x.size
    max_lag = m - 1 if max_lag is None else min(max_lag, m - 1)
    x = x - x.mean()
    var = float(np.dot(x, x))
    if var == 0.0:
        out = np.zeros(max_lag + 1)
        out[0] = 1.0
        return out
    size = 1 << (2 * m - 1).bit_length()
    spec = np.fft.rfft(x, size)
    acov = np.fft.irfft(spec * np.conj(spec), size)[: max_lag + 1]
    return acov / var


def effective_sample_size(chain) -> float:
    """Geyer initial positive sequence estimate, clipped to ``(0, M]``."""
    x = np.asarray(chain, dtype=float).ravel()
    m = x.size
    if m < 10:
        raise ValidationError(f"need at least 10 draws, got {m}")
    if np.ptp(x) == 0.0:
        return float(m)
    rho = autocorrelation(x)
    pairs = rho[: 2 * (m // 2)].reshape(-1, 2).sum(axis=1)
    neg = np.flatnonzero(pairs <= 0.0)
    stop = neg[0] if neg.size else pairs.size
    tau = -1.0 + 2.0 * float(np.sum(pairs[:stop]))
    if tau <= 0.0:
        return float(m)
    return float(min(m, m / tau))


def chain_ess(theta_draws) -> np.ndarray:
    """Per-coordinate ESS of a draws matrix (draws x coordinates)."""
    return np.array([effective_sample_size(col) for col in np.asarray(theta_draws).T])


def sampler_ess(theta_draws) -> float:
    """ESS of a vector-valued chain: the worst-mixing coordinate's ESS."""
    return float(np.min(chain_ess(theta_draws)))


METHODS = ("MCMC-HS", "MCMC-Lap", "VB-HS", "VB-Lap", "CVB-HS", "CVB-Lap")


@dataclass(frozen=True)
class BenchmarkSettings:
    """Sampler and calibration controls shared by every benchmark cell."""

    iters: int = DEFAULT_ITERS
    burnin: int = DEFAULT_BURNIN
    thin: int = DEFAULT_THIN
    bootstrap: int = 200
    alpha: float = 0.05
    lambda_max: float = 400.0
    lambda_points: int = 60
    workers: int = 1
    reproducible: bool = False
    spec_overrides: dict = field(default_factory=dict)


def _method_parts(method: str):
    family, prior = method.split("-")
    return family, Prior.HORSESHOE if prior == "HS" else Prior.LAPLACE


def _default_order(kind: TrendKind) -> int:
    return {TrendKind.PC: 0, TrendKind.VS: 1, TrendKind.GP: 2}[kind]


def _replication(args):
    """All methods and levels on one simulated dataset; returns per-cell records."""
    scenario, methods, levels, settings, rep, entropy = args
    seq = np.random.SeedSequence(entropy)
    data_seed, *cell_seeds = seq.generate_state(1 + len(methods) * len(levels))
    rng = np.random.default_rng(data_seed)
    _, f, y = simulate(scenario, rng)
    data = GridDataset.from_sequence(y, np.arange(1.0, scenario.n + 1.0))
    xn = np.arange(1.0, scenario.n + 1.0) / scenario.n
    k = _default_order(scenario.kind)
    out = {}
    cache = {}
    for li, p in enumerate(levels):
        truth = true_quantiles(scenario.noise, xn, p, f, scenario.mixed_sd)
        for mi, method in enumerate(methods):
            family, prior = _method_parts(method)
            spec = QuantileModelSpec(p=p, k=k, prior=prior, **settings.spec_overrides)
            cell_seed = int(cell_seeds[li * len(methods) + mi])
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    rec = _run_cell(family, spec, data, truth, settings, cell_seed, cache)
            except (NumericalBreakdown, CalibrationError, FloatingPointError, ValueError):
                rec = None
            out[(method, p)] = rec
    return out


def _run_cell(family, spec, data, truth, settings, seed, cache):
    if family == "MCMC":
        draws = run_gibbs(spec, data, settings.iters, settings.burnin, settings.thin, seed=seed)
        lo, hi = draws.interval(settings.alpha)
        rec = compute_metrics(draws.mean(), lo, hi, truth)
        wall = draws.meta["wall_seconds"]
        rec.ess_per_second = sampler_ess(draws.theta) / wall
        rec.wall_seconds = wall
        return rec
    key = (spec.prior, spec.p)
    if key not in cache:
        config = CalibrationConfig.geometric(
            B=settings.bootstrap, alpha=settings.alpha, lambda_max=settings.lambda_max,
            points=settings.lambda_points, seed=seed,
        )
        cache[key] = calibrate(spec, data, config)
    cal = cache[key]
    if family == "VB":
        lo, hi = vb_interval(cal.vb_state, settings.alpha)
        rec = compute_metrics(cal.mu_star, lo, hi, truth)
        rec.wall_seconds = cal.meta["vb_seconds"]
        return rec
    lo, hi = cal.intervals
    rec = compute_metrics(cal.mu_star, lo, hi, truth)
    rec.wall_seconds = cal.meta["wall_seconds"]
    rec.ess_per_second = cal.meta["ess_per_second"]
    return rec


BENCHMARK_COLUMNS = ("scenario", "noise", "method", "p", "mse", "mad", "mciw", "cp",
                     "ess_per_sec", "wall_seconds", "n_fail")


def _mean(values):
    return math.fsum(values) / len(values) if values else float("nan")


def run_benchmark(scenarios, methods, quantile_levels, replications: int, seed: int = 0,
                  settings: BenchmarkSettings | None = None) -> list[dict]:
    """Metrics averaged over ``replications`` per (scenario, method, level).

    Each replication draws one dataset that every method and level share;
    seeds derive from ``(seed, scenario index, replication)``. Failed cells
    are counted in ``n_fail`` and excluded from the averages.
    """
    settings = settings or BenchmarkSettings()
    methods = list(methods)
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ValidationError(f"unknown methods {unknown}; choose from {list(METHODS)}")
    levels = [float(p) for p in quantile_levels]
    rows = []
    if replications <= 0 or not methods or not levels:
        return rows
    for si, scenario in enumerate(scenarios):
        jobs = [(scenario, methods, levels, settings, r, [seed, si, r]) for r in range(replications)]
        if settings.workers > 1:
            with ProcessPoolExecutor(settings.workers) as pool:
                results = list(pool.map(_replication, jobs))
        else:
            results = [_replication(j) for j in jobs]
        for method in methods:
            for p in levels:
                recs = [res[(method, p)] for res in results]
                ok = [r for r in recs if r is not None]
                row = {
                    "scenario": scenario.kind.value,
                    "noise": scenario.noise.value,
                    "method": method,
                    "p": p,
                    "mse": _mean([r.mse for r in ok]),
                    "mad": _mean([r.mad for r in ok]),
                    "mciw": _mean([r.mciw for r in ok]),
                    "cp": _mean([r.cp for r in ok]),
                    "ess_per_sec": _mean([r.ess_per_second for r in ok]) if method.startswith(("MCMC", "CVB")) else float("nan"),
                    "wall_seconds": _mean([r.wall_seconds for r in ok]),
                    "n_fail": len(recs) - len(ok),
                }
                if settings.reproducible:
                    row["ess_per_sec"] = float("nan") if not method.startswith(("MCMC", "CVB")) else 0.0
                    row["wall_seconds"] = 0.0
                rows.append(row)
    return rows


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def benchmark_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(BENCHMARK_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in BENCHMARK_COLUMNS])
    return buf.getvalue()
