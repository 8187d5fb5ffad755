"""``qtrend`` command-line interface.

Exit codes: 0 success (possibly with warnings recorded in the sidecar),
2 input or configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .calibrate import CalibrationConfig, calibrate
from .errors import CalibrationError, NumericalBreakdown, ValidationError
from .evaluation import (
    METHODS,
    BenchmarkSettings,
    Scenario,
    autocorrelation,
    benchmark_csv,
    chain_ess,
    effective_sample_size,
    run_benchmark,
    simulate,
    true_quantiles,
)
from .gibbs import DEFAULT_BURNIN, DEFAULT_ITERS, DEFAULT_THIN, run_gibbs
from .model import GridDataset, Prior, QuantileModelSpec, validate
from .vb import vb_fit, vb_interval

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3

FIT_COLUMNS = ("x", "n_obs", "p", "estimate", "lower", "upper", "lambda_hat")


class InputError(Exception):
    """Bad input file, arguments or configuration (exit code 2)."""


def _num(v) -> str:
    v = float(v)
    return "" if math.isnan(v) else repr(v)


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _parse_levels(text: str) -> list[float]:
    try:
        levels = [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise InputError(f"cannot parse quantile list {text!r}") from exc
    if not levels or any(not (0.0 < p < 1.0) for p in levels):
        raise InputError(f"quantile levels must be a nonempty list in (0, 1), got {text!r}")
    return levels


def _resolve_threads(threads: int | None) -> int:
    return max(1, threads if threads else (os.cpu_count() or 1))


# ---------------------------------------------------------------------------
# fit


@dataclass
class FitRequest:
    input: Path
    x_col: str
    y_col: str
    spec: QuantileModelSpec
    method: str
    quantiles: list
    iters: int = DEFAULT_ITERS
    burnin: int = DEFAULT_BURNIN
    thin: int = DEFAULT_THIN
    bootstrap: int = 200
    alpha: float = 0.05
    lambda_max: float = 400.0
    lambda_points: int = 60
    seed: int = 0
    out: Path = Path(".")
    fmt: str = "csv"
    save_draws: bool = False
    force_regular: bool = False
    threads: int = 1
    reproducible: bool = False
    notes: list = field(default_factory=list)


def read_xy_csv(path: Path, x_col: str, y_col: str):
    """Parse the two named columns; every bad row is reported."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    rows = list(csv.reader(text.splitlines()))
    if not rows:
        raise InputError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    missing = [c for c in (x_col, y_col) if c not in header]
    if missing:
        raise InputError(f"{path}: missing column(s) {missing}; header is {header}")
    ix, iy = header.index(x_col), header.index(y_col)
    xs, ys, problems = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        try:
            xv, yv = float(row[ix]), float(row[iy])
        except (IndexError, ValueError):
            problems.append(f"line {lineno}: {row!r}")
            continue
        if not (math.isfinite(xv) and math.isfinite(yv)):
            problems.append(f"line {lineno}: non-finite value {row!r}")
            continue
        xs.append(xv)
        ys.append(yv)
    if problems:
        shown = "; ".join(problems[:20])
        more = f" (+{len(problems) - 20} more)" if len(problems) > 20 else ""
        raise InputError(f"{path}: {len(problems)} malformed row(s): {shown}{more}")
    if not xs:
        raise InputError(f"{path} has no data rows")
    return np.array(xs), np.array(ys)


def _fit_level(req: FitRequest, data: GridDataset, p: float, seed: int):
    spec = req.spec.with_level(p)
    info = {"p": p, "seed": seed}
    lam = np.full(data.n, np.nan)
    draws = None
    if req.method == "gibbs":
        draws = run_gibbs(spec, data, req.iters, req.burnin, req.thin, seed=seed, force_regular=req.force_regular)
        est = draws.mean()
        lo, hi = draws.interval(req.alpha)
        ess = chain_ess(draws.theta)
        wall = draws.meta["wall_seconds"]
        info.update(
            draws=draws.n_draws,
            ess_min=float(ess.min()),
            ess_mean=float(ess.mean()),
            ess_sigma2=effective_sample_size(draws.sigma2),
            wall_seconds=wall,
            ess_min_per_second=float(ess.min()) / wall,
            converged=True,
        )
    elif req.method == "vb":
        state = vb_fit(spec, data, force_regular=req.force_regular)
        est = state.mu
        lo, hi = vb_interval(state, req.alpha)
        info.update(converged=bool(state.converged), iterations=state.iterations)
    else:
        config = CalibrationConfig.geometric(
            B=req.bootstrap, alpha=req.alpha, lambda_max=req.lambda_max, points=req.lambda_points,
            seed=seed, workers=req.threads,
        )
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            cal = calibrate(spec, data, config, force_regular=req.force_regular)
        est = cal.mu_star
        lo, hi = cal.intervals
        lam = cal.lambda_hat
        meta = dict(cal.meta)
        info.update(
            converged=bool(meta["converged"] and meta["median_converged"]),
            iterations=meta["vb_iterations"],
            bootstrap_used=meta["B_used"],
            bootstrap_dropped=meta["n_dropped"],
            wall_seconds=meta["wall_seconds"],
            ess_per_second=meta["ess_per_second"],
            ess_convention=meta["ess_convention"],
            warnings=[str(w.message) for w in caught],
        )
    if req.reproducible:
        for key in ("wall_seconds", "ess_per_second", "ess_min_per_second"):
            if key in info:
                info[key] = 0.0
    return est, lo, hi, lam, info, draws


def _level_tag(p: float) -> str:
    return f"p{p:g}"


def cmd_fit(req: FitRequest) -> int:
    x, y = read_xy_csv(req.input, req.x_col, req.y_col)
    data = validate(req.spec, GridDataset.from_pairs(x, y))
    req.out.mkdir(parents=True, exist_ok=True)
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(req.seed).spawn(len(req.quantiles))]
    sidecar = {
        "command": "fit",
        "version": __version__,
        "input": str(req.input),
        "method": req.method,
        "seed": req.seed,
        "spec": req.spec.to_dict(),
        "alpha": req.alpha,
        "grid_regular": data.is_regular(),
        "force_regular": req.force_regular,
        "levels": [],
    }
    if req.method == "gibbs":
        sidecar["mcmc"] = {"iters": req.iters, "burnin": req.burnin, "thin": req.thin}
    if req.method == "cvb":
        sidecar["calibration"] = {"B": req.bootstrap, "lambda_max": req.lambda_max, "lambda_points": req.lambda_points}
    warn = False
    for p, seed in zip(req.quantiles, seeds):
        est, lo, hi, lam, info, draws = _fit_level(req, data, p, seed)
        tag = _level_tag(p)
        info["table"] = f"fit_{tag}.{req.fmt}"
        warn |= not info.get("converged", True)
        records = [
            (data.x[i], int(data.counts[i]), p, est[i], lo[i], hi[i], lam[i]) for i in range(data.n)
        ]
        if req.fmt == "csv":
            lines = [",".join(FIT_COLUMNS)]
            lines += [",".join([_num(r[0]), str(r[1]), _num(r[2]), _num(r[3]), _num(r[4]), _num(r[5]), _num(r[6])]) for r in records]
            (req.out / info["table"]).write_text("\n".join(lines) + "\n")
        else:
            table = [
                {c: (None if isinstance(v, float) and math.isnan(v) else v) for c, v in zip(FIT_COLUMNS, map(_jsonable, r))}
                for r in records
            ]
            _write_json(req.out / info["table"], {"columns": list(FIT_COLUMNS), "rows": table})
        if draws is not None and req.save_draws:
            info["draws_file"] = f"draws_{tag}.csv"
            _write_draws(req.out / info["draws_file"], draws, info, req, p, seed)
        sidecar["levels"].append(info)
    sidecar["warning"] = warn
    _write_json(req.out / "fit.json", sidecar)
    if warn:
        print("warning: at least one fit did not converge; see fit.json", file=sys.stderr)
    return EXIT_OK


def _jsonable(v):
    if isinstance(v, (np.floating, float)):
        return float(v)
    if isinstance(v, (np.integer, int)):
        return int(v)
    return v


def _write_draws(path: Path, draws, info, req, p, seed):
    n = draws.theta.shape[1]
    header = [f"theta_{i + 1}" for i in range(n)] + ["sigma2"]
    lines = [",".join(header)]
    for t in range(draws.n_draws):
        lines.append(",".join(_num(v) for v in draws.theta[t]) + "," + _num(draws.sigma2[t]))
    path.write_text("\n".join(lines) + "\n")
    meta = {
        "seed": seed,
        "p": p,
        "spec": req.spec.with_level(p).to_dict(),
        "iters": req.iters,
        "burnin": req.burnin,
        "thin": req.thin,
        "wall_seconds": info.get("wall_seconds", 0.0),
    }
    _write_json(path.with_suffix(".json"), meta)


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(kind: str, noise: str, n: int, seed: int, levels: list, out: Path, mixed_sd: bool = False) -> int:
    try:
        scenario = Scenario(kind, noise, n=n, seed=seed, mixed_sd=mixed_sd)
    except (ValueError, ValidationError) as exc:
        raise InputError(str(exc)) from exc
    loc, f, y = simulate(scenario, np.random.default_rng(seed))
    xn = np.arange(1.0, n + 1.0) / n
    out.mkdir(parents=True, exist_ok=True)
    lines = ["x,y"] + [f"{_num(a)},{_num(b)}" for a, b in zip(loc, y)]
    (out / "data.csv").write_text("\n".join(lines) + "\n")
    lines = ["x,p,theta_star"]
    for p in levels:
        theta = true_quantiles(scenario.noise, xn, p, f, mixed_sd)
        lines += [f"{_num(a)},{_num(p)},{_num(t)}" for a, t in zip(loc, theta)]
    (out / "truth.csv").write_text("\n".join(lines) + "\n")
    _write_json(out / "simulate.json", {
        "command": "simulate", "version": __version__, "scenario": scenario.kind.value,
        "noise": scenario.noise.value, "n": n, "seed": seed, "quantiles": levels, "mixed_sd": mixed_sd,
    })
    return EXIT_OK


# ---------------------------------------------------------------------------
# benchmark

BENCHMARK_KEYS = {
    "scenarios", "methods", "quantiles", "replications", "seed", "n", "iters", "burnin", "thin",
    "bootstrap", "alpha", "lambda_max", "lambda_points", "mixed_sd",
}


def parse_config(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    conf = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"config line {lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in BENCHMARK_KEYS:
            raise InputError(f"config line {lineno}: unknown key {key!r}")
        conf[key] = value.strip().strip('"').strip("'")
    return conf


def _list(value: str) -> list[str]:
    return [t.strip() for t in value.split(",") if t.strip()]


def benchmark_from_config(conf: dict, threads: int, reproducible: bool):
    try:
        methods = _list(conf.get("methods", ""))
        if not methods:
            raise InputError("config names no methods")
        bad = [m for m in methods if m not in METHODS]
        if bad:
            raise InputError(f"unknown methods {bad}; choose from {list(METHODS)}")
        n = int(conf.get("n", 100))
        mixed_sd = conf.get("mixed_sd", "false").lower() in ("1", "true", "yes")
        scenarios = []
        for item in _list(conf.get("scenarios", "")):
            kind, _, noise = item.partition("/")
            scenarios.append(Scenario(kind, noise or "gauss", n=n, mixed_sd=mixed_sd))
        if not scenarios:
            raise InputError("config names no scenarios")
        levels = _parse_levels(conf.get("quantiles", "0.05,0.25,0.5,0.75,0.95"))
        reps = int(conf.get("replications", 20))
        if reps < 0:
            raise InputError("replications must be nonnegative")
        settings = BenchmarkSettings(
            iters=int(conf.get("iters", DEFAULT_ITERS)),
            burnin=int(conf.get("burnin", DEFAULT_BURNIN)),
            thin=int(conf.get("thin", DEFAULT_THIN)),
            bootstrap=int(conf.get("bootstrap", 200)),
            alpha=float(conf.get("alpha", 0.05)),
            lambda_max=float(conf.get("lambda_max", 400.0)),
            lambda_points=int(conf.get("lambda_points", 60)),
            workers=threads,
            reproducible=reproducible,
        )
        seed = int(conf.get("seed", 0))
    except (ValueError, ValidationError) as exc:
        raise InputError(f"invalid benchmark config: {exc}") from exc
    return scenarios, methods, levels, reps, seed, settings


def summary_table(rows) -> str:
    cols = ("scenario", "noise", "method", "p", "mse", "mad", "mciw", "cp", "n_fail")
    lines = ["  ".join(f"{c:>9}" for c in cols)]
    for r in rows:
        cells = []
        for c in cols:
            v = r[c]
            cells.append(f"{v:>9.4f}" if isinstance(v, float) else f"{v!s:>9}")
        lines.append("  ".join(cells))
    return "\n".join(lines)


def cmd_benchmark(config_path: Path, out: Path, threads: int, reproducible: bool) -> int:
    try:
        text = Path(config_path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read config {config_path}: {exc}") from exc
    scenarios, methods, levels, reps, seed, settings = benchmark_from_config(parse_config(text), threads, reproducible)
    rows = run_benchmark(scenarios, methods, levels, reps, seed, settings)
    out = Path(out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(benchmark_csv(rows))
    _write_json(out.with_suffix(".json"), {
        "command": "benchmark", "version": __version__, "seed": seed, "replications": reps,
        "methods": methods, "quantiles": levels, "scenarios": [s.label for s in scenarios],
        "settings": {k: v for k, v in vars(settings).items() if k not in ("workers", "spec_overrides")},
        "spec_defaults": QuantileModelSpec().to_dict(),
        "ess_convention": {
            "MCMC": "minimum over coordinates of the Geyer initial-positive-sequence ESS, per sampler wall second",
            "CVB": "B bootstrap point estimates per total calibration wall second",
        },
    })
    print(summary_table(rows))
    return EXIT_OK


# ---------------------------------------------------------------------------
# diagnose


def read_draws(path: Path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read draws file {path}: {exc}") from exc
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) < 2:
        raise InputError(f"draws file {path} has no draws")
    header = lines[0].split(",")
    cols = [i for i, h in enumerate(header) if h.startswith("theta_")]
    if not cols:
        raise InputError(f"draws file {path} has no theta columns")
    try:
        arr = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    except ValueError as exc:
        raise InputError(f"draws file {path} is malformed: {exc}") from exc
    meta_path = Path(path).with_suffix(".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return arr[:, cols], meta


def default_points(n: int, count: int = 3) -> list[int]:
    """Evenly spaced 0-based coordinates including the first and last."""
    if count <= 1:
        return [0]
    return sorted({int(round(i * (n - 1) / (count - 1))) for i in range(count)})


def cmd_diagnose(draws_path: Path, points: int, coords, max_lag: int, out: Path, reproducible: bool) -> int:
    theta, meta = read_draws(draws_path)
    m, n = theta.shape
    if m < 10:
        raise InputError(f"need at least 10 draws, got {m}")
    chosen = default_points(n, points) if coords is None else coords
    if any(not (0 <= c < n) for c in chosen):
        raise InputError(f"coordinates must lie in 1..{n}")
    wall = float(meta.get("wall_seconds", 0.0))
    lags = min(max_lag, m - 1)
    header = ["coordinate", "ess", "ess_per_sec"] + [f"acf_{t}" for t in range(1, lags + 1)]
    lines = [",".join(header)]
    trace = ["draw," + ",".join(f"theta_{c + 1}" for c in chosen)]
    for c in chosen:
        chain = theta[:, c]
        ess = effective_sample_size(chain)
        rate = ess / wall if wall > 0 and not reproducible else float("nan")
        acf = autocorrelation(chain, lags)[1:]
        lines.append(",".join([str(c + 1), _num(ess), _num(rate)] + [_num(v) for v in acf]))
    for t in range(m):
        trace.append(str(t + 1) + "," + ",".join(_num(theta[t, c]) for c in chosen))
    out = Path(out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n")
    out.with_name(out.stem + "_trace.csv").write_text("\n".join(trace) + "\n")
    _write_json(out.with_suffix(".json"), {
        "command": "diagnose", "version": __version__, "draws": str(draws_path),
        "coordinates": [c + 1 for c in chosen], "max_lag": lags,
        "source_seed": meta.get("seed"), "source_spec": meta.get("spec"),
    })
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qtrend", description="Bayesian quantile trend filtering")
    parser.add_argument("--version", action="version", version=f"qtrend {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--reproducible", action="store_true",
                       help="zero wall-clock fields so outputs are byte-identical across runs")

    fit = sub.add_parser("fit", help="fit quantile trends to a CSV file")
    fit.add_argument("--input", required=True, type=Path)
    fit.add_argument("--x-col", default="x")
    fit.add_argument("--y-col", default="y")
    fit.add_argument("--quantile", default="0.5")
    fit.add_argument("--order", type=int, default=0)
    fit.add_argument("--prior", choices=[p.value for p in Prior], default="horseshoe")
    fit.add_argument("--method", choices=["gibbs", "vb", "cvb"], default="cvb")
    fit.add_argument("--iters", type=int, default=DEFAULT_ITERS)
    fit.add_argument("--burnin", type=int, default=DEFAULT_BURNIN)
    fit.add_argument("--thin", type=int, default=DEFAULT_THIN)
    fit.add_argument("--bootstrap", type=int, default=200)
    fit.add_argument("--alpha", type=float, default=0.05)
    fit.add_argument("--lambda-max", type=float, default=400.0)
    fit.add_argument("--lambda-points", type=int, default=60)
    fit.add_argument("--a-sigma", type=float, default=0.1)
    fit.add_argument("--b-sigma", type=float, default=0.1)
    fit.add_argument("--a-w", type=float, default=0.1)
    fit.add_argument("--b-w", type=float, default=0.1)
    fit.add_argument("--c-tau", type=float, default=1.0)
    fit.add_argument("--format", choices=["csv", "json"], default="csv")
    fit.add_argument("--save-draws", action="store_true")
    fit.add_argument("--force-regular", action="store_true")
    fit.add_argument("--threads", type=int, default=None)
    fit.add_argument("--out", type=Path, default=Path("."))
    common(fit)

    sim = sub.add_parser("simulate", help="simulate a benchmark scenario")
    sim.add_argument("--scenario", required=True)
    sim.add_argument("--noise", default="gauss")
    sim.add_argument("--n", type=int, default=100)
    sim.add_argument("--quantile", default="0.05,0.25,0.5,0.75,0.95")
    sim.add_argument("--mixed-sd", action="store_true", help="read the mixed-normal spread as a standard deviation")
    sim.add_argument("--out", type=Path, default=Path("."))
    common(sim)

    bench = sub.add_parser("benchmark", help="run a simulation benchmark from a config file")
    bench.add_argument("--config", required=True, type=Path)
    bench.add_argument("--out", type=Path, default=Path("results.csv"))
    bench.add_argument("--threads", type=int, default=None)
    common(bench)

    diag = sub.add_parser("diagnose", help="autocorrelation and ESS of saved Gibbs draws")
    diag.add_argument("--draws", required=True, type=Path)
    diag.add_argument("--points", type=int, default=3)
    diag.add_argument("--coords", default=None, help="comma-separated 1-based coordinates")
    diag.add_argument("--max-lag", type=int, default=50)
    diag.add_argument("--out", type=Path, default=Path("diag.csv"))
    common(diag)
    return parser


def _dispatch(args) -> int:
    if args.command == "fit":
        try:
            spec = QuantileModelSpec(
                p=0.5, k=args.order, prior=args.prior, a_sigma=args.a_sigma, b_sigma=args.b_sigma,
                C_tau=args.c_tau, a_w=args.a_w, b_w=args.b_w,
            )
        except ValueError as exc:
            raise InputError(str(exc)) from exc
        if not (0.0 < args.alpha < 1.0) or args.bootstrap < 1:
            raise InputError("need 0 < alpha < 1 and bootstrap >= 1")
        if not (args.iters > args.burnin >= 0) or args.thin < 1:
            raise InputError("need iters > burnin >= 0 and thin >= 1")
        req = FitRequest(
            input=args.input, x_col=args.x_col, y_col=args.y_col, spec=spec, method=args.method,
            quantiles=_parse_levels(args.quantile), iters=args.iters, burnin=args.burnin, thin=args.thin,
            bootstrap=args.bootstrap, alpha=args.alpha, lambda_max=args.lambda_max,
            lambda_points=args.lambda_points, seed=args.seed, out=args.out, fmt=args.format,
            save_draws=args.save_draws, force_regular=args.force_regular,
            threads=_resolve_threads(args.threads), reproducible=args.reproducible,
        )
        return cmd_fit(req)
    if args.command == "simulate":
        return cmd_simulate(args.scenario, args.noise, args.n, args.seed, _parse_levels(args.quantile),
                            args.out, args.mixed_sd)
    if args.command == "benchmark":
        return cmd_benchmark(args.config, args.out, _resolve_threads(args.threads), args.reproducible)
    coords = None
    if args.coords:
        try:
            coords = [int(c) - 1 for c in args.coords.split(",") if c.strip()]
        except ValueError as exc:
            raise InputError(f"cannot parse coordinates {args.coords!r}") from exc
    return cmd_diagnose(args.draws, args.points, coords, args.max_lag, args.out, args.reproducible)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except (InputError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericalBreakdown, CalibrationError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
