"""Command-line interface: fit, forecast, eval, benchmark.

All randomness flows from the explicit seed; given the same (seed, config,
data) triple every output file is byte-identical, regardless of the
worker-thread count.  Exit codes: 2 for configuration errors, 3 for data
errors, 4 for numerical aborts.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import baselines, dataio, forecast as fc, gp, smc
from .dataio import DataError, TimeSeries
from .gp import ModelState, NumericalError
from .kernels import parse, render, structure_signature
from .moves import MoveConfig
from .prior import PcfgConfig
from .smc import ScheduleConfig, SmcConfig

MODEL_FORMAT_VERSION = 1

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Everything a fit run needs; serialized alongside the model."""

    seed: int = 0
    particles: int = 48
    rejuv: int = 100
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    moves: MoveConfig = field(default_factory=MoveConfig)
    pcfg: PcfgConfig = field(default_factory=PcfgConfig)
    horizon: int = 18
    level: float = 0.05
    threads: int = 1
    time_column: str = "time"
    value_column: str = "value"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pcfg"]["base_probs"] = list(self.pcfg.base_probs)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        try:
            kwargs = dict(data)
            if "schedule" in kwargs:
                kwargs["schedule"] = ScheduleConfig(**kwargs["schedule"])
            if "moves" in kwargs:
                kwargs["moves"] = MoveConfig(**kwargs["moves"])
            if "pcfg" in kwargs:
                pcfg = dict(kwargs["pcfg"])
                if "base_probs" in pcfg:
                    pcfg["base_probs"] = tuple(pcfg["base_probs"])
                kwargs["pcfg"] = PcfgConfig(**pcfg)
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def smc_config(self) -> SmcConfig:
        return SmcConfig(
            n_particles=self.particles,
            n_rejuv=self.rejuv,
            schedule=self.schedule,
            seed=self.seed,
            threads=self.threads,
            pcfg=self.pcfg,
            moves=self.moves,
        )


def load_run_config(path: str | None, overrides: dict) -> RunConfig:
    base = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as handle:
                base = json.load(handle)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(base, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
    base.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_dict(base)


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _json_dump(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(obj, handle, sort_keys=True, indent=2)
        handle.write("\n")


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


def _load_series(path: str, cfg: RunConfig) -> TimeSeries:
    return dataio.load_csv(path, cfg.time_column, cfg.value_column)


def write_model(path, collection, cfg: RunConfig, data_hash: str) -> None:
    particles = [
        {
            "log_weight": float(lw),
            "kernel": render(state.expr),
            "eta": float(state.eta),
        }
        for state, lw in zip(collection.states, collection.log_weights)
    ]
    _json_dump(
        {
            "format_version": MODEL_FORMAT_VERSION,
            "data_sha256": data_hash,
            "config": cfg.to_dict(),
            "log_marginal": smc.log_marginal(collection),
            "particles": particles,
        },
        path,
    )


def read_model(path) -> tuple[dict, smc.ParticleCollection, RunConfig]:
    with open(path, encoding="utf-8") as handle:
        payload = json.load(handle)
    if payload.get("format_version") != MODEL_FORMAT_VERSION:
        raise ConfigError(f"unsupported model format in {path}")
    cfg = RunConfig.from_dict(payload["config"])
    states = [ModelState(parse(p["kernel"]), p["eta"]) for p in payload["particles"]]
    log_weights = np.array([p["log_weight"] for p in payload["particles"]])
    collection = smc.ParticleCollection(states, log_weights, 0, tuple(range(len(states))))
    return payload, collection, cfg


def write_diagnostics(path, diagnostics) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            [
                "step", "n_cum", "ess", "resampled", "log_marginal", "rejuv_flops",
                "replace_attempts", "replace_accepts",
                "detach_attach_attempts", "detach_attach_accepts",
                "hmc_attempts", "hmc_accepts",
            ]
        )
        for d in diagnostics:
            acc = d.acceptance
            rep = acc.get("replace", [0, 0])
            da = acc.get("detach_attach", [0, 0])
            hmc = acc.get("hmc", [0, 0])
            writer.writerow(
                [
                    d.step, d.n_cum, repr(d.ess), int(d.resampled), repr(d.log_marginal),
                    d.rejuv_flops, rep[0], rep[1], da[0], da[1], hmc[0], hmc[1],
                ]
            )


def write_summary(path, collection) -> None:
    weights = collection.normalized_weights()
    by_structure: dict[str, float] = {}
    for state, w in zip(collection.states, weights):
        key = structure_signature(state.expr)
        by_structure[key] = by_structure.get(key, 0.0) + float(w)
    ranked = sorted(by_structure.items(), key=lambda kv: (-kv[1], kv[0]))
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("weight\tstructure\n")
        for key, w in ranked:
            handle.write(f"{w:.6f}\t{key}\n")


def cmd_fit(args) -> int:
    overrides = {
        "seed": args.seed,
        "particles": args.particles,
        "rejuv": args.rejuv,
        "threads": args.threads,
    }
    try:
        cfg = load_run_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        series = _load_series(args.data, cfg)
        train = dataio.normalize(series)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    try:
        collection, diagnostics = smc.run_smc(train, cfg.smc_config())
    except (NumericalError, smc.DegenerateParticlesError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    out = args.out
    write_model(f"{out}/model.json", collection, cfg, _sha256(args.data))
    write_diagnostics(f"{out}/diagnostics.csv", diagnostics)
    write_summary(f"{out}/summary.txt", collection)
    print(f"fit complete: {collection.n_particles} particles, "
          f"log marginal {smc.log_marginal(collection):.4f}")
    return 0


# ---------------------------------------------------------------------------
# forecast
# ---------------------------------------------------------------------------


def cmd_forecast(args) -> int:
    try:
        payload, collection, cfg = read_model(args.model)
    except (OSError, json.JSONDecodeError, ConfigError, KeyError) as exc:
        print(f"config error: cannot load model: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if _sha256(args.data) != payload["data_sha256"]:
        print("data error: data file does not match the model (stale model?)", file=sys.stderr)
        return EXIT_DATA
    horizon = args.horizon if args.horizon is not None else cfg.horizon
    level = args.level if args.level is not None else cfg.level
    try:
        series = _load_series(args.data, cfg)
        train = dataio.normalize(series)
        query = dataio.next_query_times(series, horizon)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    try:
        result = fc.forecast_intervals(collection, train, query, level)
    except (NumericalError, smc.DegenerateParticlesError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    out = args.out
    with open(f"{out}/forecast.csv", "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["time", "mean", "lower", "upper"])
        for j in range(result.times.size):
            writer.writerow(
                [repr(float(result.times[j])), repr(float(result.mean[j])),
                 repr(float(result.lower[j])), repr(float(result.upper[j]))]
            )
    _json_dump(
        {
            "level": level,
            "times": [float(t) for t in result.times],
            "weights": [float(w) for w in result.weights],
            "means": [[float(v) for v in row] for row in result.means],
            "stds": [[float(v) for v in row] for row in result.stds],
        },
        f"{out}/components.json",
    )
    print(f"forecast written for horizon {horizon}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _read_forecast_csv(path):
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        rows = [
            (float(r["time"]), float(r["mean"]), float(r["lower"]), float(r["upper"]))
            for r in reader
        ]
    rows.sort(key=lambda r: r[0])
    return (np.array([r[i] for r in rows]) for i in range(4))


def cmd_eval(args) -> int:
    try:
        f_time, f_mean, f_lower, f_upper = _read_forecast_csv(args.forecast)
        truth = dataio.load_csv(args.truth, args.time_column, args.value_column)
        insample = dataio.load_csv(args.insample, args.time_column, args.value_column)
    except (OSError, DataError, KeyError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    if f_time.size != truth.n or not np.allclose(f_time, truth.times, rtol=1e-9, atol=1e-6):
        print("data error: forecast and truth horizons do not align", file=sys.stderr)
        return EXIT_DATA
    x = truth.values
    scale_args = (insample.values, args.m)
    try:
        metrics = {
            "smape": fc.smape(x, f_mean),
            "mase": fc.mase(x, f_mean, *scale_args),
            "msis": fc.msis(x, f_upper, f_lower, *scale_args, a=args.level),
            "per_horizon": {
                "smape": [fc.smape(x[j : j + 1], f_mean[j : j + 1]) for j in range(x.size)],
                "mase": [fc.mase(x[j : j + 1], f_mean[j : j + 1], *scale_args) for j in range(x.size)],
                "msis": [
                    fc.msis(x[j : j + 1], f_upper[j : j + 1], f_lower[j : j + 1], *scale_args, a=args.level)
                    for j in range(x.size)
                ],
            },
        }
    except (fc.UndefinedMetricError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    _json_dump(metrics, f"{args.out}/metrics.json")
    print(json.dumps({k: metrics[k] for k in ("smape", "mase", "msis")}, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------


def _fit_and_score(method, budget, train_raw, horizon, level, cfg: RunConfig):
    train_norm = dataio.normalize(train_raw)
    query = dataio.next_query_times(train_raw, horizon)
    started = time.perf_counter()
    if method in ("smc", "mcmc"):
        run_cfg = replace(cfg, rejuv=budget).smc_config()
        if method == "smc":
            collection, _ = smc.run_smc(train_norm, run_cfg)
        else:
            schedule = smc.make_schedule(train_norm.n, cfg.schedule)
            chain_cfg = replace(run_cfg, n_rejuv=budget * max(1, len(schedule)))
            collection, _ = baselines.mcmc_search(train_norm, chain_cfg)
        result = fc.forecast_intervals(collection, train_norm, query, level)
        mean = result.mean
    else:
        search = baselines.SearchConfig(
            max_depth=cfg.pcfg.max_depth or 10,
            restarts=max(1, budget // 10),
            seed=cfg.seed,
        )
        best = baselines.greedy_search(train_norm, search)
        state = ModelState(best.expr, best.eta)
        summary = gp.predictive(
            state, train_norm, (query - train_norm.transform.t_offset) / train_norm.transform.t_scale
        )
        mean = dataio.denormalize_values(summary.mean, train_norm.transform)
    wallclock_ms = (time.perf_counter() - started) * 1e3
    return mean, wallclock_ms


def cmd_benchmark(args) -> int:
    try:
        cfg = load_run_config(args.config, {"seed": args.seed, "threads": args.threads})
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        budgets = [int(b) for b in args.budgets.split(",") if b.strip()]
        if not budgets or any(b < 1 for b in budgets):
            raise ValueError("budgets must be positive integers")
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        series = _load_series(args.data, cfg)
        horizon = args.horizon if args.horizon is not None else cfg.horizon
        train_raw, test = dataio.split(series, horizon)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    rows = []
    for budget in budgets:
        for method in ("smc", "mcmc", "greedy"):
            try:
                mean, wallclock_ms = _fit_and_score(
                    method, budget, train_raw, horizon, cfg.level, cfg
                )
                rows.append((method, budget, fc.smape(test.values, mean), wallclock_ms, ""))
            except Exception as exc:  # record the failure, keep benchmarking
                rows.append((method, budget, "", "", f"{type(exc).__name__}: {exc}"))
    with open(f"{args.out}/benchmark.csv", "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["method", "budget", "smape", "wallclock_ms", "error"])
        for method, budget, smape_val, wallclock_ms, err in rows:
            writer.writerow(
                [method, budget,
                 repr(float(smape_val)) if smape_val != "" else "",
                 repr(float(wallclock_ms)) if wallclock_ms != "" else "",
                 err]
            )
    print(f"benchmark complete: {len(rows)} rows")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gpdiscover",
        description="Discover Gaussian-process time series models by SMC and forecast with them.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="infer a weighted ensemble of kernel structures")
    fit.add_argument("--data", required=True)
    fit.add_argument("--config", default=None)
    fit.add_argument("--seed", type=int, default=None)
    fit.add_argument("--particles", type=int, default=None)
    fit.add_argument("--rejuv", type=int, default=None)
    fit.add_argument("--threads", type=int, default=None)
    fit.add_argument("--out", default=".")
    fit.set_defaults(func=cmd_fit)

    fcast = sub.add_parser("forecast", help="forecast from a fitted model file")
    fcast.add_argument("--model", required=True)
    fcast.add_argument("--data", required=True)
    fcast.add_argument("--horizon", type=int, default=None)
    fcast.add_argument("--level", type=float, default=None,
                       help="tail mass a; intervals cover 1 - a (default from config)")
    fcast.add_argument("--out", default=".")
    fcast.set_defaults(func=cmd_forecast)

    ev = sub.add_parser("eval", help="score a forecast CSV against the truth")
    ev.add_argument("--forecast", required=True)
    ev.add_argument("--truth", required=True)
    ev.add_argument("--insample", required=True)
    ev.add_argument("-m", type=int, default=12, help="seasonal period (12 for monthly)")
    ev.add_argument("--level", type=float, default=0.05)
    ev.add_argument("--time-column", default="time")
    ev.add_argument("--value-column", default="value")
    ev.add_argument("--out", default=".")
    ev.set_defaults(func=cmd_eval)

    bench = sub.add_parser("benchmark", help="runtime-vs-error trace for SMC, MCMC, greedy")
    bench.add_argument("--data", required=True)
    bench.add_argument("--config", default=None)
    bench.add_argument("--seed", type=int, default=None)
    bench.add_argument("--horizon", type=int, default=None)
    bench.add_argument("--threads", type=int, default=None)
    bench.add_argument("--budgets", default="10,30,100",
                       help="comma-separated rejuvenation budgets")
    bench.add_argument("--out", default=".")
    bench.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
