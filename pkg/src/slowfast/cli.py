"""Command-line entry point.

Configuration is a TOML file with four sections::

    [run]         command, output, format
    [model]       name, plus the model parameters (c, q, a, b2, B1, f1, ...)
    [sim]         SimConfig fields
    [experiment]  command-specific settings, see ``EXPERIMENT_DEFAULTS``

``--set section.key=value`` overrides any entry (the value is parsed as a
TOML value, falling back to a string).  Exit status: 0 on success, 2 when a
scientific acceptance check fails, 1 on configuration or runtime errors.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("slowfast")

COMMANDS = ("simulate", "rate-strong", "rate-strong-sup", "rate-weak", "frozen-mixing", "poisson-check", "galerkin")
FORMATS = ("csv", "json", "both")

RUN_DEFAULTS = {"command": "simulate", "output": "out", "format": "both"}
SIM_DEFAULTS = {"epsilon": 2.0**-4, "m": 16, "dt": 2.5e-4, "T": 0.5, "scheme": "exact-ou-fast",
                "micro_substeps": 1, "samples": 2000, "master_seed": 20240917, "record_every": 0}
EXPERIMENT_DEFAULTS = {
    "epsilons": [2.0**-j for j in range(4, 10)],
    "p": 2.0,
    "v": [1.0],
    "all_times": False,
    "x0_amplitude": 1.0,
    "x0_decay": 1.2,
    "y0_amplitude": 0.0,
    "y0_decay": 1.2,
    "guard_samples": 5000,
    # frozen-mixing / poisson-check
    "x_amplitude": 0.5,
    "lags": [],
    "replicas": 2000,
    "frozen_dt": 0.0,
    "t_grid": [0.02, 0.04, 0.06, 0.08, 0.1],
    "fd_step": 1e-3,
    "generator_replicas": 100000,
    "probe_points": 50,
    "probe_m": [16, 32],
    # galerkin
    "m_grid": [8, 16, 32],
    "M": 64,
}
MODEL_DEFAULTS = {"name": "linear-ou"}
SECTIONS = {"run": RUN_DEFAULTS, "model": MODEL_DEFAULTS, "sim": SIM_DEFAULTS, "experiment": EXPERIMENT_DEFAULTS}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    run: dict
    model: dict
    sim: dict
    experiment: dict

    @property
    def command(self) -> str:
        return self.run["command"]

    def as_dict(self) -> dict:
        """Resolved config as embedded in artifacts.  The output directory is left
        out so that artifacts do not depend on where they were written."""
        run = {k: v for k, v in self.run.items() if k != "output"}
        return {"run": run, "model": self.model, "sim": self.sim, "experiment": self.experiment}


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def load_config(path=None, overrides=(), seed=None, output=None, all_times=False) -> RunConfig:
    """Merge defaults, the TOML file and overrides; unknown keys are errors."""
    raw = {}
    if path is not None:
        try:
            raw = tomllib.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
    for sec in raw:
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
    merged = {sec: {**copy.deepcopy(dflt), **raw.get(sec, {})} for sec, dflt in SECTIONS.items()}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, text = item.split("=", 1)
        sec, _, name = key.strip().partition(".")
        if not name:
            sec, name = _guess_section(sec)
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section in override {key!r}")
        merged[sec][name] = _parse_value(text.strip())
    if seed is not None:
        merged["sim"]["master_seed"] = int(seed)
    if output is not None:
        merged["run"]["output"] = str(output)
    if all_times:
        merged["experiment"]["all_times"] = True
    for sec in ("run", "sim", "experiment"):
        unknown = set(merged[sec]) - set(SECTIONS[sec])
        if unknown:
            raise ConfigError(f"unknown key(s) in [{sec}]: {', '.join(sorted(unknown))}")
    cfg = RunConfig(**merged)
    _validate(cfg)
    return cfg


def _guess_section(name):
    hits = [sec for sec, d in SECTIONS.items() if name in d and sec != "model"]
    if len(hits) == 1:
        return hits[0], name
    raise ConfigError(f"override key {name!r} needs a section prefix (e.g. sim.{name})")


def _validate(cfg: RunConfig):
    if cfg.command not in COMMANDS:
        raise ConfigError(f"run.command: unknown command {cfg.command!r}; choose from {', '.join(COMMANDS)}")
    if cfg.run["format"] not in FORMATS:
        raise ConfigError(f"run.format: must be one of {FORMATS}")
    s = cfg.sim
    for key, ok, what in (("epsilon", lambda v: v > 0, "must be positive"),
                          ("dt", lambda v: v > 0, "must be positive"),
                          ("T", lambda v: v > 0, "must be positive"),
                          ("samples", lambda v: int(v) == v and v >= 1, "must be an integer >= 1"),
                          ("m", lambda v: int(v) == v and v >= 1, "must be an integer >= 1"),
                          ("micro_substeps", lambda v: int(v) == v and v >= 1, "must be an integer >= 1"),
                          ("record_every", lambda v: int(v) == v and v >= 0, "must be an integer >= 0")):
        v = s[key]
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not ok(v):
            raise ConfigError(f"sim.{key}: {what}, got {v!r}")
    eps = cfg.experiment["epsilons"]
    if not isinstance(eps, list) or not all(isinstance(e, (int, float)) and e > 0 for e in eps):
        raise ConfigError("experiment.epsilons: must be a list of positive numbers")


# ---------------------------------------------------------------- commands

def _build(cfg: RunConfig):
    from .integrator import SimConfig
    from .model import builtin_model
    import numpy as np

    params = {k: v for k, v in cfg.model.items() if k != "name"}
    try:
        model = builtin_model(cfg.model["name"], int(cfg.sim["m"]), params)
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from None
    s = dict(cfg.sim)
    s["record_every"] = int(s["record_every"]) or None
    s["m"] = int(s["m"])
    s["samples"] = int(s["samples"])
    s["micro_substeps"] = int(s["micro_substeps"])
    try:
        sim = SimConfig(**s).validate(model)
    except ValueError as exc:
        raise ConfigError(f"sim.{exc}") from None
    e = cfg.experiment
    k = np.arange(1, model.m + 1, dtype=float)
    x0 = e["x0_amplitude"] * k ** -e["x0_decay"]
    y0 = e["y0_amplitude"] * k ** -e["y0_decay"]
    return model, sim, x0, y0


def _emit(outdir: Path, stem: str, cfg: RunConfig, rows, summary):
    from .experiments import write_csv, write_json

    outdir.mkdir(parents=True, exist_ok=True)
    conf = cfg.as_dict()
    fmt = cfg.run["format"]
    written = []
    if fmt in ("csv", "both") and rows is not None:
        cols = list(rows[0]) if rows else None
        write_csv(outdir / f"{stem}.csv", rows, conf, cols if stem not in RATE_STEMS else None)
        written.append(outdir / f"{stem}.csv")
    if fmt in ("json", "both"):
        write_json(outdir / f"{stem}.json", {**summary, "config": conf})
        written.append(outdir / f"{stem}.json")
    return written


RATE_STEMS = ("rate-strong", "rate-strong-sup", "rate-weak")


def cmd_rate(cfg, outdir):
    from .experiments import report_summary, run_rate

    model, sim, x0, y0 = _build(cfg)
    e = cfg.experiment
    rep = run_rate(cfg.command, model, sim, x0, y0, e["epsilons"], p=float(e["p"]), v=e["v"],
                   all_times=bool(e["all_times"]), guard_samples=int(e["guard_samples"]) or None)
    summary = report_summary(rep, cfg.as_dict())
    _emit(outdir, cfg.command, cfg, rep.rows, summary)
    fit = rep.fit
    if fit is None:
        line = f"{cfg.command}: fit failed ({rep.fit_error})"
    else:
        line = (f"{cfg.command}: slope {fit.slope:.4f} +- {fit.slope_ci_halfwidth:.4f}, R^2 {fit.r_squared:.4f}, "
                f"band [{rep.band[0]}, {rep.band[1]}], doubling bias {rep.guard.relative_bias:.3g}")
    return rep.passed, line


def cmd_simulate(cfg, outdir):
    from .integrator import simulate_coupled

    model, sim, x0, y0 = _build(cfg)
    ens = simulate_coupled(x0, y0, sim, model)
    outdir.mkdir(parents=True, exist_ok=True)
    conf = cfg.as_dict()
    fmt = cfg.run["format"]
    if fmt in ("csv", "both"):
        ens.to_csv(outdir / "trajectory.csv", conf)
    if fmt in ("json", "both"):
        ens.to_binary(outdir / "trajectory.bin")
        second = float((ens.X[-1] ** 2).sum(axis=1).mean())
        from .experiments import version_string, write_json
        write_json(outdir / "trajectory.json", {"config": conf, "version": version_string(),
                                                 "binary": "trajectory.bin", "n_times": int(ens.times.size),
                                                 "n_samples": ens.n_samples, "mean_sq_norm_T": second})
    return True, f"simulate: {ens.n_samples} samples, {ens.times.size} grid times, m={ens.m}"


def cmd_mixing(cfg, outdir):
    import numpy as np
    from .averaging import mixing_rate
    from .experiments import version_string
    from .rng import NoiseStream

    model, sim, _, _ = _build(cfg)
    e = cfg.experiment
    k = np.arange(1, model.m + 1, dtype=float)
    x = e["x_amplitude"] * k ** -e["x0_decay"]
    lags = np.asarray(e["lags"], float) if e["lags"] else None
    dt = float(e["frozen_dt"]) or None
    fit = mixing_rate(model, x, lags=lags, replicas=int(e["replicas"]), dt=dt,
                      stream=NoiseStream(sim.master_seed))
    env = -model.theta / 4
    ok = fit.within_envelope(model.theta, slack=2.0)
    rows = [{"lag": float(t), "difference": float(v), "stderr": float(s)}
            for t, v, s in zip(fit.lags, fit.values, fit.stderr)]
    summary = {"rate": fit.rate, "ci_halfwidth": fit.ci_halfwidth, "prefactor": fit.prefactor,
               "censored": fit.censored, "envelope_rate": env, "passed": ok, "version": version_string()}
    _emit(outdir, "frozen-mixing", cfg, rows, summary)
    return ok, f"frozen-mixing: rate {fit.rate:.4f} +- {fit.ci_halfwidth:.2g} (envelope {env:.4f})"


def cmd_poisson(cfg, outdir):
    import numpy as np
    from .experiments import version_string
    from .poisson import generator_identity_check, phi_bound_probe, probe_grid
    from .rng import NoiseStream

    model, sim, _, _ = _build(cfg)
    e = cfg.experiment
    k = np.arange(1, model.m + 1, dtype=float)
    x = e["x_amplitude"] * k ** -e["x0_decay"]
    y = k ** -e["y0_decay"]
    chk = generator_identity_check(model, x, y, e["t_grid"], replicas=int(e["generator_replicas"]),
                                   fd_step=float(e["fd_step"]), stream=NoiseStream(sim.master_seed))
    probe = phi_bound_probe(model, probe_grid(int(e["probe_points"]), max(e["probe_m"]), sim.master_seed),
                            e["probe_m"])
    ok = chk.ok and probe.stable
    rows = [{"t": float(t), "residual": float(r), "budget": float(b)}
            for t, r, b in zip(chk.t_grid, chk.residuals, chk.budget)]
    summary = {"max_residual": chk.max_residual, "identity_ok": chk.ok,
               "bound_ratios": {str(m): r for m, r in probe.ratios.items()},
               "bound_relative_change": probe.relative_change,
               "alpha_norm_ratios": {str(m): r for m, r in probe.alpha_ratios.items()}, "alpha": probe.alpha,
               "passed": ok, "version": version_string()}
    _emit(outdir, "poisson-check", cfg, rows, summary)
    return ok, (f"poisson-check: max residual {chk.max_residual:.3g} (budget ok: {chk.ok}), "
                f"bound change {probe.relative_change:.3g}")


def cmd_galerkin(cfg, outdir):
    from .experiments import galerkin_refinement, version_string

    model, sim, _, _ = _build(cfg)
    e = cfg.experiment
    rows = galerkin_refinement(model, sim, e["m_grid"], int(e["M"]))
    out = [{"m": r.m, "distance": r.distance, "stderr": r.stderr,
            "tail_bound": "" if r.tail_bound is None else r.tail_bound} for r in rows]
    coarse = [r for r in rows if r.m != int(e["M"])]
    dec = all(a.distance > b.distance for a, b in zip(coarse, coarse[1:]))
    bounded = all(r.tail_bound is None or r.distance <= r.tail_bound for r in coarse)
    ok = dec and bounded
    _emit(outdir, "galerkin", cfg, out, {"decreasing": dec, "within_tail_bound": bounded, "passed": ok,
                                         "version": version_string()})
    dist = ", ".join(f"m={r.m}: {r.distance:.3g}" for r in coarse)
    return ok, f"galerkin: {dist}; decreasing {dec}, within tail bound {bounded}"


HANDLERS = {"simulate": cmd_simulate, "rate-strong": cmd_rate, "rate-strong-sup": cmd_rate,
            "rate-weak": cmd_rate, "frozen-mixing": cmd_mixing, "poisson-check": cmd_poisson,
            "galerkin": cmd_galerkin}


def _set_threads(n):
    if n is None:
        return
    if n < 1:
        raise ConfigError("--threads must be >= 1")
    if "numba" not in sys.modules:
        os.environ["NUMBA_NUM_THREADS"] = str(n)
    else:
        import numba
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def run(config_path=None, overrides=(), *, threads=None, seed=None, output=None, all_times=False,
        command=None) -> int:
    """Execute one configured command and return the process exit code."""
    try:
        _set_threads(threads)
        cfg = load_config(config_path, overrides, seed, output, all_times)
        if command is not None:
            cfg.run["command"] = command
            _validate(cfg)
        print(f"seed {cfg.sim['master_seed']}")
        ok, line = HANDLERS[cfg.command](cfg, Path(cfg.run["output"]))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        log.debug("run failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(line)
    if not ok:
        print("acceptance check FAILED", file=sys.stderr)
        return 2
    return 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="slowfast", description=__doc__.split("\n\n")[0])
    ap.add_argument("command", nargs="?", choices=COMMANDS, help="overrides run.command")
    ap.add_argument("--config", type=Path)
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--threads", type=int)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--output", type=Path)
    ap.add_argument("--all-times", action="store_true")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return run(args.config, args.overrides, threads=args.threads, seed=args.seed, output=args.output,
               all_times=args.all_times, command=args.command)


if __name__ == "__main__":
    sys.exit(main())
