"""Command-line entry point: ``simul-ecmpc {example1,example2,horizons}``.

Exit codes: 0 success, 1 configuration error, 2 at least one failed trial,
3 uncontrollable budget (pseudo-controllability measure not below one).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import scenarios as sc
from .horizons import (ControllabilityBudget, EstimatorBoundConstants, UncontrollableBudget,
                       min_backward_horizon_example1, min_backward_horizon_general,
                       min_forward_horizon, omega_empirical, pseudo_controllability)
from .sim import (MODES, MonteCarloCase, check_theorem1, example1_certificate, export_csv,
                  run_monte_carlo, write_report)

SCHEMA_VERSION = 1
SEED_ENV = "SIMUL_ECMPC_SEED"

EXIT_OK, EXIT_CONFIG, EXIT_FAILED_TRIAL, EXIT_UNCONTROLLABLE = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


def default_seed() -> int:
    v = os.environ.get(SEED_ENV)
    if v is None or v == "":
        return 0
    try:
        return int(v)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {v!r}") from None


@dataclass
class RunConfig:
    """Declarative description of one CLI run (written by ``--dump-config``)."""

    command: str
    regime: str = "nominal"
    mode: str = "both"
    N_e: Optional[int] = None
    N_c: Optional[int] = None
    phi: Optional[float] = None
    epsilon: float = 0.1
    grid: bool = False
    seeds: int = 20
    trials: int = 100
    steps: Optional[int] = None
    seed: int = 0
    jobs: int = 1
    out: str = "runs"
    sample_time: float = sc.SAMPLE_TIME
    disturbance_scale: Optional[float] = None
    forward_disturbances: str = "omit"
    schema_version: int = SCHEMA_VERSION

    def validate(self) -> "RunConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        if self.command not in ("example1", "example2"):
            raise ConfigError(f"unknown command {self.command!r}")
        if self.regime not in ("nominal", "tight"):
            raise ConfigError(f"unknown regime {self.regime!r}")
        if self.mode not in MODES + ("both",):
            raise ConfigError(f"unknown mode {self.mode!r}")
        for name in ("N_e", "N_c"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.phi is not None and not 0.0 <= self.phi <= 1.0:
            raise ConfigError("phi must lie in [0, 1]")
        if self.seeds < 1 or self.trials < 1:
            raise ConfigError("seeds and trials must be at least 1")
        if self.steps is not None and self.steps < 0:
            raise ConfigError("steps must be non-negative")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be non-negative")
        if not self.sample_time > 0:
            raise ConfigError("sample_time must be positive")
        if self.jobs == 0 or self.jobs < -1:
            raise ConfigError("jobs must be positive or -1")
        if self.forward_disturbances not in ("omit", "alternating-minmax"):
            raise ConfigError(f"unknown forward_disturbances {self.forward_disturbances!r}")
        if self.command == "example2" and self.grid and (self.N_e is not None or self.N_c is not None):
            raise ConfigError("--grid runs every horizon pair; do not combine with --Ne/--Nc")
        return self

    @property
    def modes(self) -> Sequence[str]:
        return MODES if self.mode == "both" else (self.mode,)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "command" not in d:
            raise ConfigError("config lacks 'command'")
        return cls(**d).validate()


def load_config(path) -> RunConfig:
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    return RunConfig.from_dict(d)


# --- parser -------------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """Reports bad flags with the configuration-error exit code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help=f"base seed (default ${SEED_ENV} or 0)")
    p.add_argument("--steps", type=int, default=None, help="closed-loop length in samples")
    p.add_argument("--out", default="runs", help="output directory")
    p.add_argument("--jobs", type=int, default=None, help="worker processes (default: all cores)")
    p.add_argument("--mode", choices=MODES + ("both",), default="both")
    p.add_argument("--Ne", type=int, default=None, help="backward horizon")
    p.add_argument("--Nc", type=int, default=None, help="forward horizon")
    p.add_argument("--phi", type=float, default=None, help="estimation/control weight")
    p.add_argument("--sample-time", type=float, default=sc.SAMPLE_TIME)
    p.add_argument("--disturbance-scale", type=float, default=None)
    p.add_argument("--forward-disturbances", choices=("omit", "alternating-minmax"), default="omit")
    p.add_argument("--config", default=None, help="JSON run config (overrides all other flags)")
    p.add_argument("--dump-config", default=None, metavar="PATH",
                   help="write the resolved run config to PATH and exit")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="simul-ecmpc",
                 description="Simultaneous moving-horizon estimation and control.")
    sub = ap.add_subparsers(dest="command", required=True)

    p1 = sub.add_parser("example1", help="scalar cubic system")
    p1.add_argument("--regime", choices=("nominal", "tight"), default="nominal")
    p1.add_argument("--seeds", type=int, default=20, help="number of noise realizations")
    _common(p1)

    p2 = sub.add_parser("example2", help="van der Pol oscillator Monte Carlo")
    p2.add_argument("--epsilon", type=float, default=0.1)
    p2.add_argument("--grid", action="store_true", help="run every (N_e, N_c) pair")
    p2.add_argument("--trials", type=int, default=100)
    _common(p2)

    p3 = sub.add_parser("horizons", help="horizon formulas and the omega sweep (JSON on stdout)")
    p3.add_argument("--formula", choices=("nc", "ne-ex1", "ne-general"), default=None)
    p3.add_argument("--delta", type=float, default=1.0)
    p3.add_argument("--L", type=float, default=2.0)
    p3.add_argument("--Delta", type=float, default=None,
                    help="pseudo-controllability; computed from the regime boxes when omitted")
    p3.add_argument("--P-inv", type=float, default=1e-5)
    p3.add_argument("--Qe", type=float, default=15.0)
    p3.add_argument("--Re", type=float, default=1e3)
    p3.add_argument("--a", type=float, default=sc.EX1_A)
    p3.add_argument("--g", type=float, default=sc.EX1_G)
    p3.add_argument("--K", type=float, default=sc.EX1_K_MIN)
    p3.add_argument("--constants", default=None,
                    help="JSON object of estimator bound constants for ne-general")
    p3.add_argument("--sweep-omega", action="store_true")
    p3.add_argument("--regime", choices=("nominal", "tight"), default="nominal")
    p3.add_argument("--Ne", type=int, default=30)
    p3.add_argument("--Nc-list", default="5:70:5", help="start:stop:step or comma list")
    p3.add_argument("--points", type=int, default=33)
    return ap


def _config_from_args(args) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
        if cfg.command != args.command:
            raise ConfigError(f"config is for {cfg.command!r}, not {args.command!r}")
        return cfg
    seed = default_seed() if args.seed is None else args.seed
    jobs = args.jobs if args.jobs is not None else (os.cpu_count() or 1)
    kw = dict(command=args.command, mode=args.mode, N_e=args.Ne, N_c=args.Nc, phi=args.phi,
              steps=args.steps, seed=seed, jobs=jobs, out=args.out, sample_time=args.sample_time,
              disturbance_scale=args.disturbance_scale,
              forward_disturbances=args.forward_disturbances)
    if args.command == "example1":
        kw.update(regime=args.regime, seeds=args.seeds)
    else:
        kw.update(epsilon=args.epsilon, grid=args.grid, trials=args.trials)
    return RunConfig(**kw).validate()


# --- commands -----------------------------------------------------------------------------

def _scenario_kw(rc: RunConfig) -> dict:
    kw = {"sample_time": rc.sample_time, "forward_disturbances": rc.forward_disturbances}
    if rc.disturbance_scale is not None:
        kw["disturbance_scale"] = rc.disturbance_scale
    return kw


def cmd_example1(rc: RunConfig) -> int:
    kw = _scenario_kw(rc)
    if rc.phi is not None:
        kw["phi"] = rc.phi
    S = sc.example1(rc.regime, rc.N_e or 30, rc.N_c or 10,
                    n_steps=100 if rc.steps is None else rc.steps, **kw)
    out = Path(rc.out)
    cases = [MonteCarloCase(f"example1-{rc.regime}-{m}", S.model, S.cfg, S.x0, S.prior, S.w_spec,
                            S.v_spec, S.n_steps, m) for m in rc.modes]
    summaries, records = run_monte_carlo(cases, rc.seeds, rc.seed, rc.jobs, keep_records=True)
    report = {"config": rc.to_dict(), "controller": S.cfg.to_dict(),
              "model": S.model.describe(), "summaries": [s.to_dict() for s in summaries],
              "certificate": {}}
    failed = False
    chi = float(abs(S.x0[0] - S.prior[0]))
    for case, s, recs in zip(cases, summaries, records):
        for r in recs:
            export_csv(r, out / f"{case.label}-trial{r.meta['trial']:03d}.csv")
        failed |= s.failures > 0
        cert = example1_certificate(recs, S.cfg) if S.n_steps else {}
        if case.mode == "simultaneous" and S.n_steps:
            reps = [check_theorem1(r, S.cfg, chi) for r in recs]
            cert["theorem1_pass_fraction"] = [q.pass_fraction for q in reps]
            cert["delta_omega_ok"] = all(q.delta_omega_ok for q in reps)
        report["certificate"][case.mode] = cert
    export_csv(summaries, out / f"example1-{rc.regime}-summary.csv",
               meta={"sample_time": rc.sample_time, "seed": rc.seed, "N_e": S.cfg.N_e,
                     "N_c": S.cfg.N_c, "phi": S.cfg.phi, "solver": S.cfg.solver.to_dict()})
    write_report(out / f"example1-{rc.regime}-report.json", report)
    _print_table(summaries)
    return EXIT_FAILED_TRIAL if failed else EXIT_OK


def cmd_example2(rc: RunConfig) -> int:
    kw = _scenario_kw(rc)
    if rc.phi is not None:
        kw["phi"] = rc.phi
    pairs = ([(ne, nc) for ne in sc.EX2_NE for nc in sc.EX2_NC] if rc.grid
             else [(rc.N_e or 10, rc.N_c or 10)])
    cases = []
    for ne, nc in pairs:
        try:
            S = sc.example2(rc.epsilon, ne, nc, n_steps=200 if rc.steps is None else rc.steps, **kw)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        for m in rc.modes:
            cases.append(MonteCarloCase(f"eps{rc.epsilon:g}-Ne{ne}-Nc{nc}-{m}", S.model, S.cfg, S.x0,
                                        S.prior, S.w_spec, S.v_spec, S.n_steps, m))
    summaries, records = run_monte_carlo(cases, rc.trials, rc.seed, rc.jobs, keep_records=True)
    out = Path(rc.out)
    tag = f"example2-eps{rc.epsilon:g}"
    export_csv(summaries, out / f"{tag}-summary.csv",
               meta={"sample_time": rc.sample_time, "seed": rc.seed, "trials": rc.trials,
                     "epsilon": rc.epsilon, "solver": cases[0].cfg.solver.to_dict()})
    # per-step mean wall time (one column per case)
    with open(out / f"{tag}-timing.csv", "w", encoding="utf-8") as fh:
        fh.write(f"# seed={rc.seed}\n# trials={rc.trials}\n")
        fh.write(",".join(["k"] + [c.label for c in cases]) + "\n")
        prof = [np.nanmean(np.stack([r.wall_ms for r in recs]), axis=0) if recs and len(recs[0])
                else np.zeros(0) for recs in records]
        for k in range(len(prof[0]) if prof else 0):
            fh.write(",".join([str(k)] + [repr(float(p[k])) for p in prof]) + "\n")
    write_report(out / f"{tag}-report.json",
                 {"config": rc.to_dict(), "summaries": [s.to_dict() for s in summaries]})
    _print_table(summaries)
    return EXIT_FAILED_TRIAL if any(s.failures for s in summaries) else EXIT_OK


def _parse_list(spec: str) -> List[int]:
    try:
        if ":" in spec:
            a, b, c = (int(v) for v in spec.split(":"))
            return list(range(a, b + 1, c))
        return [int(v) for v in spec.split(",") if v]
    except ValueError:
        raise ConfigError(f"bad horizon list {spec!r}") from None


def cmd_horizons(args) -> int:
    result = {}
    if args.formula is None and not args.sweep_omega:
        raise ConfigError("choose --formula and/or --sweep-omega")
    cfg = sc.example1_config(args.regime, args.Ne, 10)
    Delta = args.Delta
    if Delta is None:
        if cfg.W.is_finite and cfg.U.is_finite and cfg.X.is_finite:
            Delta = pseudo_controllability(None, cfg.X, cfg.U, cfg.W, cfg.weights)
        else:
            Delta = 0.1
    result["Delta"] = Delta
    budget = ControllabilityBudget(args.delta, args.L, Delta)
    if args.formula == "nc":
        result["N_c"] = min_forward_horizon(budget)
    elif args.formula == "ne-ex1":
        result["N_e"] = min_backward_horizon_example1(args.P_inv, args.Qe, args.Re, args.a, args.g, args.K)
    elif args.formula == "ne-general":
        try:
            consts = json.loads(args.constants) if args.constants else {}
            c = EstimatorBoundConstants(**consts)
        except (json.JSONDecodeError, TypeError) as e:
            raise ConfigError(f"bad --constants: {e}") from None
        result["N_e"] = min_backward_horizon_general(c)
    if args.sweep_omega:
        model = sc.example1_model()
        ncs = _parse_list(args.Nc_list)
        result["omega"] = {m: omega_empirical(model, cfg, ncs, budget, mode=m, n_points=args.points)
                           for m in MODES}
    json.dump(result, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return EXIT_OK


def _print_table(summaries) -> None:
    print(f"{'case':<40} {'mse':>12} {'std':>10} {'ok':>4} {'fail':>4} {'ms/step':>9}")
    for s in summaries:
        print(f"{s.label:<40} {s.mse_mean:>12.6g} {s.mse_std:>10.3g} {s.successes:>4d} "
              f"{s.failures:>4d} {s.mean_step_ms:>9.3f}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        if args.command == "horizons":
            return cmd_horizons(args)
        rc = _config_from_args(args)
        if args.dump_config:
            Path(args.dump_config).write_text(json.dumps(rc.to_dict(), indent=2) + "\n")
            return EXIT_OK
        return cmd_example1(rc) if rc.command == "example1" else cmd_example2(rc)
    except UncontrollableBudget as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_UNCONTROLLABLE
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        ap.print_usage(sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
