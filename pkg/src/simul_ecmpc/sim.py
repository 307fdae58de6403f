"""Closed-loop simulation, Monte Carlo batches, statistics and exports."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .costs import KBoundFunctions
from .dynamics import NoiseSpec, SystemModel, sample_noise, trial_generators
from .ecmpc import EcmpcConfig, IndependentController, SimultaneousController
from .horizons import (ControllabilityBudget, ControllabilityGainError, equivalent_gain,
                       min_backward_horizon_example1, pi_E_bar)

MODES = ("simultaneous", "independent")

# per-step columns of a record, in export order
COLUMNS = ("t", "x", "x_hat", "u", "y", "w", "v", "objective", "tail", "dpsi", "delta_omega",
           "ell_c", "upsilon", "p_weight_max", "iterations", "converged", "wall_ms")


@dataclass
class ClosedLoopRecord:
    """Per-step history of one closed-loop run.

    Vector quantities are stored as ``(T, dim)`` arrays.  ``dpsi[k]`` is the
    tail criterion at ``k + 1`` minus the optimum at ``k`` (NaN where not
    available).  ``failed`` marks plant divergence; rows after ``fail_step``
    are NaN.
    """

    t: np.ndarray
    x: np.ndarray
    x_hat: np.ndarray
    u: np.ndarray
    y: np.ndarray
    w: np.ndarray
    v: np.ndarray
    objective: np.ndarray
    tail: np.ndarray
    dpsi: np.ndarray
    delta_omega: np.ndarray
    ell_c: np.ndarray
    upsilon: np.ndarray
    p_weight_max: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    wall_ms: np.ndarray
    failed: bool = False
    fail_step: Optional[int] = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.t.shape[0])

    def __post_init__(self):
        n = self.t.shape[0]
        for c in COLUMNS:
            if getattr(self, c).shape[0] != n:
                raise ValueError(f"column {c} has inconsistent length")


@dataclass
class MonteCarloSummary:
    label: str
    n_trials: int
    mse_mean: float
    mse_std: float
    successes: int
    failures: int
    mean_step_ms: float
    mse: np.ndarray
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"label": self.label, "n_trials": self.n_trials, "mse_mean": self.mse_mean,
                "mse_std": self.mse_std, "successes": self.successes, "failures": self.failures,
                "mean_step_ms": self.mean_step_ms, "mse": self.mse.tolist(), "meta": self.meta}


def _controller(mode: str, model, cfg, prior, batch):
    if mode == "simultaneous":
        return SimultaneousController(model, cfg, prior, batch)
    if mode == "independent":
        return IndependentController(model, cfg, prior, batch)
    raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")


def box_scale(cfg: EcmpcConfig) -> float:
    b = np.abs(np.concatenate([cfg.X.lower, cfg.X.upper]))
    b = b[np.isfinite(b)]
    return float(b.max()) if b.size else 1.0


def simulate_batch(model: SystemModel, cfg: EcmpcConfig, x0, prior, w_spec: NoiseSpec,
                   v_spec: NoiseSpec, n_steps: int, mode: str = "simultaneous",
                   seed: int = 0, trials: Sequence[int] = (0,),
                   budget: Optional[ControllabilityBudget] = None) -> list:
    """Run several trials in lock-step; returns one :class:`ClosedLoopRecord` per trial.

    Trial ``i`` draws its process and measurement noise from generators
    seeded by ``(seed, trials[i])``, so results do not depend on how trials
    are grouped into batches.
    """
    if n_steps < 0:
        raise ValueError("n_steps must be non-negative")
    budget = budget or ControllabilityBudget()
    trials = list(trials)
    B = len(trials)
    nx, ny = model.n_x, model.n_y
    x = np.array(np.broadcast_to(np.asarray(x0, dtype=float), (B, nx)))
    if not np.all(cfg.X.contains(x)):
        raise ValueError("initial state outside the state constraint set")
    W = np.zeros((B, n_steps, w_spec.dim))
    V = np.zeros((B, n_steps, v_spec.dim))
    for i, tr in enumerate(trials):
        gw, gv = trial_generators(seed, tr)
        W[i] = sample_noise(w_spec, n_steps, gw)
        V[i] = sample_noise(v_spec, n_steps, gv)
    if w_spec.dim != model.n_w or v_spec.dim != ny:
        raise ValueError("noise dimensions do not match the model")
    ctrl = _controller(mode, model, cfg, prior, B)

    T = n_steps
    nan = np.nan
    rec = {c: np.full((B, T), nan) for c in ("objective", "tail", "dpsi", "delta_omega", "ell_c",
                                             "upsilon", "p_weight_max", "wall_ms")}
    rec["x"] = np.full((B, T, nx), nan)
    rec["x_hat"] = np.full((B, T, nx), nan)
    rec["u"] = np.full((B, T, model.n_u), nan)
    rec["y"] = np.full((B, T, ny), nan)
    rec["iterations"] = np.zeros((B, T), dtype=int)
    rec["converged"] = np.zeros((B, T), dtype=bool)
    failed = np.zeros(B, dtype=bool)
    fail_step = np.full(B, -1)
    limit = 1e3 * box_scale(cfg)
    for k in range(T):
        y = model.output(x) + V[:, k]
        out = ctrl.step(y)
        alive = ~failed
        rec["x"][alive, k] = x[alive]
        rec["y"][alive, k] = y[alive]
        rec["x_hat"][alive, k] = out.x_hat[alive]
        rec["u"][alive, k] = out.u[alive]
        rec["objective"][alive, k] = out.objective[alive]
        rec["tail"][alive, k] = out.tail[alive]
        rec["ell_c"][alive, k] = out.ell_c[alive]
        rec["upsilon"][alive, k] = out.upsilon[alive]
        with np.errstate(divide="ignore", invalid="ignore"):
            dw = budget.delta * (out.upsilon / out.ell_c + budget.Delta / budget.delta)
        rec["delta_omega"][alive, k] = np.where(out.ell_c > 1e-12, dw, nan)[alive]
        rec["p_weight_max"][alive, k] = 1.0 / np.linalg.eigvalsh(out.P)[:, 0][alive]
        rec["iterations"][alive, k] = out.iterations[alive]
        rec["converged"][alive, k] = out.converged[alive]
        rec["wall_ms"][alive, k] = out.step_ms[alive]
        if k > 0:
            rec["dpsi"][alive, k - 1] = (out.tail - rec["objective"][:, k - 1])[alive]
        xn = model.step(x, out.u, W[:, k], check=False)
        bad = ~np.all(np.isfinite(xn), axis=1) | (np.max(np.abs(np.nan_to_num(xn, nan=np.inf)), axis=1) > limit)
        newly = bad & ~failed
        fail_step[newly] = k + 1
        failed |= bad
        x = np.where(failed[:, None], x, xn)

    records = []
    for i, tr in enumerate(trials):
        meta = {"mode": mode, "seed": int(seed), "trial": int(tr), "sample_time": model.sample_time,
                "scheme": model.scheme, "disturbance_scale": model.disturbance_scale,
                "N_e": cfg.N_e, "N_c": cfg.N_c, "phi": cfg.phi, "n_steps": T,
                "solver": cfg.solver.to_dict(), "model": model.name}
        records.append(ClosedLoopRecord(
            t=np.arange(T) * (model.sample_time or 1.0),
            w=W[i], v=V[i], failed=bool(failed[i]),
            fail_step=int(fail_step[i]) if failed[i] else None, meta=meta,
            **{c: rec[c][i] for c in rec}))
    return records


def run_closed_loop(model: SystemModel, cfg: EcmpcConfig, x0, prior, w_spec: NoiseSpec,
                    v_spec: NoiseSpec, n_steps: int, mode: str = "simultaneous", seed: int = 0,
                    trial: int = 0, budget: Optional[ControllabilityBudget] = None) -> ClosedLoopRecord:
    """Single closed-loop run; the plant sees ``w`` and ``v``, the controller only ``y``."""
    return simulate_batch(model, cfg, x0, prior, w_spec, v_spec, n_steps, mode, seed, (trial,),
                          budget)[0]


# --- statistics ---------------------------------------------------------------------

def mse(obj) -> float:
    """Time-averaged squared state norm of a record (or mean over a summary)."""
    if isinstance(obj, MonteCarloSummary):
        return obj.mse_mean
    x = obj.x if isinstance(obj, ClosedLoopRecord) else np.asarray(obj, dtype=float)
    x = x.reshape(x.shape[0], -1) if x.ndim > 1 else x[:, None]
    if x.shape[0] == 0:
        raise ValueError("empty record")
    x = x[np.all(np.isfinite(x), axis=1)]
    if x.shape[0] == 0:
        return float("inf")
    return float(np.mean(np.sum(x * x, axis=1)))


def regulated(rec: ClosedLoopRecord, amplitude: float, tail_fraction: float = 0.2,
              factor: float = 2.0) -> bool:
    """Mean ``|x|`` over the final part of the run below ``factor * amplitude``."""
    if rec.failed or len(rec) == 0:
        return False
    n = max(1, int(round(tail_fraction * len(rec))))
    tail = np.linalg.norm(rec.x[-n:].reshape(n, -1), axis=1)
    return bool(np.all(np.isfinite(tail)) and tail.mean() < factor * amplitude)


def summarize(label: str, records: Sequence[ClosedLoopRecord], amplitude: float,
              meta: Optional[dict] = None) -> MonteCarloSummary:
    m = np.array([mse(r) if len(r) else np.nan for r in records])
    finite = m[np.isfinite(m)]
    return MonteCarloSummary(
        label=label, n_trials=len(records),
        mse_mean=float(finite.mean()) if finite.size else float("inf"),
        mse_std=float(finite.std()) if finite.size else float("nan"),
        successes=sum(regulated(r, amplitude) for r in records),
        failures=sum(r.failed for r in records),
        mean_step_ms=float(np.nanmean([np.nanmean(r.wall_ms) for r in records])) if records and len(records[0]) else 0.0,
        mse=m, meta=dict(meta or {}))


@dataclass
class MonteCarloCase:
    """One configuration of a Monte Carlo study."""

    label: str
    model: SystemModel
    cfg: EcmpcConfig
    x0: np.ndarray
    prior: np.ndarray
    w_spec: NoiseSpec
    v_spec: NoiseSpec
    n_steps: int
    mode: str = "simultaneous"

    @property
    def amplitude(self) -> float:
        return max(self.w_spec.amplitude, self.v_spec.amplitude)


def _run_case(case: MonteCarloCase, n_trials: int, seed: int):
    t0 = time.perf_counter()
    recs = simulate_batch(case.model, case.cfg, case.x0, case.prior, case.w_spec, case.v_spec,
                          case.n_steps, case.mode, seed, range(n_trials))
    s = summarize(case.label, recs, case.amplitude,
                  meta={"mode": case.mode, "N_e": case.cfg.N_e, "N_c": case.cfg.N_c,
                        "phi": case.cfg.phi, "seed": seed, "elapsed_s": time.perf_counter() - t0})
    return s, recs


def run_monte_carlo(cases: Sequence[MonteCarloCase], n_trials: int, seed: int = 0, jobs: int = 1,
                    keep_records: bool = False):
    """Run every case for ``n_trials`` trials; cases are distributed over ``jobs`` workers.

    Each case is one batch, so the numbers do not depend on ``jobs``.
    Returns the summaries (and the records when ``keep_records``).
    """
    if n_trials < 1:
        raise ValueError("n_trials must be at least 1")
    if jobs == 1 or len(cases) <= 1:
        results = [_run_case(c, n_trials, seed) for c in cases]
    else:
        from joblib import Parallel, delayed
        results = Parallel(n_jobs=jobs)(delayed(_run_case)(c, n_trials, seed) for c in cases)
    summaries = [r[0] for r in results]
    if keep_records:
        return summaries, [r[1] for r in results]
    return summaries


# --- cost-decrease checks ---------------------------------------------------------------

@dataclass
class Theorem1Report:
    dpsi: np.ndarray
    rhs: np.ndarray
    holds: np.ndarray
    delta_omega: np.ndarray
    checked: np.ndarray
    pi_E: np.ndarray

    @property
    def pass_fraction(self) -> float:
        n = int(self.checked.sum())
        return float(self.holds[self.checked].mean()) if n else 1.0

    @property
    def delta_omega_ok(self) -> bool:
        d = self.delta_omega[np.isfinite(self.delta_omega)]
        return bool(np.all(d < 1.0))

    def to_dict(self) -> dict:
        return {"pass_fraction": self.pass_fraction, "checked_steps": int(self.checked.sum()),
                "delta_omega_ok": self.delta_omega_ok,
                "max_delta_omega": float(np.nanmax(self.delta_omega)) if np.isfinite(self.delta_omega).any() else None}


def check_theorem1(rec: ClosedLoopRecord, cfg: EcmpcConfig, chi_bound: float,
                   budget: Optional[ControllabilityBudget] = None, tol: float = 1e-6,
                   weighted: bool = False) -> Theorem1Report:
    """Per-step check of the cost-decrease inequality on a record.

    The default form is ``dPsi_k <= -l_c (1 - delta omega_k) + pi_E + tol``.
    With ``weighted=True`` the two terms carry the criterion weights,
    ``-(1 - phi) l_c (1 - delta omega_k) + phi pi_E``.  ``pi_E`` is computed
    from the step's arrival weight and the realized noise sup-norms.  Only
    steps whose two solves converged are checked.
    """
    budget = budget or ControllabilityBudget()
    phi = cfg.phi
    n = len(rec)
    w_sup = float(np.max(np.abs(rec.w))) if rec.w.size else 0.0
    v_sup = float(np.max(np.abs(rec.v))) if rec.v.size else 0.0
    pe = np.full(n, np.nan)
    for k in range(n):
        if np.isfinite(rec.p_weight_max[k]):
            K = KBoundFunctions.quadratic(cfg.weights, rec.p_weight_max[k])
            pe[k] = pi_E_bar(chi_bound, w_sup, v_sup, K, cfg.N_e)
    with np.errstate(invalid="ignore", divide="ignore"):
        dw = budget.delta * (rec.upsilon / rec.ell_c) + budget.Delta
    dw = np.where(rec.ell_c > 1e-12, dw, np.nan)
    a, b = (1.0 - phi, phi) if weighted else (1.0, 1.0)
    rhs = -a * rec.ell_c * (1.0 - np.nan_to_num(dw, nan=0.0)) + b * pe + tol
    checked = np.isfinite(rec.dpsi) & rec.converged & np.roll(rec.converged, -1)
    checked[-1:] = False
    holds = np.where(checked, rec.dpsi <= rhs, True)
    return Theorem1Report(dpsi=rec.dpsi, rhs=rhs, holds=holds, delta_omega=dw, checked=checked, pi_E=pe)


def gain_profile(rec: ClosedLoopRecord, guard: float = 1e-6) -> np.ndarray:
    """Equivalent scalar gain ``-u / x_hat`` per step of a record."""
    return equivalent_gain(rec.u[:, 0], rec.x_hat[:, 0], guard)


def example1_certificate(records: Sequence[ClosedLoopRecord], cfg: EcmpcConfig, a: float = 1.0,
                         g: Optional[float] = None) -> dict:
    """Measured gain and arrival weight of scalar runs, and the backward horizon they imply.

    ``K_min`` is the smallest equivalent gain over all steps of all records,
    ``P_inv_max`` the largest arrival weight.  ``N_e_min`` is the minimal
    backward horizon for these values (``None`` when ``K_min <= 0``).
    ``g`` defaults to ``3 x_max^3`` with ``x_max`` the state box bound.
    """
    if g is None:
        g = 3.0 * float(np.max(np.abs(np.concatenate([cfg.X.lower, cfg.X.upper])))) ** 3
    K = np.concatenate([gain_profile(r) for r in records]) if records else np.zeros(0)
    K = K[np.isfinite(K)]
    P = np.concatenate([r.p_weight_max for r in records]) if records else np.zeros(0)
    P = P[np.isfinite(P)]
    out = {"K_min": float(K.min()) if K.size else None,
           "K_median": float(np.median(K)) if K.size else None,
           "P_inv_max": float(P.max()) if P.size else None,
           "P_inv_min": float(P.min()) if P.size else None,
           "a": a, "g": g, "N_e_min": None}
    W = cfg.weights
    if out["K_min"] is not None and out["P_inv_max"] is not None:
        try:
            out["N_e_min"] = min_backward_horizon_example1(out["P_inv_max"], float(W.Qe[0, 0]),
                                                           float(W.Re[0, 0]), a, g, out["K_min"])
        except ControllabilityGainError:
            pass
    return out


# --- export -------------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _flat_columns(rec: ClosedLoopRecord):
    names, cols = [], []
    for c in COLUMNS:
        a = getattr(rec, c)
        if a.ndim == 1:
            names.append(c)
            cols.append(a)
        else:
            for j in range(a.shape[1]):
                names.append(f"{c}{j + 1}" if a.shape[1] > 1 else c)
                cols.append(a[:, j])
    return names, cols


def export_csv(obj, path, meta: Optional[dict] = None) -> Path:
    """Write a record (per-step rows) or a list of summaries (one row each).

    The file starts with ``# key=value`` lines.  Floats are written with
    ``repr`` (shortest round-trip form, 17 significant digits at most).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(obj, ClosedLoopRecord):
        info = dict(obj.meta)
        names, cols = _flat_columns(obj)
        rows = [[_fmt(c[i]) for c in cols] for i in range(len(obj))]
    else:
        summaries = [obj] if isinstance(obj, MonteCarloSummary) else list(obj)
        info = {}
        names = ["label", "mode", "N_e", "N_c", "phi", "n_trials", "mse_mean", "mse_std",
                 "successes", "failures", "mean_step_ms"]
        rows = []
        for s in summaries:
            rows.append([s.label, str(s.meta.get("mode", "")), _fmt(s.meta.get("N_e", 0)),
                         _fmt(s.meta.get("N_c", 0)), _fmt(s.meta.get("phi", float("nan"))),
                         _fmt(s.n_trials), _fmt(s.mse_mean), _fmt(s.mse_std), _fmt(s.successes),
                         _fmt(s.failures), _fmt(s.mean_step_ms)])
    info.update(meta or {})
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for k, v in info.items():
            fh.write(f"# {k}={json.dumps(v) if isinstance(v, (dict, list)) else v}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names)
        writer.writerows(rows)
    return path


def read_csv(path):
    """Parse a file written by :func:`export_csv`; returns ``(meta, columns)``."""
    meta, lines = {}, []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("# "):
                k, _, v = line[2:].rstrip("\n").partition("=")
                meta[k] = v
            else:
                lines.append(line)
    reader = csv.reader(lines)
    header = next(reader, [])
    data = {h: [] for h in header}
    for row in reader:
        for h, v in zip(header, row):
            data[h].append(v)
    cols = {}
    for h, vals in data.items():
        try:
            cols[h] = np.array([float(v) for v in vals])
        except ValueError:
            cols[h] = np.array(vals, dtype=object)
    return meta, cols


def write_report(path, payload: dict) -> Path:
    """JSON run report (summaries, certificate block, settings)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        if isinstance(o, np.bool_):
            return bool(o)
        raise TypeError(type(o))

    path.write_text(json.dumps(payload, indent=2, default=default, allow_nan=True) + "\n")
    return path
