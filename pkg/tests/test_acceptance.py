"""Acceptance criteria 1-10, each reported as one pass/fail line.

Run with ``pytest -m acceptance -s tests/test_acceptance.py``.  The Example 2
grid (criteria 7 and 8) dominates the runtime.
"""
import math

import numpy as np
import pytest

import lq_oracle as lq
from simul_ecmpc import scenarios as sc
from simul_ecmpc.cli import main
from simul_ecmpc.costs import ArrivalCost, QuadraticWeights
from simul_ecmpc.ecmpc import IndependentController, SimultaneousController, WindowBuffer, build_problem
from simul_ecmpc.horizons import (ControllabilityBudget,
                                  estimation_error_bound_example1, iioss_bound_example1,
                                  min_backward_horizon_example1, min_forward_horizon, omega_empirical)
from simul_ecmpc.nlp import NlpProblem, SolveOptions, grid_oracle, solve
from simul_ecmpc.sim import (MonteCarloCase, check_theorem1, example1_certificate, export_csv,
                             read_csv, regulated, run_monte_carlo, simulate_batch)

pytestmark = pytest.mark.acceptance

SEEDS = range(20)
NC_GRID = list(range(5, 75, 5))
FIG1_BUDGET = ControllabilityBudget(delta=1.0, L=2.0, Delta=0.1)


def _run(S, mode, trials=SEEDS, n_steps=None):
    return simulate_batch(S.model, S.cfg, S.x0, S.prior, S.w_spec, S.v_spec,
                          S.n_steps if n_steps is None else n_steps, mode, trials=trials)


# -- 1 ----------------------------------------------------------------------

def test_criterion_01_horizon_formulas(verdict):
    ok = [min_forward_horizon(ControllabilityBudget(1.0, 2.0, 0.1)) == 2,
          min_forward_horizon(ControllabilityBudget(1.0, 10.0, 0.1)) == 23,
          min_backward_horizon_example1(0.0, 1.0, 1.0, 1.0, 1.0, 1.0) == 16]
    rng = np.random.default_rng(2024)
    bad = 0
    for _ in range(1000):
        d, L, D = rng.uniform(0.05, 5), rng.uniform(1.01, 30), rng.uniform(0.0, 0.95)
        base = min_forward_horizon(ControllabilityBudget(d, L, D))
        bad += min_forward_horizon(ControllabilityBudget(d * rng.uniform(1, 3), L, D)) < base
        bad += min_forward_horizon(ControllabilityBudget(d, L * rng.uniform(1, 3), D)) < base
        bad += min_forward_horizon(ControllabilityBudget(d, L, D + rng.uniform(0, 0.99 - D))) < base
        P, Qe, Re, a, g, K = rng.uniform(1e-3, 5, size=6)
        n0 = min_backward_horizon_example1(P, Qe, Re, a, g, K)
        bad += min_backward_horizon_example1(P, Qe, Re, a, g, K * rng.uniform(1, 3)) > n0
        bad += min_backward_horizon_example1(P, Qe, Re, a, g * rng.uniform(1, 3), K) < n0
    ok.append(bad == 0)
    assert verdict(1, all(ok), f"examples {ok[:3]}, monotonicity violations {bad}/5000")


# -- 2 ----------------------------------------------------------------------

def _monotone_instance(rng, n):
    """Box-constrained ``|M (z + g z^3) - b|^2``; unimodal since ``z -> z + g z^3`` is monotone."""
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    M = Q * rng.uniform(0.5, 1.5, size=n)
    gam = rng.uniform(0.0, 0.2)
    b = rng.normal(scale=1.0, size=n)
    lo = -rng.uniform(0.3, 1.0, size=n)
    hi = rng.uniform(0.3, 1.0, size=n)

    def res(z, rows):
        return (z + gam * z ** 3) @ M.T - b

    def jac(z, rows):
        return res(z, rows), M[None] * (1 + 3 * gam * z ** 2)[:, None, :]

    return NlpProblem(jacobian=jac, residuals=res, lower=lo, upper=hi)


def _cubic_joint(rng):
    # N_e = N_c = 1 joint window on the cubic system, unit weights
    cfg = sc.example1_config("tight", N_e=1, N_c=1).with_(
        weights=QuadraticWeights(Qe=1.0, Re=1.0, Qc=1.0, Rc=1.0, Sc=1.0))
    y0 = rng.uniform(-0.7, 0.7)
    buf = WindowBuffer(y=np.array([[y0], [y0 + rng.uniform(-0.1, 0.1)]]),
                       u=np.array([[rng.uniform(-0.6, 0.6)]]),
                       arrival=ArrivalCost(mean=[rng.uniform(-0.5, 0.5)], P=1.0), k=1)
    return build_problem(sc.example1_model(), cfg, buf).nlp


def _lq_max_errors():
    rng = np.random.default_rng(0)
    ys = rng.normal(size=(8, 1))
    prior = np.array([0.3, -0.2])
    worst = 0.0
    # k <= N_e: the window spans the whole history, so the filter is the exact reference.
    # The simultaneous estimate is the filter mean pulled toward the LQR value
    # function; it reduces to the filter as phi -> 1, where the control terms
    # vanish from the objective and only the estimate is compared.
    for cls, phi, coupled, check_u in ((IndependentController, 0.5, False, True),
                                       (SimultaneousController, 0.5, True, True),
                                       (SimultaneousController, 1.0 - 1e-9, False, False)):
        cfg = lq.config(phi=phi)
        ctrl = cls(lq.model(), cfg, prior)
        kf = lq.Kalman(prior)
        K, V = lq.lqr(cfg.N_c)
        for y in ys:
            out = ctrl.step(y[None])
            m, Pi = kf.update(y)
            ref = lq.coupled_estimate(m, Pi, V, phi) if coupled else m
            worst = max(worst, np.max(np.abs(out.x_hat[0] - ref)))
            if check_u:
                worst = max(worst, abs(out.u[0, 0] + (K @ ref)[0]))
            kf.predict(out.u[0])
    return worst


def test_criterion_02_solver_oracles(verdict):
    rng = np.random.default_rng(7)
    opts = SolveOptions(max_iterations=200)
    gaps = []
    for i in range(50):
        if i % 5 == 0:
            p, res = _cubic_joint(rng), 0.01
        else:
            n = 1 + i % 4
            p, res = _monotone_instance(rng, n), {1: 0.005, 2: 0.01, 3: 0.02, 4: 0.04}[n]
        _, fg = grid_oracle(p, res)
        out = solve(p, opts, z0=np.zeros((1, p.n)))
        gaps.append(abs(out.objective[0] - fg) / (10 * res ** 2))
    lq_err = _lq_max_errors()
    ok = max(gaps) <= 1.0 and lq_err < 1e-6
    assert verdict(2, ok, f"worst |solve - grid| / 10 res^2 = {max(gaps):.3f} over 50, "
                          f"KF+LQR max error {lq_err:.1e}")


# -- 3, 4 -------------------------------------------------------------------

@pytest.fixture(scope="module")
def nominal_runs():
    S = sc.example1("nominal")
    mirror = sc.example1("nominal", x0=-sc.EX1_X0)
    return S, _run(S, "simultaneous"), _run(mirror, "simultaneous")


def test_criterion_03_cost_decrease(verdict, nominal_runs):
    S, recs, _ = nominal_runs
    chi = abs(S.x0[0] - S.prior[0])
    reps = [check_theorem1(r, S.cfg, chi_bound=chi) for r in recs]
    held = sum(int(r.holds[r.checked].sum()) for r in reps)
    checked = sum(int(r.checked.sum()) for r in reps)
    frac = held / checked if checked else 0.0
    dw = max(float(np.nanmax(r.delta_omega)) for r in reps)
    ok = checked > 0 and frac >= 0.95 and all(r.delta_omega_ok for r in reps)
    assert verdict(3, ok, f"inequality holds on {frac:.3f} of {checked} converged steps, "
                          f"max delta omega {dw:.3f}")


def test_criterion_04_bound_dominance(verdict, nominal_runs):
    S, recs, mirror = nominal_runs
    x0_err = abs(S.x0[0] - S.prior[0])
    worst_e = worst_i = 0.0
    for r, r2 in zip(recs, mirror):
        w_sup, v_sup = float(np.max(np.abs(r.w))), float(np.max(np.abs(r.v)))
        b = np.array([estimation_error_bound_example1(
            r.p_weight_max[k], S.cfg.weights.Qe[0, 0], S.cfg.weights.Re[0, 0], sc.EX1_A, sc.EX1_G,
            sc.EX1_K_MIN, sc.EX1_MU, x0_err, w_sup, v_sup, k, S.cfg.N_e) for k in range(len(r))])
        worst_e = max(worst_e, float(np.max(np.abs(r.x[:, 0] - r.x_hat[:, 0]) / b)))
        # same noise draw on both runs: the disturbance difference is zero
        dy = np.maximum.accumulate(np.abs(r.y[:, 0] - r2.y[:, 0]))
        bi = iioss_bound_example1(2 * sc.EX1_X0, sc.EX1_K_MIN, sc.EX1_A, sc.EX1_G, 0.0, dy, r.t)
        worst_i = max(worst_i, float(np.max(np.abs(r.x[:, 0] - r2.x[:, 0]) / bi)))
    ok = worst_e <= 1.0 and worst_i <= 1.0
    assert verdict(4, ok, f"max error/bound {worst_e:.2e}, max divergence/i-IOSS bound {worst_i:.3f}")


# -- 5 ----------------------------------------------------------------------

def test_criterion_05_omega_ordering(verdict):
    model = sc.example1_model()
    curves = {}
    for regime in ("nominal", "tight"):
        cfg = sc.example1_config(regime, 30, 10)
        for mode in ("simultaneous", "independent"):
            tab = omega_empirical(model, cfg, NC_GRID, FIG1_BUDGET, mode=mode)
            curves[regime, mode] = np.array([r["omega"] for r in tab])
    mono = all(np.all(np.diff(curves["nominal", m]) <= 1e-12) for m in ("simultaneous", "independent"))
    order = bool(np.all(curves["tight", "simultaneous"] <= curves["tight", "independent"] + 1e-12))
    gap = float(np.max(curves["tight", "independent"] - curves["tight", "simultaneous"]))
    assert verdict(5, mono and order, f"nominal non-increasing {mono}, tight sim <= ind {order} "
                                      f"(largest gap {gap:.3f})")


# -- 6, 9 -------------------------------------------------------------------

@pytest.fixture(scope="module")
def tight_runs():
    out = {}
    for nc in (20, 70):
        S = sc.example1("tight", 30, nc)
        for mode in ("simultaneous", "independent"):
            out[nc, mode] = (S, _run(S, mode))
    return out


def test_criterion_06_robustness_ordering(verdict, tight_runs):
    wins = {k: sum(regulated(r, S.noise_amplitude) for r in recs) for k, (S, recs) in tight_runs.items()}
    ok = (all(wins[nc, "simultaneous"] >= wins[nc, "independent"] for nc in (20, 70))
          and wins[70, "simultaneous"] == len(SEEDS))
    txt = ", ".join(f"N_c={nc}: {wins[nc, 'simultaneous']} vs {wins[nc, 'independent']}" for nc in (20, 70))
    assert verdict(6, ok, f"regulated seeds (simultaneous vs independent) {txt}")


def test_criterion_09_backward_horizon_ordering(verdict, tight_runs):
    ok, parts = True, []
    for nc in (20, 70):
        cert = {m: example1_certificate(tight_runs[nc, m][1], tight_runs[nc, m][0].cfg)
                for m in ("simultaneous", "independent")}
        ns, ni = cert["simultaneous"]["N_e_min"], cert["independent"]["N_e_min"]
        ok &= ns is not None and (ni is None or ns <= ni)
        parts.append(f"N_c={nc}: {ns} vs {ni} (K_min {cert['simultaneous']['K_min']:.4f} vs "
                     f"{cert['independent']['K_min']:.4f})")
    assert verdict(9, ok, "minimal backward horizon (simultaneous vs independent) " + "; ".join(parts))


# -- 7, 8 -------------------------------------------------------------------

@pytest.fixture(scope="module")
def example2_grid():
    out = {}
    for eps in (0.1, 3.0):
        cases = []
        for ne in sc.EX2_NE:
            for nc in sc.EX2_NC:
                S = sc.example2(eps, ne, nc)
                cases += [MonteCarloCase((ne, nc, m), S.model, S.cfg, S.x0, S.prior, S.w_spec, S.v_spec,
                                         S.n_steps, m) for m in ("simultaneous", "independent")]
        for s in run_monte_carlo(cases, 100, seed=0, jobs=-1):
            out[(eps,) + s.label] = s
    return out


def test_criterion_07_mse_ordering(verdict, example2_grid):
    g = example2_grid
    cells = [(e, ne, nc) for e in (0.1, 3.0) for ne in sc.EX2_NE for nc in sc.EX2_NC]
    worse = [c for c in cells if g[c + ("simultaneous",)].mse_mean > g[c + ("independent",)].mse_mean]
    sim01 = np.array([g[(0.1, ne, nc, "simultaneous")].mse_mean for ne in sc.EX2_NE for nc in sc.EX2_NC])
    spread = float((sim01.max() - sim01.min()) / sim01.mean())
    ok = not worse and spread <= 0.15
    cells_txt = ", ".join(f"eps={e:g} ({ne},{nc})" for e, ne, nc in worse) or "none"
    assert verdict(7, ok, f"cells with simultaneous MSE above independent: {len(worse)}/24 [{cells_txt}]; "
                          f"eps=0.1 spread {spread:.1%}")


def test_criterion_08_timing_ordering(verdict, example2_grid):
    s, i = example2_grid[0.1, 10, 10, "simultaneous"], example2_grid[0.1, 10, 10, "independent"]
    ok = s.mean_step_ms <= i.mean_step_ms
    assert verdict(8, ok, f"mean step time {s.mean_step_ms:.2f} ms vs {i.mean_step_ms:.2f} ms")


# -- 10 ---------------------------------------------------------------------

def _trial_columns(path):
    _, cols = read_csv(path)
    cols.pop("wall_ms")
    return cols


def test_criterion_10_determinism(verdict, tmp_path):
    S = sc.example1("nominal", N_e=8, N_c=6)
    cases = [MonteCarloCase(m, S.model, S.cfg, S.x0, S.prior, S.w_spec, S.v_spec, 30, m)
             for m in ("simultaneous", "independent")]
    a = run_monte_carlo(cases, 3, seed=9, jobs=1, keep_records=True)
    b = run_monte_carlo(cases, 3, seed=9, jobs=2, keep_records=True)
    same_mc = all(np.array_equal(ra.x, rb.x) and np.array_equal(ra.u, rb.u)
                  for ka, kb in zip(a[1], b[1]) for ra, rb in zip(ka, kb))
    argv = ["example1", "--seeds", "2", "--steps", "20", "--Ne", "6", "--Nc", "5", "--seed", "3"]
    for d, jobs in (("a", "1"), ("b", "2"), ("c", "1")):
        assert main(argv + ["--jobs", jobs, "--out", str(tmp_path / d)]) == 0
    same_cli = True
    for f in sorted((tmp_path / "a").glob("*trial*.csv")):
        ref = _trial_columns(f)
        for d in ("b", "c"):
            other = _trial_columns(tmp_path / d / f.name)
            same_cli &= all(np.array_equal(ref[k], other[k], equal_nan=ref[k].dtype != object) for k in ref)
    rec = a[1][0][0]
    _, cols = read_csv(export_csv(rec, tmp_path / "rt.csv"))
    digits = np.inf
    for c in ("x", "x_hat", "u", "objective", "tail", "dpsi"):
        x, y = getattr(rec, c).ravel(), cols[c]
        fin = np.isfinite(x) & (x != 0)
        if not np.array_equal(np.isnan(x), np.isnan(y)):
            digits = 0
        elif fin.any():
            rel = np.max(np.abs(x[fin] - y[fin]) / np.abs(x[fin]))
            digits = min(digits, np.inf if rel == 0 else -math.log10(rel))
    ok = same_mc and same_cli and digits >= 15
    assert verdict(10, ok, f"jobs-independent {same_mc}, CLI repeats identical {same_cli}, "
                           f"CSV round trip digits {digits}")
