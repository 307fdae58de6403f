"""Horizon lengths, stability-certificate quantities and error bounds."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .costs import KBoundFunctions, PowerLaw, QuadraticWeights, controller_stage_cost, cost_to_go
from .dynamics import BoxSet, NoiseSpec, SystemModel, sample_noise, trial_generators
from .nlp import NlpProblem, SolveOptions, solve

Array = np.ndarray


class UncontrollableBudget(ValueError):
    """The pseudo-controllability measure is not below one."""


class ControllabilityGainError(ValueError):
    """Non-positive equivalent controller gain."""


def _ceil(v: float) -> int:
    # guard against values like 16.000000000000004 from rounding
    return int(math.ceil(v - 1e-9 * max(1.0, abs(v))))


@dataclass(frozen=True)
class EstimatorBoundConstants:
    """Constants entering the generic estimation-error bound.

    ``a_exp`` is the exponent ``a``; ``lam_lo``/``lam_hi`` bound the
    eigenvalues of the arrival weight; ``c_beta_bar`` enters the minimal
    backward horizon.
    """

    zeta: float = 1.0
    rho: float = 1.0
    c_beta: float = 1.0
    p: float = 2.0
    a_exp: float = 1.0
    c1: float = 1.0
    c2: float = 1.0
    alpha1: float = 1.0
    alpha2: float = 1.0
    eta: float = 1.0
    mu: float = 0.05
    e_max: float = 1.0
    lam_lo: float = 1.0
    lam_hi: float = 1.0
    c_beta_bar: float = 1.0

    def __post_init__(self):
        for name in ("zeta", "rho", "c_beta", "p", "a_exp", "c1", "c2", "alpha1", "alpha2", "eta",
                     "e_max", "lam_lo", "lam_hi", "c_beta_bar"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.mu < 0:
            raise ValueError("mu must be non-negative")
        if self.lam_lo > self.lam_hi:
            raise ValueError("lam_lo must not exceed lam_hi")

    @property
    def theta(self) -> float:
        return theta(self.mu)


def theta(mu: float) -> float:
    """Contraction factor ``(2 + mu) / (2 (1 + mu))``."""
    if mu < 0:
        raise ValueError("mu must be non-negative")
    return (2.0 + mu) / (2.0 * (1.0 + mu))


@dataclass(frozen=True)
class ControllabilityBudget:
    """``delta`` (relaxation), ``L`` (stage-cost growth bound) and ``Delta`` (pseudo-controllability)."""

    delta: float = 1.0
    L: float = 2.0
    Delta: float = 0.1

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if not self.L > 1:
            raise ValueError("L must exceed 1")
        if self.Delta < 0:
            raise ValueError("Delta must be non-negative")


@dataclass
class HorizonCertificate:
    N_e: Optional[int] = None
    N_c: Optional[int] = None
    omega: list = field(default_factory=list)
    pi_E: Optional[float] = None
    Delta: Optional[float] = None
    inputs: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"N_e": self.N_e, "N_c": self.N_c, "omega": self.omega, "pi_E": self.pi_E,
                "Delta": self.Delta, "inputs": self.inputs}


# --- closed-form horizons ----------------------------------------------------------

def min_backward_horizon_general(c: EstimatorBoundConstants) -> int:
    """``ceil((2^zeta e_max^(zeta-1) c_beta_bar)^(1/eta))``, at least 1."""
    v = (2.0 ** c.zeta * c.e_max ** (c.zeta - 1.0) * c.c_beta_bar) ** (1.0 / c.eta)
    return max(1, _ceil(v))


def _ex1_fraction(P_inv, Qe, Re, a, g, K):
    return (math.sqrt(P_inv * Re) + math.sqrt(P_inv * Qe) * a * g) / (math.sqrt(Qe * Re) * K)


def min_backward_horizon_example1(P_inv: float, Qe: float, Re: float, a: float, g: float,
                                  K: float) -> int:
    """Minimal backward horizon of the scalar cubic example."""
    if not K > 0:
        raise ControllabilityGainError("equivalent controller gain must be positive")
    for name, v in (("P_inv", P_inv), ("Qe", Qe), ("Re", Re), ("a", a)):
        if v < 0:
            raise ValueError(f"{name} must be non-negative")
    if g < 0:
        raise ValueError("g must be non-negative")
    return max(1, _ceil(4.0 * (2.0 + _ex1_fraction(P_inv, Qe, Re, a, g, K)) ** 2))


def min_forward_horizon(b: ControllabilityBudget) -> int:
    """Minimal control horizon from ``delta``, ``L`` and ``Delta``.

    Raises
    ------
    UncontrollableBudget
        If ``Delta >= 1``.
    """
    if b.Delta >= 1.0:
        raise UncontrollableBudget(f"pseudo-controllability measure {b.Delta} is not below 1")
    arg = b.delta * (b.L - 1.0) / (1.0 - b.Delta)
    if arg <= 1.0:
        return 1
    return max(1, _ceil(1.0 + math.log(arg) / math.log(b.L / (b.L - 1.0))))


# --- certificate quantities ----------------------------------------------------------

def pseudo_controllability(model: Optional[SystemModel], X: BoxSet, U: BoxSet, W: BoxSet,
                           weights: QuadraticWeights, resolution: float = 1e-2,
                           details: bool = False):
    """Grid estimate of ``max_{x,w} min_u l_wc(w) / l_c(x, u)``.

    The numerator does not depend on ``u`` and the denominator does not
    depend on ``w``, so the grid search separates into a maximum of
    ``l_wc`` over ``W`` and, per ``x``, a maximum of ``l_c`` over ``U``.
    Grid points where ``l_c`` vanishes for every ``u`` are excluded
    (``details=True`` also returns the maximizer and the excluded points).
    """
    for box, name in ((X, "X"), (U, "U"), (W, "W")):
        if not box.is_finite:
            raise ValueError(f"box {name} must be finite")
    if not resolution > 0:
        raise ValueError("resolution must be positive")

    def grid(box):
        axes = [np.linspace(lo, hi, max(2, int(round((hi - lo) / resolution)) + 1))
                for lo, hi in zip(box.lower, box.upper)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    xs, us, ws = grid(X), grid(U), grid(W)
    num = float(np.max(np.einsum("ni,ij,nj->n", ws, weights.Qw_c, ws)))
    den = np.empty(xs.shape[0])
    for start in range(0, xs.shape[0], 256):
        xb = xs[start:start + 256]
        c = controller_stage_cost(xb[:, None, :], np.broadcast_to(us, (xb.shape[0],) + us.shape), weights)
        den[start:start + 256] = c.max(axis=1)
    valid = den > 1e-300
    excluded = xs[~valid]
    if not valid.any():
        raise ValueError("controller stage cost vanishes on the whole grid")
    ratio = np.where(valid, num / np.where(valid, den, 1.0), -np.inf)
    i = int(np.argmax(ratio))
    value = float(ratio[i]) if num > 0 else 0.0
    if details:
        return value, xs[i], excluded
    return value


def pi_E_bar(chi_bound: float, w_sup: float, v_sup: float, K: KBoundFunctions, N_e: int) -> float:
    """Worst-case estimation-side perturbation of the cost decrease."""
    if N_e < 1:
        raise ValueError("N_e must be at least 1")
    inner = K.gamma_p_hi(abs(chi_bound)) / N_e + K.gamma_w_hi(abs(w_sup)) + K.gamma_v_hi(abs(v_sup))
    return float(K.gamma_w_hi(K.gamma_w_lo.inverse(inner)))


def estimation_error_bound(c: EstimatorBoundConstants, K: KBoundFunctions, x0_err: float,
                           w_sup: float, v_sup: float, k: int, N_e: int) -> float:
    """Generic bound ``Phi(|x0 - xbar0|, k) + pi_w(|w|) + pi_v(|v|)``."""
    if N_e < 1 or k < 0:
        raise ValueError("need N_e >= 1 and k >= 0")
    i = k // N_e
    th = c.theta
    Ne_min = min_backward_horizon_general(c)
    lo, hi = c.lam_lo, c.lam_hi
    phi_bar = (th ** i * abs(x0_err) ** c.zeta * (Ne_min / N_e)
               * ((hi / lo) ** c.rho * (c.c_beta * 18.0 ** c.p
                                         + lo ** c.alpha1 * (c.c1 * 3.0 ** c.alpha1 + c.c2 * 3.0 ** c.alpha2))
                  + c.c_beta * 2.0 ** c.p))
    gw = K.gamma_w_hi(abs(w_sup))
    gv = K.gamma_v_hi(abs(v_sup))
    pi_w = 2.0 * (1.0 + c.mu) * (c.c_beta * 18.0 ** c.p / lo * gw ** (c.p / c.a_exp)
                                 + c.c2 * 3.0 ** c.alpha2 * gw ** c.alpha2
                                 + K.gamma1(6.0 * abs(w_sup))
                                 + K.gamma1(6.0 * K.gamma_w_lo.inverse(3.0 * gw)))
    pi_v = 2.0 * (1.0 + c.mu) * (c.c_beta * 18.0 ** c.p / lo * gv ** (c.p / c.a_exp)
                                 + c.c1 * 3.0 ** c.alpha1 * gv ** c.alpha1
                                 + K.gamma2(6.0 * abs(v_sup))
                                 + K.gamma2(6.0 * K.gamma_v_lo.inverse(3.0 * gv)))
    return float(phi_bar + pi_w + pi_v)


def estimation_error_bound_example1(P_inv: float, Qe: float, Re: float, a: float, g: float,
                                    K_gain: float, mu: float, x0_err: float, w_sup: float,
                                    v_sup: float, k: int, N_e: int) -> float:
    """Estimation-error bound of the scalar cubic example with quadratic costs."""
    if not K_gain > 0:
        raise ControllabilityGainError("equivalent controller gain must be positive")
    if N_e < 1 or k < 0:
        raise ValueError("need N_e >= 1 and k >= 0")
    if not P_inv > 0:
        raise ValueError("P_inv must be positive")
    i = k // N_e
    th = theta(mu)
    K = K_gain
    Ne_min = min_backward_horizon_example1(P_inv, Qe, Re, a, g, K)
    sq_qr = math.sqrt(Qe * Re)
    sq_pq = math.sqrt(P_inv * Qe)
    sq_pr = math.sqrt(P_inv * Re)
    t0 = abs(x0_err) * (th * Ne_min / (2.0 * N_e)) ** i * (2.0 + _ex1_fraction(P_inv, Qe, Re, a, g, K))
    t1 = 2.0 * (1.0 + mu) * abs(w_sup) * (2.0 / K + (sq_qr * K + sq_pq * a * g) / (sq_pq * K))
    t2 = 2.0 * (1.0 + mu) * abs(v_sup) * (2.0 * g / K + (sq_qr * K + sq_pr) / (sq_pq * K))
    return float(t0 + t1 + t2)


def iioss_bound_example1(dx0: float, K_gain: float, a: float, g: float, w_diff_sup: float,
                         y_diff_sup: float, t) -> Array:
    """Incremental bound ``|dx0| e^(-K t) + |dw|/K + a g |dy|/K`` (vectorized in ``t``)."""
    if not K_gain > 0:
        raise ControllabilityGainError("equivalent controller gain must be positive")
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("t must be non-negative")
    out = abs(dx0) * np.exp(-K_gain * t) + abs(w_diff_sup) / K_gain + a * g * abs(y_diff_sup) / K_gain
    return out if out.ndim else float(out)


def equivalent_gain(u: Array, x_hat: Array, guard: float = 1e-6) -> Array:
    """Per-step gain ``-u / x_hat``; the previous value is reused when ``|x_hat| < guard``."""
    u = np.asarray(u, dtype=float).ravel()
    x = np.asarray(x_hat, dtype=float).ravel()
    K = np.full(u.shape, np.nan)
    last = np.nan
    for k in range(u.size):
        if abs(x[k]) >= guard and np.isfinite(x[k]) and np.isfinite(u[k]):
            last = -u[k] / x[k]
        K[k] = last
    return K


# --- sampled and simulated quantities ------------------------------------------------

def omega_empirical(model: SystemModel, cfg, N_c_list: Sequence[int],
                    budget: ControllabilityBudget = ControllabilityBudget(), mode: str = "simultaneous",
                    n_points: int = 33, prior=None) -> list:
    """``omega(N_c)`` from one solve per initial condition on a grid of ``X``.

    For each ``N_c`` the controller is started from ``n_points`` initial
    states spread over ``X`` (boundary included) with noise-free
    measurements; ``omega = Upsilon(Xi) / l_c(x_hat, u_hat) + Delta / delta``
    is maximized over the grid.  The stage-cost growth ratio
    ``Psi_C / sigma(x_hat)`` is recorded alongside (rounded up to one
    decimal as ``L``).
    """
    from .ecmpc import IndependentController, SimultaneousController

    if not len(N_c_list):
        raise ValueError("N_c_list must not be empty")
    if not cfg.X.is_finite:
        raise ValueError("X must be finite for the initial-condition sweep")
    lo, hi = cfg.X.lower, cfg.X.upper
    s = np.linspace(0.0, 1.0, n_points)[:, None]
    x0 = lo + s * (hi - lo)
    pri = x0 if prior is None else np.broadcast_to(np.asarray(prior, dtype=float), x0.shape)
    lam = float(np.linalg.eigvalsh(cfg.weights.Qc)[0])
    table = []
    for Nc in N_c_list:
        c = cfg.with_(N_c=int(Nc))
        ctrl_cls = SimultaneousController if mode == "simultaneous" else IndependentController
        ctrl = ctrl_cls(model, c, pri, batch=n_points)
        out = ctrl.step(model.output(x0))
        N = 0
        xs = out.states[:, N:]
        u = out.dv.u_fwd
        psi_c = controller_stage_cost(xs[:, :-1], u, c.weights).sum(axis=1) + cost_to_go(xs[:, -1], c.weights)
        ok = out.ell_c > 1e-12
        with np.errstate(divide="ignore", invalid="ignore"):
            om = np.where(ok, out.upsilon / out.ell_c + budget.Delta / budget.delta, -np.inf)
            sig = lam * np.sum(out.x_hat ** 2, axis=1)
            Lr = np.where(sig > 1e-12, psi_c / sig, np.nan)
        i = int(np.argmax(om))
        Lmax = float(np.nanmax(Lr)) if np.isfinite(Lr).any() else float("nan")
        table.append({"N_c": int(Nc), "omega": float(om[i]), "argmax_x0": x0[i].tolist(),
                      "L": math.ceil(Lmax * 10.0) / 10.0 if np.isfinite(Lmax) else None,
                      "skipped": x0[~ok].tolist(), "converged": int(out.converged.sum())})
    return table


def robust_controllable_membership(model: SystemModel, Omega: BoxSet, U: BoxSet, T: BoxSet,
                                   N_c: int, x0, n_samples: int, w_spec: Optional[NoiseSpec] = None,
                                   seed: int = 0, tol: float = 1e-8,
                                   opts: Optional[SolveOptions] = None) -> bool:
    """Sampled check that ``x0`` can be steered into ``T`` within ``N_c`` steps inside ``Omega``.

    For each sampled disturbance sequence, an input sequence in ``U`` is
    searched that keeps ``x_1..x_Nc`` in ``Omega`` and ends in ``T``
    (least squares on the violations).  True iff every sample succeeds.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if not np.all(Omega.contains(x0)):
        return False
    if N_c < 1 or n_samples < 1:
        raise ValueError("need N_c >= 1 and n_samples >= 1")
    nx, nu = model.n_x, model.n_u
    Wd = np.zeros((n_samples, N_c, model.n_w))
    if w_spec is not None:
        for i in range(n_samples):
            Wd[i] = sample_noise(w_spec, N_c, trial_generators(seed, i)[0])
    s = model.disturbance_scale
    n = N_c * nu

    def blocks(z, rows, jac):
        b = z.shape[0]
        u = z.reshape(b, N_c, nu)
        x = np.broadcast_to(x0, (b, nx)).copy()
        S = np.zeros((b, nx, n))
        rs, Js = [], []
        with np.errstate(over="ignore", invalid="ignore"):
            for j in range(N_c):
                xn, A, Bm = model.step_jacobian(x, u[:, j])
                if jac:
                    S = A @ S
                    S[:, :, j * nu:(j + 1) * nu] += Bm
                x = xn + s * Wd[rows, j]
                d = x - np.clip(x, Omega.lower, Omega.upper)
                rs.append(d)
                if jac:
                    Js.append((d != 0)[..., None] * S)
            d = x - np.clip(x, T.lower, T.upper)
            rs.append(d)
            if jac:
                Js.append((d != 0)[..., None] * S)
        r = np.concatenate(rs, axis=1)
        return (r, np.concatenate(Js, axis=1)) if jac else r

    lo = np.tile(U.lower, (n_samples, N_c))
    hi = np.tile(U.upper, (n_samples, N_c))
    p = NlpProblem(jacobian=lambda z, r: blocks(z, r, True), residuals=lambda z, r: blocks(z, r, False),
                   lower=lo, upper=hi)
    # start from a saturated push towards the centre of T
    centre = 0.5 * (np.where(np.isfinite(T.lower), T.lower, 0) + np.where(np.isfinite(T.upper), T.upper, 0))
    z0 = np.zeros((n_samples, n))
    if nu == nx:
        z0[:] = np.tile(np.sign(centre - x0), N_c)
    res = solve(p, opts or SolveOptions(max_iterations=200, raise_on_failure=False), z0)
    r = blocks(res.z, np.arange(n_samples), False)
    return bool(np.all(np.max(np.abs(r), axis=1) <= tol))


def quadratic_kbounds(weights: QuadraticWeights, arrival_weight_max: float) -> KBoundFunctions:
    return KBoundFunctions.quadratic(weights, arrival_weight_max)


__all__ = [
    "ControllabilityBudget", "ControllabilityGainError", "EstimatorBoundConstants",
    "HorizonCertificate", "PowerLaw", "UncontrollableBudget", "equivalent_gain",
    "estimation_error_bound", "estimation_error_bound_example1", "iioss_bound_example1",
    "min_backward_horizon_example1", "min_backward_horizon_general", "min_forward_horizon",
    "omega_empirical", "pi_E_bar", "pseudo_controllability", "quadratic_kbounds",
    "robust_controllable_membership", "theta",
]
