"""Stage costs, arrival cost, cost-to-go and the phi-weighted criterion."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

Array = np.ndarray


def _as_matrix(m, name: str) -> Array:
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if m.shape[0] != m.shape[1]:
        raise ValueError(f"{name} must be square, got {m.shape}")
    if not np.allclose(m, m.T, atol=1e-12 * max(1.0, np.abs(m).max())):
        raise ValueError(f"{name} must be symmetric")
    return 0.5 * (m + m.T)


def _check_psd(m: Array, name: str, definite: bool = False) -> None:
    eig = np.linalg.eigvalsh(m)
    if definite and eig.min() <= 0:
        raise ValueError(f"{name} must be positive definite")
    if eig.min() < -1e-12 * max(1.0, abs(eig.max())):
        raise ValueError(f"{name} must be positive semidefinite")


def psd_sqrt(m: Array) -> Array:
    """Symmetric square root factor ``L`` with ``L.T @ L == m`` for PSD ``m``."""
    eig, vec = np.linalg.eigh(m)
    return (vec * np.sqrt(np.clip(eig, 0.0, None))[..., None, :]) @ np.swapaxes(vec, -1, -2)


def _quad(v: Array, m: Array) -> Array:
    v = np.asarray(v, dtype=float)
    return np.einsum("...i,ij,...j->...", v, m, v)


@dataclass(frozen=True)
class QuadraticWeights:
    """Weights of the quadratic stage, arrival and terminal costs.

    ``Qw_c`` weighs the disturbance reward subtracted inside the control
    window; it defaults to ``Qe``.
    """

    Qe: Array
    Re: Array
    Qc: Array
    Rc: Array
    Sc: Array
    Qw_c: Optional[Array] = None

    def __post_init__(self):
        for name in ("Qe", "Re", "Qc", "Rc", "Sc"):
            m = _as_matrix(getattr(self, name), name)
            _check_psd(m, name, definite=name in ("Qc", "Rc"))
            object.__setattr__(self, name, m)
        qwc = self.Qe if self.Qw_c is None else _as_matrix(self.Qw_c, "Qw_c")
        _check_psd(qwc, "Qw_c")
        object.__setattr__(self, "Qw_c", qwc)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("Qe", "Re", "Qc", "Rc", "Sc", "Qw_c")}

    @classmethod
    def from_dict(cls, d: dict) -> "QuadraticWeights":
        return cls(**{k: np.asarray(v, dtype=float) for k, v in d.items()})


def estimator_stage_cost(w, v, W: QuadraticWeights) -> Array:
    w = np.atleast_1d(np.asarray(w, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if w.shape[-1] != W.Qe.shape[0] or v.shape[-1] != W.Re.shape[0]:
        raise ValueError("dimension mismatch in estimator stage cost")
    return _quad(w, W.Qe) + _quad(v, W.Re)


def controller_stage_cost(x, u, W: QuadraticWeights) -> Array:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if x.shape[-1] != W.Qc.shape[0] or u.shape[-1] != W.Rc.shape[0]:
        raise ValueError("dimension mismatch in controller stage cost")
    return _quad(x, W.Qc) + _quad(u, W.Rc)


def disturbance_reward(w, W: QuadraticWeights) -> Array:
    return _quad(np.atleast_1d(np.asarray(w, dtype=float)), W.Qw_c)


def sigma_lower_bound(x, W: QuadraticWeights) -> Array:
    """``lambda_min(Qc) |x|^2``, a lower bound of the controller stage cost."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return np.linalg.eigvalsh(W.Qc)[0] * np.sum(x * x, axis=-1)


def cost_to_go(x_terminal, W: QuadraticWeights) -> Array:
    return _quad(np.atleast_1d(np.asarray(x_terminal, dtype=float)), W.Sc)


# --- arrival cost -----------------------------------------------------------------

ARRIVAL_STRATEGIES = ("fixed", "surrogate-adaptive")


@dataclass(frozen=True)
class ArrivalCost:
    """Quadratic arrival cost ``(x - mean)' P^{-1} (x - mean)``.

    ``P`` is stored (covariance-like); the weight is its inverse.  Both
    ``mean`` and ``P`` may carry leading batch axes.
    """

    mean: Array
    P: Array
    strategy: str = "surrogate-adaptive"
    forgetting: float = 0.95
    eig_bounds: tuple = (1e-8, 1e8)
    process_cov: Optional[Array] = field(default=None, compare=False)

    def __post_init__(self):
        if self.strategy not in ARRIVAL_STRATEGIES:
            raise ValueError(f"unknown arrival strategy {self.strategy!r}")
        if not 0.0 < self.forgetting <= 1.0:
            raise ValueError("forgetting factor must lie in (0, 1]")
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        P = np.asarray(self.P, dtype=float)
        if P.ndim < 2:
            P = np.atleast_2d(P) * np.eye(mean.shape[-1]) if P.size == 1 else np.diag(P)
        P = 0.5 * (P + np.swapaxes(P, -1, -2))
        if np.linalg.eigvalsh(P).min() <= 0:
            raise ValueError("arrival-cost matrix P must be positive definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "P", P)

    @property
    def weight(self) -> Array:
        return np.linalg.inv(self.P)

    def weight_eigenvalue_bounds(self):
        """``(lambda_min, lambda_max)`` of the weight ``P^{-1}``."""
        eig = np.linalg.eigvalsh(self.P)
        return 1.0 / eig[..., -1], 1.0 / eig[..., 0]


def arrival_cost(x_est, ac: ArrivalCost) -> Array:
    chi = np.atleast_1d(np.asarray(x_est, dtype=float)) - ac.mean
    return np.einsum("...i,...ij,...j->...", chi, ac.weight, chi)


def update_arrival(ac: ArrivalCost, new_prior_mean, A=None,
                   W: Optional[QuadraticWeights] = None) -> ArrivalCost:
    """Shift the prior mean and, for the adaptive surrogate, propagate ``P``.

    The surrogate propagates ``P+ = lambda (A P A' + C)`` with
    ``C = Qe^{-1}`` (or ``ac.process_cov``) and clamps the eigenvalues of
    ``P+`` into ``ac.eig_bounds``.
    """
    mean = np.asarray(new_prior_mean, dtype=float)
    if ac.strategy == "fixed":
        return replace(ac, mean=mean)
    if A is None:
        raise ValueError("surrogate-adaptive update needs the state Jacobian A")
    A = np.asarray(A, dtype=float)
    if ac.process_cov is not None:
        C = np.asarray(ac.process_cov, dtype=float)
    elif W is not None:
        C = np.linalg.pinv(W.Qe)
    else:
        raise ValueError("need weights or an explicit process covariance")
    P_new = ac.forgetting * (A @ ac.P @ np.swapaxes(A, -1, -2) + C)
    P_new = clamp_eigenvalues(P_new, *ac.eig_bounds)
    if not np.all(np.isfinite(P_new)) or np.linalg.eigvalsh(P_new).min() <= 0:
        raise RuntimeError("arrival-cost update produced a non-positive-definite matrix")
    return replace(ac, mean=mean, P=P_new)


def clamp_eigenvalues(M: Array, lo: float, hi: float) -> Array:
    M = 0.5 * (M + np.swapaxes(M, -1, -2))
    eig, vec = np.linalg.eigh(M)
    eig = np.clip(eig, lo, hi)
    return (vec * eig[..., None, :]) @ np.swapaxes(vec, -1, -2)


# --- K-infinity bound functions ---------------------------------------------------

@dataclass(frozen=True)
class PowerLaw:
    """``gamma(s) = c * s**q`` with ``c > 0`` and ``q >= 1``."""

    c: float
    q: float = 2.0

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("power-law coefficient must be positive")
        if self.q < 1:
            raise ValueError("power-law exponent must be >= 1")

    def __call__(self, s):
        return self.c * np.power(np.asarray(s, dtype=float), self.q)

    def inverse(self, r):
        return np.power(np.asarray(r, dtype=float) / self.c, 1.0 / self.q)


@dataclass(frozen=True)
class KBoundFunctions:
    gamma_w_lo: PowerLaw
    gamma_w_hi: PowerLaw
    gamma_v_lo: PowerLaw
    gamma_v_hi: PowerLaw
    gamma_p_hi: PowerLaw
    gamma1: PowerLaw = PowerLaw(1.0, 1.0)
    gamma2: PowerLaw = PowerLaw(1.0, 1.0)

    @classmethod
    def quadratic(cls, W: QuadraticWeights, arrival_weight_max: float,
                  gamma1: PowerLaw = PowerLaw(1.0, 1.0),
                  gamma2: PowerLaw = PowerLaw(1.0, 1.0)) -> "KBoundFunctions":
        """Bounds implied by quadratic costs: ``lambda_min/max * s^2``."""
        qe = np.linalg.eigvalsh(W.Qe)
        re = np.linalg.eigvalsh(W.Re)
        return cls(PowerLaw(qe[0]), PowerLaw(qe[-1]), PowerLaw(re[0]), PowerLaw(re[-1]),
                   PowerLaw(float(arrival_weight_max)), gamma1, gamma2)


# --- phi-weighted criterion -------------------------------------------------------

def criterion_components(dv, y, u_applied, model, W: QuadraticWeights,
                         ac: ArrivalCost) -> tuple:
    """Estimation and control parts ``(Psi_E, Psi_C)`` of one window.

    A plain loop over the window, kept deliberately simple; the optimized
    residual assembly in :mod:`simul_ecmpc.ecmpc` is tested against it.

    Parameters
    ----------
    dv : DecisionVector
        Unbatched decision vector (``x_init (n_x,)``, ``w_back (N, n_w)``,
        ``u_fwd (N_c, n_u)``, optional ``w_fwd (N_c, n_w)``).
    y : array, shape (N + 1, n_y)
        Measurements of the backward window, oldest first.
    u_applied : array, shape (N, n_u)
        Inputs applied inside the backward window.
    """
    y = np.asarray(y, dtype=float).reshape(-1, model.n_y)
    u_applied = np.asarray(u_applied, dtype=float).reshape(-1, model.n_u)
    w_back = np.asarray(dv.w_back, dtype=float).reshape(-1, model.n_w)
    n_back = w_back.shape[0]
    if y.shape[0] != n_back + 1 or u_applied.shape[0] != n_back:
        raise ValueError("window data does not match the backward horizon")
    s = model.disturbance_scale

    x = np.asarray(dv.x_init, dtype=float)
    psi_e = float(arrival_cost(x, ac))
    for j in range(n_back):
        v = y[j] - model.output(x)
        psi_e += float(estimator_stage_cost(w_back[j], v, W))
        x = model.step(x, u_applied[j], w_back[j], check=False)
    v = y[n_back] - model.output(x)
    w_fwd = None if dv.w_fwd is None else np.asarray(dv.w_fwd, dtype=float).reshape(-1, model.n_w)
    w_now = np.zeros(model.n_w) if w_fwd is None else w_fwd[0]
    psi_e += float(estimator_stage_cost(w_now, v, W))

    psi_c = 0.0
    u_fwd = np.asarray(dv.u_fwd, dtype=float).reshape(-1, model.n_u)
    for j in range(u_fwd.shape[0]):
        wj = np.zeros(model.n_w) if w_fwd is None else w_fwd[j]
        psi_c += float(controller_stage_cost(x, u_fwd[j], W) - disturbance_reward(wj, W))
        x = model.f(x, u_fwd[j]) + s * wj
    psi_c += float(cost_to_go(x, W))
    return psi_e, psi_c


def combined_criterion(dv, y, u_applied, model, W: QuadraticWeights, ac: ArrivalCost,
                       phi: float) -> float:
    """``phi * Psi_E + (1 - phi) * Psi_C`` for one window (no constraint penalties)."""
    if not 0.0 <= phi <= 1.0:
        raise ValueError("phi must lie in [0, 1]")
    psi_e, psi_c = criterion_components(dv, y, u_applied, model, W, ac)
    return phi * psi_e + (1.0 - phi) * psi_c
