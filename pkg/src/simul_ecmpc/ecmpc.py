"""Receding-horizon problems and the simultaneous / independent controllers.

At time ``k`` the window covers the past ``N = min(k, N_e)`` samples and the
next ``N_c`` inputs.  The unknowns are the state at the start of the
backward window, the backward disturbances, the forward inputs and,
optionally, forward disturbances.  Output residuals are eliminated through
``v = y - h(x)`` and the whole criterion is written as a stacked least
squares residual, so every solve goes through :func:`simul_ecmpc.nlp.solve`.

All classes here work on a batch of independent trials that share the time
index (Monte Carlo runs); ``batch=1`` is the usual single-run case.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .costs import (ArrivalCost, QuadraticWeights, clamp_eigenvalues, controller_stage_cost,
                    cost_to_go, psd_sqrt)
from .dynamics import BoxSet, SystemModel
from .nlp import NlpProblem, SolveOptions, SolveResult, solve

Array = np.ndarray

FORWARD_MODES = ("omit", "alternating-minmax")


@dataclass(frozen=True)
class EcmpcConfig:
    """Horizons, weights, constraint boxes and solver settings.

    ``U.rate`` (if set) bounds the per-step input increment; the forward
    inputs are then optimized as increments.
    """

    N_e: int
    N_c: int
    phi: float
    weights: QuadraticWeights
    X: BoxSet
    U: BoxSet
    W: BoxSet
    V: BoxSet
    X_f: Optional[BoxSet] = None
    forward_disturbances: str = "omit"
    arrival_P0: Array = 1.0
    arrival_strategy: str = "surrogate-adaptive"
    forgetting: float = 0.95
    eig_bounds: tuple = (1e-8, 1e8)
    enforce_V: bool = True
    penalty_weight: float = 1e6
    solver: SolveOptions = field(default_factory=lambda: SolveOptions(raise_on_failure=False))

    def __post_init__(self):
        if int(self.N_e) < 1 or int(self.N_c) < 1:
            raise ValueError("N_e and N_c must be at least 1")
        if not 0.0 <= self.phi <= 1.0:
            raise ValueError("phi must lie in [0, 1]")
        if self.forward_disturbances not in FORWARD_MODES:
            raise ValueError(f"forward_disturbances must be one of {FORWARD_MODES}")
        if self.X_f is not None and not self.X_f.subset_of(self.X):
            raise ValueError("terminal set X_f must be contained in X")
        if not self.penalty_weight > 0:
            raise ValueError("penalty_weight must be positive")
        object.__setattr__(self, "N_e", int(self.N_e))
        object.__setattr__(self, "N_c", int(self.N_c))

    @property
    def minmax(self) -> bool:
        return self.forward_disturbances == "alternating-minmax"

    def with_(self, **kw) -> "EcmpcConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return {
            "N_e": self.N_e, "N_c": self.N_c, "phi": self.phi,
            "weights": self.weights.to_dict(),
            "X": self.X.to_dict(), "U": self.U.to_dict(), "W": self.W.to_dict(), "V": self.V.to_dict(),
            "X_f": None if self.X_f is None else self.X_f.to_dict(),
            "forward_disturbances": self.forward_disturbances,
            "arrival_P0": np.asarray(self.arrival_P0, dtype=float).tolist(),
            "arrival_strategy": self.arrival_strategy, "forgetting": self.forgetting,
            "eig_bounds": list(self.eig_bounds), "enforce_V": self.enforce_V,
            "penalty_weight": self.penalty_weight, "solver": self.solver.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EcmpcConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d["weights"] = QuadraticWeights.from_dict(d["weights"])
        for k in ("X", "U", "W", "V"):
            d[k] = BoxSet.from_dict(d[k])
        if d.get("X_f") is not None:
            d["X_f"] = BoxSet.from_dict(d["X_f"])
        if "solver" in d:
            d["solver"] = SolveOptions(**d["solver"])
        if "eig_bounds" in d:
            d["eig_bounds"] = tuple(d["eig_bounds"])
        if "arrival_P0" in d:
            d["arrival_P0"] = np.asarray(d["arrival_P0"], dtype=float)
        return cls(**d)


@dataclass
class DecisionVector:
    """Window unknowns; every field may carry a leading batch axis."""

    x_init: Array
    w_back: Array
    u_fwd: Array
    w_fwd: Optional[Array] = None

    def row(self, b: int) -> "DecisionVector":
        return DecisionVector(self.x_init[b], self.w_back[b], self.u_fwd[b],
                              None if self.w_fwd is None else self.w_fwd[b])

    @property
    def n_variables(self) -> int:
        """Number of scalar unknowns of one trial."""
        parts = [self.x_init, self.w_back, self.u_fwd] + ([] if self.w_fwd is None else [self.w_fwd])
        lead = self.x_init.ndim - 1
        return int(sum(np.prod(a.shape[lead:]) for a in parts))


@dataclass
class WindowBuffer:
    """Data of one window: ``y (B, N+1, n_y)``, applied inputs ``u (B, N, n_u)``.

    ``u_prev`` is the input applied at ``k - 1`` (used by rate limits) and
    ``k`` the current time index.
    """

    y: Array
    u: Array
    arrival: ArrivalCost
    k: int
    u_prev: Optional[Array] = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.u = np.asarray(self.u, dtype=float)
        if self.y.ndim == 2:
            self.y = self.y[None]
        if self.u.ndim == 2:
            self.u = self.u[None]
        elif self.u.ndim < 2:
            self.u = self.u.reshape(self.y.shape[0], 0, 1)
        if self.y.shape[1] != self.u.shape[1] + 1:
            raise ValueError("window needs one more measurement than applied inputs")
        if not np.all(np.isfinite(self.y)):
            raise ValueError("measurements must be finite")

    @property
    def N(self) -> int:
        return self.u.shape[1]

    @property
    def batch(self) -> int:
        return self.y.shape[0]


@dataclass(frozen=True)
class Layout:
    """Position of each unknown inside the flat decision vector."""

    nx: int
    nu: int
    nw: int
    N: int
    Nc: int
    minmax: bool = False

    @property
    def o_w(self) -> int:
        return self.nx

    @property
    def o_u(self) -> int:
        return self.nx + self.N * self.nw

    @property
    def o_wf(self) -> int:
        return self.o_u + self.Nc * self.nu

    @property
    def n(self) -> int:
        return self.o_wf + (self.Nc * self.nw if self.minmax else 0)

    def split(self, z: Array):
        B = z.shape[0]
        x0 = z[:, :self.nx]
        w = z[:, self.o_w:self.o_u].reshape(B, self.N, self.nw)
        u = z[:, self.o_u:self.o_wf].reshape(B, self.Nc, self.nu)
        wf = z[:, self.o_wf:self.n].reshape(B, self.Nc, self.nw) if self.minmax else None
        return x0, w, u, wf

    def join(self, x0, w, u, wf=None) -> Array:
        B = x0.shape[0]
        parts = [x0, w.reshape(B, -1), u.reshape(B, -1)]
        if self.minmax:
            parts.append(wf.reshape(B, -1))
        return np.concatenate(parts, axis=1)


def _penalty(v: Array, box: Optional[BoxSet]):
    """Violation ``v - clip(v)`` and the mask of violated coordinates."""
    c = np.minimum(np.maximum(v, box.lower), box.upper)
    d = v - c
    return d, d != 0.0


class WindowProblem:
    """Stacked least-squares form of one receding-horizon problem.

    Parameters
    ----------
    model : SystemModel
        Discrete prediction model.
    cfg : EcmpcConfig
    buf : WindowBuffer
    n_control : int, optional
        Forward horizon (defaults to ``cfg.N_c``; 0 gives a pure estimator).
    phi : float, optional
        Overrides ``cfg.phi``.
    x_fixed : array (B, n_x), optional
        Pins the initial state (pure controller on a given estimate; the
        backward window must then be empty).
    """

    def __init__(self, model: SystemModel, cfg: EcmpcConfig, buf: WindowBuffer,
                 n_control: Optional[int] = None, phi: Optional[float] = None,
                 x_fixed: Optional[Array] = None):
        self.model = model
        self.cfg = cfg
        self.buf = buf
        self.phi = cfg.phi if phi is None else float(phi)
        Nc = cfg.N_c if n_control is None else int(n_control)
        if x_fixed is not None and buf.N != 0:
            raise ValueError("a pinned initial state needs an empty backward window")
        self.layout = Layout(model.n_x, model.n_u, model.n_w, buf.N, Nc, cfg.minmax and Nc > 0)
        self.B = buf.batch
        self.rate = cfg.U.rate is not None and Nc > 0
        self.u_prev = (np.zeros((self.B, model.n_u)) if buf.u_prev is None
                       else np.broadcast_to(np.asarray(buf.u_prev, dtype=float), (self.B, model.n_u)))
        W = cfg.weights
        self.se = np.sqrt(self.phi)
        self.sc = np.sqrt(1.0 - self.phi)
        self.Lq = psd_sqrt(W.Qe)
        self.Lr = psd_sqrt(W.Re)
        self.Lqc = psd_sqrt(W.Qc)
        self.Lrc = psd_sqrt(W.Rc)
        self.Lsc = psd_sqrt(W.Sc)
        ac = buf.arrival
        mean = np.broadcast_to(ac.mean, (self.B, model.n_x))
        P = np.broadcast_to(ac.P, (self.B, model.n_x, model.n_x))
        self.mean = np.array(mean)
        self.Lp = psd_sqrt(np.linalg.inv(P))
        self.rho = np.sqrt(cfg.penalty_weight)
        self.use_est = self.phi > 0.0 and x_fixed is None
        self.use_ctl = self.phi < 1.0 and Nc > 0
        self.pen_X = np.isfinite(np.concatenate([cfg.X.lower, cfg.X.upper])).any()
        self.pen_V = cfg.enforce_V and self.use_est and np.isfinite(
            np.concatenate([cfg.V.lower, cfg.V.upper])).any()
        self.pen_U = self.rate and np.isfinite(np.concatenate([cfg.U.lower, cfg.U.upper])).any()
        self.x_fixed = x_fixed
        self._build_bounds()
        self._build_constant_blocks()
        self.nlp = NlpProblem(jacobian=self._jacobian, residuals=self._residuals,
                              lower=self.lower, upper=self.upper,
                              concave=self._concave if self.layout.minmax else None,
                              ascent_mask=self._ascent_mask() if self.layout.minmax else None)

    # -- structure ---------------------------------------------------------------
    def _build_bounds(self):
        L, cfg = self.layout, self.cfg
        lo = np.empty(L.n)
        hi = np.empty(L.n)
        lo[:L.nx], hi[:L.nx] = cfg.X.lower, cfg.X.upper
        lo[L.o_w:L.o_u] = np.tile(cfg.W.lower, L.N)
        hi[L.o_w:L.o_u] = np.tile(cfg.W.upper, L.N)
        if self.rate:
            r = np.broadcast_to(np.asarray(cfg.U.rate, dtype=float), (L.nu,))
            lo[L.o_u:L.o_wf], hi[L.o_u:L.o_wf] = np.tile(-r, L.Nc), np.tile(r, L.Nc)
        else:
            lo[L.o_u:L.o_wf], hi[L.o_u:L.o_wf] = np.tile(cfg.U.lower, L.Nc), np.tile(cfg.U.upper, L.Nc)
        if L.minmax:
            lo[L.o_wf:], hi[L.o_wf:] = np.tile(cfg.W.lower, L.Nc), np.tile(cfg.W.upper, L.Nc)
        self.lower = np.tile(lo, (self.B, 1))
        self.upper = np.tile(hi, (self.B, 1))
        if self.x_fixed is not None:
            xf = np.broadcast_to(np.asarray(self.x_fixed, dtype=float), (self.B, L.nx))
            self.lower[:, :L.nx] = xf
            self.upper[:, :L.nx] = xf

    def _ascent_mask(self) -> Array:
        m = np.zeros(self.layout.n, dtype=bool)
        m[self.layout.o_wf:] = True
        return m

    def _build_constant_blocks(self):
        L = self.layout
        n = L.n
        # d u_j / d z  (Nc, nu, n)
        dU = np.zeros((L.Nc, L.nu, n))
        for j in range(L.Nc):
            for i in range(j + 1 if self.rate else 1):
                jj = i if self.rate else j
                dU[j, :, L.o_u + jj * L.nu:L.o_u + (jj + 1) * L.nu] = np.eye(L.nu)
        self.dU = dU
        blocks = []
        if self.use_est:
            Jw = np.zeros((L.N, L.nw, n))
            for j in range(L.N):
                Jw[j, :, L.o_w + j * L.nw:L.o_w + (j + 1) * L.nw] = self.se * self.Lq
            blocks.append(Jw.reshape(-1, n))
            if L.minmax:
                Jf = np.zeros((L.nw, n))
                Jf[:, L.o_wf:L.o_wf + L.nw] = self.se * self.Lq
                blocks.append(Jf)
        if self.use_ctl:
            blocks.append(self.sc * np.einsum("ab,jbn->jan", self.Lrc, dU).reshape(-1, n))
        self.const_J = np.concatenate(blocks, axis=0) if blocks else np.zeros((0, n))

    # -- evaluation ----------------------------------------------------------------
    def _inputs_rows(self, u_var: Array, rows: Array) -> Array:
        if self.rate:
            return self.u_prev[rows][:, None, :] + np.cumsum(u_var, axis=1)
        return u_var

    def rollout(self, z: Array, rows: Optional[Array] = None, jac: bool = False):
        """Window states ``(b, N + Nc + 1, n_x)`` and, if ``jac``, sensitivities."""
        L, m = self.layout, self.model
        rows = np.arange(z.shape[0]) if rows is None else rows
        x0, w, uv, wf = L.split(z)
        u = self._inputs_rows(uv, rows)
        u_app = self.buf.u[rows]
        s = m.disturbance_scale
        b = z.shape[0]
        xs = np.empty((b, L.N + L.Nc + 1, L.nx))
        xs[:, 0] = x0
        S = None
        if jac:
            S = np.zeros((b, L.N + L.Nc + 1, L.nx, L.n))
            S[:, 0, :, :L.nx] = np.eye(L.nx)
        x = x0
        eye_s = s * np.eye(L.nx)
        with np.errstate(over="ignore", invalid="ignore"):
            for j in range(L.N):
                if jac:
                    xn, A, _ = m.step_jacobian(x, u_app[:, j])
                    S[:, j + 1] = A @ S[:, j]
                    S[:, j + 1, :, L.o_w + j * L.nw:L.o_w + (j + 1) * L.nw] += eye_s
                else:
                    xn = m.f(x, u_app[:, j])
                x = xn + s * w[:, j]
                xs[:, j + 1] = x
            for j in range(L.Nc):
                t = L.N + j
                if jac:
                    xn, A, Bm = m.step_jacobian(x, u[:, j])
                    S[:, t + 1] = A @ S[:, t] + Bm @ self.dU[j]
                    if L.minmax:
                        S[:, t + 1, :, L.o_wf + j * L.nw:L.o_wf + (j + 1) * L.nw] += eye_s
                else:
                    xn = m.f(x, u[:, j])
                x = xn if wf is None else xn + s * wf[:, j]
                xs[:, t + 1] = x
        return xs, u, S

    def _blocks(self, z: Array, rows: Array, jac: bool):
        L, cfg, m = self.layout, self.cfg, self.model
        xs, u, S = self.rollout(z, rows, jac)
        x0, w, uv, wf = L.split(z)
        b = z.shape[0]
        r_parts, J_parts = [], []
        const_r = []
        if self.use_est:
            chi = x0 - self.mean[rows]
            Lp = self.Lp[rows]
            r_parts.append(self.se * np.einsum("bij,bj->bi", Lp, chi))
            if jac:
                J_parts.append(self.se * Lp @ S[:, 0])
        # constant-Jacobian rows go in one block (order matches const_J)
        if self.use_est:
            const_r.append((self.se * w @ self.Lq.T).reshape(b, -1))
            if L.minmax:
                const_r.append(self.se * wf[:, 0] @ self.Lq.T)
        if self.use_ctl:
            const_r.append((self.sc * u @ self.Lrc.T).reshape(b, -1))
        if const_r:
            r_parts.append(np.concatenate(const_r, axis=1))
            if jac:
                J_parts.append(np.broadcast_to(self.const_J, (b,) + self.const_J.shape))
        if self.use_est:
            xb = xs[:, :L.N + 1]
            v = self.buf.y[rows] - m.output(xb)
            r_parts.append((self.se * v @ self.Lr.T).reshape(b, -1))
            if jac:
                C = m.output_jacobian(xb)
                Cs = C @ S[:, :L.N + 1]
                J_parts.append((-self.se * np.matmul(self.Lr, Cs)).reshape(b, -1, L.n))
            if self.pen_V:
                d, mask = _penalty(v, cfg.V)
                r_parts.append(self.rho * d.reshape(b, -1))
                if jac:
                    J_parts.append((-self.rho * mask[..., None] * Cs).reshape(b, -1, L.n))
        if self.use_ctl:
            xf = xs[:, L.N:L.N + L.Nc]
            r_parts.append((self.sc * xf @ self.Lqc.T).reshape(b, -1))
            r_parts.append(self.sc * xs[:, -1] @ self.Lsc.T)
            if jac:
                J_parts.append((self.sc * np.matmul(self.Lqc, S[:, L.N:L.N + L.Nc])
                                ).reshape(b, -1, L.n))
                J_parts.append(self.sc * (self.Lsc @ S[:, -1]))
        if self.pen_X:
            # the initial state is boxed directly
            d, mask = _penalty(xs[:, 1:], cfg.X)
            r_parts.append(self.rho * d.reshape(b, -1))
            if jac:
                J_parts.append((self.rho * mask[..., None] * S[:, 1:]).reshape(b, -1, L.n))
        if cfg.X_f is not None and self.use_ctl:
            d, mask = _penalty(xs[:, -1], cfg.X_f)
            r_parts.append(self.rho * d)
            if jac:
                J_parts.append(self.rho * mask[..., None] * S[:, -1])
        if self.pen_U:
            d, mask = _penalty(u, cfg.U)
            r_parts.append(self.rho * d.reshape(b, -1))
            if jac:
                J_parts.append((self.rho * mask[..., None] * self.dU[None]).reshape(b, -1, L.n))
        r = np.concatenate(r_parts, axis=1) if r_parts else np.zeros((b, 0))
        if not jac:
            return r, None
        J = np.concatenate(J_parts, axis=1) if J_parts else np.zeros((b, 0, L.n))
        return r, J

    def _residuals(self, z, rows):
        return self._blocks(z, rows, False)[0]

    def _jacobian(self, z, rows):
        return self._blocks(z, rows, True)

    def _concave(self, z, rows):
        L = self.layout
        wf = L.split(z)[3]
        Q = self.cfg.weights.Qw_c
        c = 1.0 - self.phi
        q = c * np.einsum("bti,ij,btj->b", wf, Q, wf)
        dq = np.zeros_like(z)
        dq[:, L.o_wf:] = (2.0 * c * wf @ Q).reshape(z.shape[0], -1)
        return q, dq

    # -- helpers -------------------------------------------------------------------
    def objective(self, z: Array) -> Array:
        return self.nlp.objective(z)

    def decision_vector(self, z: Array) -> DecisionVector:
        L = self.layout
        x0, w, uv, wf = L.split(z)
        return DecisionVector(x0.copy(), w.copy(), self._inputs_rows(uv, np.arange(z.shape[0])).copy(),
                              None if wf is None else wf.copy())


def build_problem(model: SystemModel, cfg: EcmpcConfig, buf: WindowBuffer, **kw) -> WindowProblem:
    """Receding-horizon problem for the window ``buf`` (see :class:`WindowProblem`)."""
    for box, name in ((cfg.X, "X"), (cfg.U, "U"), (cfg.W, "W"), (cfg.V, "V")):
        if np.any(box.lower > box.upper):
            raise ValueError(f"empty constraint box {name}")
    return WindowProblem(model, cfg, buf, **kw)


@dataclass
class StepOutput:
    """Result of one sampling instant (batched over trials).

    ``tail`` is the criterion at the shifted previous solution (NaN at the
    first step or when unavailable).  ``step_ms`` is the wall time of the
    whole sampling instant (problem setup, warm start and solves) divided by
    the batch size.  ``ell_c`` and ``upsilon`` are the
    first-step controller cost and the cost-to-go at the predicted terminal
    state, both unweighted.
    """

    u: Array
    x_hat: Array
    dv: DecisionVector
    objective: Array
    tail: Array
    iterations: Array
    reason: Array
    step_ms: Array
    ell_c: Array
    upsilon: Array
    P: Array
    states: Array = None
    phi: float = 0.5

    @property
    def converged(self) -> Array:
        return np.isin(self.reason, ("gradient", "step"))


def _greedy_inputs(model: SystemModel, cfg: EcmpcConfig, x0: Array, Nc: int, u_prev: Array,
                   n_grid: int = 21, lookahead: int = 10) -> Array:
    """Cold-start inputs: at each step pick the grid input of ``U`` that, held
    constant for the next ``lookahead`` steps (at most the rest of the horizon),
    gives the lowest controller cost.

    Capping the hold keeps the sequence bounded on open-loop unstable models,
    where every input held over a long horizon diverges.
    """
    B = x0.shape[0]
    lo = np.where(np.isfinite(cfg.U.lower), cfg.U.lower, -1.0)
    hi = np.where(np.isfinite(cfg.U.upper), cfg.U.upper, 1.0)
    if model.n_u == 1:
        cand = np.linspace(lo[0], hi[0], n_grid)[:, None]
    else:
        cand = np.stack(np.meshgrid(*[np.linspace(a, c, 5) for a, c in zip(lo, hi)]), -1).reshape(-1, model.n_u)
    G = cand.shape[0]
    W = cfg.weights
    out = np.zeros((B, Nc, model.n_u))
    x = x0.copy()
    up = u_prev.copy()
    rate = None if cfg.U.rate is None else np.asarray(cfg.U.rate, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(Nc):
            cu = np.broadcast_to(cand, (B, G, model.n_u))
            if rate is not None:
                cu = np.clip(cu, up[:, None] - rate, up[:, None] + rate)
            xr = np.repeat(x[:, None], G, 1)
            cost = np.zeros((B, G))
            for _ in range(j, min(Nc, j + lookahead)):
                cost = cost + controller_stage_cost(xr, cu, W)
                xr = model.f(xr, cu)
            cost = cost + cost_to_go(xr, W)
            cost = np.where(np.isfinite(cost), cost, np.inf)
            best = np.argmin(cost, axis=1)
            u = cu[np.arange(B), best]
            out[:, j] = u
            xn = model.f(x, u)
            x = np.where(np.isfinite(xn), xn, x)
            up = u
    return out


def _to_variables(u: Array, u_prev: Array, rate: bool) -> Array:
    if not rate:
        return u
    prev = np.concatenate([u_prev[:, None], u[:, :-1]], axis=1)
    return u - prev


class _ArrivalState:
    """Per-trial arrival-cost mean and matrix ``P``."""

    def __init__(self, cfg: EcmpcConfig, prior: Array, B: int, nx: int):
        self.cfg = cfg
        P0 = np.asarray(cfg.arrival_P0, dtype=float)
        P0 = P0 * np.eye(nx) if P0.ndim == 0 or P0.size == 1 else (np.diag(P0) if P0.ndim == 1 else P0)
        self.mean = np.array(np.broadcast_to(prior, (B, nx)), dtype=float)
        self.P = np.array(np.broadcast_to(P0, (B, nx, nx)), dtype=float)
        self.C = np.linalg.pinv(cfg.weights.Qe)

    def cost(self) -> ArrivalCost:
        return ArrivalCost(self.mean, self.P, strategy=self.cfg.arrival_strategy,
                           forgetting=self.cfg.forgetting, eig_bounds=self.cfg.eig_bounds)

    def update(self, new_mean: Array, A: Array) -> None:
        self.mean = np.array(new_mean)
        if self.cfg.arrival_strategy == "fixed":
            return
        P = self.cfg.forgetting * (A @ self.P @ np.swapaxes(A, -1, -2) + self.C)
        ok = np.all(np.isfinite(P), axis=(-1, -2))
        P = np.where(ok[:, None, None], P, self.P)
        self.P = clamp_eigenvalues(P, *self.cfg.eig_bounds)


class _Estimator:
    """Backward-window bookkeeping shared by both controllers."""

    def __init__(self, model: SystemModel, cfg: EcmpcConfig, prior: Array, batch: int):
        self.model = model
        self.cfg = cfg
        self.B = batch
        self.k = 0
        self.y_hist: list = []
        self.u_hist: list = []
        self.arrival = _ArrivalState(cfg, prior, batch, model.n_x)
        self.u_prev = np.zeros((batch, model.n_u))

    def push(self, y: Array) -> WindowBuffer:
        y = np.asarray(y, dtype=float).reshape(self.B, self.model.n_y)
        self.y_hist.append(y)
        N = min(self.k, self.cfg.N_e)
        self.y_hist = self.y_hist[-(N + 1):]
        self.u_hist = self.u_hist[-N:] if N else []
        yw = np.stack(self.y_hist, axis=1)
        uw = np.stack(self.u_hist, axis=1) if N else np.zeros((self.B, 0, self.model.n_u))
        return WindowBuffer(yw, uw, self.arrival.cost(), self.k, self.u_prev.copy())

    def slides(self) -> bool:
        return self.k + 1 > self.cfg.N_e

    def advance(self, u_applied: Array, states: Array, buf: WindowBuffer) -> None:
        if self.slides() and buf.N > 0:
            _, A, _ = self.model.step_jacobian(states[:, 0], buf.u[:, 0])
            self.arrival.update(states[:, 1], A)
        self.u_hist.append(u_applied)
        self.u_prev = u_applied.copy()
        self.k += 1

    def shift_backward(self, x0: Array, w: Array, states: Array, w_new: Array, buf: WindowBuffer):
        """Warm start of the next backward block."""
        if self.slides() and buf.N > 0:
            return states[:, 1].copy(), np.concatenate([w[:, 1:], w_new[:, None]], axis=1)
        return x0.copy(), np.concatenate([w, w_new[:, None]], axis=1)


def _shift_forward(uv: Array) -> Array:
    return np.concatenate([uv[:, 1:], np.zeros_like(uv[:, :1])], axis=1)


def _sanitize(z: Array, z_cold: Array) -> Array:
    ok = np.all(np.isfinite(z), axis=1)
    return np.where(ok[:, None], z, z_cold)


class SimultaneousController:
    """Joint estimation and control, one problem per sampling instant.

    Parameters
    ----------
    model : SystemModel
        Discrete prediction model.
    cfg : EcmpcConfig
    prior : array (n_x,) or (B, n_x)
        Prior mean of the initial state.
    batch : int
        Number of trials stepped together.
    """

    def __init__(self, model: SystemModel, cfg: EcmpcConfig, prior, batch: int = 1):
        self.model = model
        self.cfg = cfg
        self.B = batch
        self.est = _Estimator(model, cfg, np.asarray(prior, dtype=float), batch)
        self._warm = None     # (x0, w, u_vars, wf) for the next step

    @property
    def k(self) -> int:
        return self.est.k

    def _cold(self, prob: WindowProblem, x0: Optional[Array] = None) -> Array:
        L = prob.layout
        if x0 is None:
            x0 = np.minimum(np.maximum(self.est.arrival.mean, self.cfg.X.lower), self.cfg.X.upper)
        w = np.zeros((self.B, L.N, L.nw))
        xs = prob.rollout(L.join(x0, w, np.zeros((self.B, L.Nc, L.nu)),
                                 np.zeros((self.B, L.Nc, L.nw)) if L.minmax else None))[0]
        xk = xs[:, L.N]
        xk = np.where(np.isfinite(xk), xk, 0.0)
        u = _greedy_inputs(self.model, self.cfg, xk, L.Nc, prob.u_prev)
        uv = _to_variables(u, prob.u_prev, prob.rate)
        wf = np.zeros((self.B, L.Nc, L.nw)) if L.minmax else None
        return prob.nlp.project(L.join(x0, w, uv, wf))

    def step(self, y: Array) -> StepOutput:
        t0 = time.perf_counter()
        buf = self.est.push(y)
        prob = build_problem(self.model, self.cfg, buf)
        L = prob.layout
        if self._warm is None:
            z0 = self._cold(prob)
            tail = np.full(self.B, np.nan)
        else:
            z0 = prob.nlp.project(L.join(*self._warm))
            tail = prob.objective(z0)
            bad = ~np.isfinite(tail)
            if bad.any():
                z0 = np.where(bad[:, None], self._cold(prob), z0)
        res = solve(prob.nlp, self.cfg.solver, z0)
        out = self._finish(prob, buf, res, tail)
        out.step_ms[:] = (time.perf_counter() - t0) * 1e3 / self.B
        return out

    def _finish(self, prob: WindowProblem, buf: WindowBuffer, res: SolveResult,
                tail: Array) -> StepOutput:
        L = prob.layout
        z = res.z
        x0, w, uv, wf = L.split(z)
        states, u, _ = prob.rollout(z)
        xk = states[:, L.N]
        u0 = u[:, 0]
        u_app = np.minimum(np.maximum(u0, self.cfg.U.lower), self.cfg.U.upper)
        u_app = np.where(np.isfinite(u_app), u_app, 0.0)
        W = self.cfg.weights
        out = StepOutput(
            u=u_app, x_hat=xk.copy(), dv=prob.decision_vector(z), objective=res.objective.copy(),
            tail=tail, iterations=res.iterations.copy(), reason=res.reason.copy(),
            step_ms=np.zeros(self.B),
            ell_c=controller_stage_cost(xk, u0, W), upsilon=cost_to_go(states[:, -1], W),
            P=np.array(buf.arrival.P), states=states, phi=self.cfg.phi)
        w_new = np.zeros((self.B, L.nw)) if wf is None else wf[:, 0]
        nx0, nw = self.est.shift_backward(x0, w, states, w_new, buf)
        self.est.advance(u_app, states, buf)
        nuv = _shift_forward(uv)
        if prob.rate:
            # increments are relative to the applied (clipped) input
            nuv[:, 0] += (u[:, 0] - u_app) if L.Nc > 1 else 0.0
        self._warm = (nx0, nw, nuv, None if wf is None else _shift_forward(wf))
        return out


class IndependentController:
    """Estimator (``phi = 1``) followed by a certainty-equivalence controller (``phi = 0``)."""

    def __init__(self, model: SystemModel, cfg: EcmpcConfig, prior, batch: int = 1):
        self.model = model
        self.cfg = cfg
        self.B = batch
        self.est = _Estimator(model, cfg, np.asarray(prior, dtype=float), batch)
        self._warm_e = None
        self._warm_c = None
        self._helper = SimultaneousController(model, cfg, prior, batch)

    @property
    def k(self) -> int:
        return self.est.k

    def step(self, y: Array) -> StepOutput:
        t0 = time.perf_counter()
        cfg = self.cfg
        buf = self.est.push(y)
        pe = build_problem(self.model, cfg, buf, n_control=0, phi=1.0)
        Le = pe.layout
        x_start = np.minimum(np.maximum(self.est.arrival.mean, cfg.X.lower), cfg.X.upper)
        no_u = np.zeros((self.B, 0, Le.nu))
        ze_cold = pe.nlp.project(Le.join(x_start, np.zeros((self.B, Le.N, Le.nw)), no_u))
        ze0 = ze_cold if self._warm_e is None else pe.nlp.project(
            _sanitize(Le.join(*self._warm_e, no_u), ze_cold))
        re = solve(pe.nlp, cfg.solver, ze0)
        states_e = pe.rollout(re.z)[0]
        xk = states_e[:, Le.N]
        xk_pin = np.where(np.isfinite(xk), xk, x_start)

        empty = WindowBuffer(y=np.asarray(y, dtype=float).reshape(self.B, 1, self.model.n_y),
                             u=np.zeros((self.B, 0, self.model.n_u)), arrival=buf.arrival, k=buf.k,
                             u_prev=buf.u_prev)
        pc = build_problem(self.model, cfg, empty, phi=0.0, x_fixed=xk_pin)
        Lc = pc.layout
        no_w = np.zeros((self.B, 0, Lc.nw))

        def cold():
            u_cold = _to_variables(_greedy_inputs(self.model, cfg, xk_pin, Lc.Nc, pc.u_prev),
                                   pc.u_prev, pc.rate)
            wf_cold = np.zeros((self.B, Lc.Nc, Lc.nw)) if Lc.minmax else None
            return pc.nlp.project(Lc.join(xk_pin, no_w, u_cold, wf_cold))

        if self._warm_c is None:
            zc0 = cold()
        else:
            zc0 = pc.nlp.project(Lc.join(xk_pin, no_w, *self._warm_c))
            bad = ~np.isfinite(pc.objective(zc0))
            if bad.any():
                zc0 = np.where(bad[:, None], cold(), zc0)
        rc = solve(pc.nlp, cfg.solver, zc0)

        states_c, u, _ = pc.rollout(rc.z)
        _, _, uv, wf = Lc.split(rc.z)
        u0 = u[:, 0]
        u_app = np.minimum(np.maximum(u0, cfg.U.lower), cfg.U.upper)
        u_app = np.where(np.isfinite(u_app), u_app, 0.0)
        W = cfg.weights
        reason = np.where(re.failed, re.reason, rc.reason)
        dv_e = pe.decision_vector(re.z)
        dv_c = pc.decision_vector(rc.z)
        out = StepOutput(
            u=u_app, x_hat=xk.copy(), dv=DecisionVector(dv_e.x_init, dv_e.w_back, dv_c.u_fwd, dv_c.w_fwd),
            objective=re.objective + rc.objective, tail=np.full(self.B, np.nan),
            iterations=re.iterations + rc.iterations, reason=reason, step_ms=np.zeros(self.B),
            ell_c=controller_stage_cost(xk, u0, W), upsilon=cost_to_go(states_c[:, -1], W),
            P=np.array(buf.arrival.P), states=np.concatenate([states_e, states_c[:, 1:]], axis=1),
            phi=cfg.phi)
        x0, w, _, _ = Le.split(re.z)
        self._warm_e = self.est.shift_backward(x0, w, states_e, np.zeros((self.B, Le.nw)), buf)
        self.est.advance(u_app, states_e, buf)
        nuv = _shift_forward(uv)
        if pc.rate and Lc.Nc > 1:
            nuv[:, 0] += u[:, 0] - u_app
        self._warm_c = (nuv, None if wf is None else _shift_forward(wf))
        out.step_ms[:] = (time.perf_counter() - t0) * 1e3 / self.B
        return out


def tail_cost(model: SystemModel, cfg: EcmpcConfig, prev: StepOutput, buf: WindowBuffer,
              slid: bool) -> Array:
    """Criterion of the window ``buf`` at the shifted solution ``prev``.

    ``slid`` says whether the backward window moved forward (full window)
    or grew by one sample (start-up).  The arrival mean of ``buf`` is
    expected to be the state at the new window start, so the arrival term
    vanishes.
    """
    prob = build_problem(model, cfg, buf)
    L = prob.layout
    dv = prev.dv
    B = buf.batch
    wf = dv.w_fwd
    w_new = np.zeros((B, L.nw)) if wf is None else wf[:, 0]
    if slid:
        x0 = prev.states[:, 1]
        w = np.concatenate([dv.w_back[:, 1:], w_new[:, None]], axis=1)
    else:
        x0 = dv.x_init
        w = np.concatenate([dv.w_back, w_new[:, None]], axis=1)
    # rate mode repeats the last input (zero increment), otherwise a zero input is appended
    last = dv.u_fwd[:, -1:] if prob.rate else np.zeros_like(dv.u_fwd[:, :1])
    u = np.concatenate([dv.u_fwd[:, 1:], last], axis=1)
    uv = _to_variables(u, prev.u, prob.rate)
    wfn = None if wf is None else _shift_forward(wf)
    return prob.objective(prob.nlp.project(L.join(x0, w, uv, wfn)))
