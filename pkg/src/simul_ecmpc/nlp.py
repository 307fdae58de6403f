"""Box-constrained nonlinear least squares.

The solver is a projected Gauss-Newton method with Levenberg-Marquardt
damping and an Armijo backtracking search along the projection arc.  It
works on a *batch* of independent problems that share a residual layout:
every array carries a leading batch axis and each problem iterates on its
own schedule.  Batching is what makes Monte Carlo runs affordable; with a
batch of one it is an ordinary solver.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

Array = np.ndarray

GRADIENT = "gradient"
STEP = "step"
MAX_ITER = "max-iter"
FAILED = "numerical-failure"


class NumericalFailure(RuntimeError):
    """Non-finite objective or gradient at a feasible point."""

    def __init__(self, message: str, iterate: Optional[Array] = None):
        super().__init__(message)
        self.iterate = iterate


@dataclass
class NlpProblem:
    """A batch of box-constrained problems ``min |r(z)|^2 - q(z)``.

    Parameters
    ----------
    jacobian : callable
        ``jacobian(z, rows) -> (r, J)`` for iterates ``z`` of shape
        ``(b, n)``; ``rows`` holds the batch index of each iterate so the
        callable can pick the matching problem data.
    residuals : callable, optional
        Residual-only evaluation with the same signature, used by the line
        search.  Defaults to ``jacobian(...)[0]``.
    lower, upper : array, shape (B, n) or (n,)
        Variable bounds (``+-inf`` allowed).
    concave : callable, optional
        ``concave(z, rows) -> (q, dq)``: a term subtracted from the
        objective.  It may only depend on the variables flagged in
        ``ascent_mask``, which are maximized rather than minimized.
    ascent_mask : array of bool, shape (n,), optional
    """

    jacobian: Callable[[Array, Array], tuple]
    lower: Array
    upper: Array
    residuals: Optional[Callable[[Array, Array], Array]] = None
    concave: Optional[Callable[[Array, Array], tuple]] = None
    ascent_mask: Optional[Array] = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        lo = np.atleast_2d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_2d(np.asarray(self.upper, dtype=float))
        lo, hi = np.broadcast_arrays(lo, hi)
        if np.any(lo > hi):
            raise ValueError("infeasible bounds: lower > upper")
        self.lower = np.array(lo)
        self.upper = np.array(hi)
        if self.ascent_mask is not None:
            self.ascent_mask = np.asarray(self.ascent_mask, dtype=bool)
            if not self.ascent_mask.any():
                self.ascent_mask = None

    @property
    def batch(self) -> int:
        return self.lower.shape[0]

    @property
    def n(self) -> int:
        return self.lower.shape[1]

    def project(self, z: Array, rows: Optional[Array] = None) -> Array:
        rows = np.arange(self.batch) if rows is None else rows
        return np.minimum(np.maximum(z, self.lower[rows]), self.upper[rows])

    def residual(self, z: Array, rows: Array) -> Array:
        if self.residuals is not None:
            return self.residuals(z, rows)
        return self.jacobian(z, rows)[0]

    def objective(self, z: Array, rows: Optional[Array] = None) -> Array:
        """Objective per iterate; non-finite values map to ``+inf``."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        rows = np.arange(z.shape[0]) if rows is None else np.asarray(rows)
        with np.errstate(over="ignore", invalid="ignore"):
            r = self.residual(z, rows)
            f = np.einsum("bm,bm->b", r, r)
            if self.concave is not None:
                f = f - self.concave(z, rows)[0]
        return np.where(np.isfinite(f), f, np.inf)

    @classmethod
    def from_functions(cls, residual: Callable[[Array], Array], lower, upper,
                       jacobian: Optional[Callable[[Array], Array]] = None) -> "NlpProblem":
        """Wrap an unbatched residual ``r(z)`` (and optional Jacobian) into a problem."""

        def jac(z, rows):
            rs, Js = [], []
            for zi in z:
                ri = np.atleast_1d(residual(zi))
                Ji = (np.atleast_2d(jacobian(zi)) if jacobian is not None
                      else finite_diff_jacobian(residual, zi))
                rs.append(ri)
                Js.append(Ji)
            return np.array(rs), np.array(Js)

        def res(z, rows):
            return np.array([np.atleast_1d(residual(zi)) for zi in z])

        return cls(jacobian=jac, residuals=res, lower=np.atleast_1d(lower), upper=np.atleast_1d(upper))


@dataclass(frozen=True)
class SolveOptions:
    max_iterations: int = 100
    gradient_tol: float = 1e-8
    step_tol: float = 1e-10
    function_tol: float = 1e-14
    contraction: float = 0.5
    armijo: float = 1e-4
    max_backtracks: int = 30
    damping_init: float = 1e-3
    damping_decay: float = 0.3
    damping_floor: float = 1e-10
    max_alternations: int = 5
    raise_on_failure: bool = True

    def __post_init__(self):
        for name in ("gradient_tol", "step_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.contraction < 1.0:
            raise ValueError("contraction must lie in (0, 1)")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be non-negative")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class SolveResult:
    z: Array
    objective: Array
    iterations: Array
    reason: Array
    kkt: Array
    initial_objective: Array

    @property
    def converged(self) -> Array:
        return np.isin(self.reason, (GRADIENT, STEP))

    @property
    def failed(self) -> Array:
        return self.reason == FAILED


def _jt_vec(J: Array, r: Array) -> Array:
    """Batched ``J^T r``."""
    return np.matmul(r[:, None, :], J)[:, 0]


def _projected_gradient(z, g, lo, hi):
    return np.max(np.abs(z - np.minimum(np.maximum(z - g, lo), hi)), axis=1, initial=0.0)


def _descend(p: NlpProblem, z: Array, opts: SolveOptions, fixed: Optional[Array],
             rows: Array, iters: Array, reason: Array, kkt: Array, fvals: Array) -> Array:
    """Projected Gauss-Newton on the rows in ``rows``; updates arrays in place."""
    n = p.n
    lo, hi = p.lower, p.upper
    mu = np.full(p.batch, opts.damping_init)
    active = rows.copy()
    reason[active] = MAX_ITER
    eye = np.eye(n)
    cached = None
    for _ in range(opts.max_iterations + 1):
        if active.size == 0:
            break
        if cached is None:
            with np.errstate(over="ignore", invalid="ignore"):
                r, J = p.jacobian(z[active], active)
        else:
            r, J = cached
            cached = None
        g = 2.0 * _jt_vec(J, r)
        bad = ~(np.all(np.isfinite(r), axis=1) & np.all(np.isfinite(g), axis=1))
        if bad.any():
            reason[active[bad]] = FAILED
            keep = ~bad
            active, r, J, g = active[keep], r[keep], J[keep], g[keep]
            if active.size == 0:
                break
        za = z[active]
        loa, hia = lo[active], hi[active]
        if fixed is not None:
            g = np.where(fixed, 0.0, g)
        f0 = fvals[active]
        pg = _projected_gradient(za, g, loa, hia)
        kkt[active] = pg
        done = pg <= opts.gradient_tol * (1.0 + np.abs(f0))
        out_of_budget = iters[active] >= opts.max_iterations
        reason[active[done]] = GRADIENT
        stop = done | out_of_budget
        if stop.all():
            break
        keep = ~stop
        active, r, J, g, za, loa, hia, f0 = (a[keep] for a in (active, r, J, g, za, loa, hia, f0))

        span = 1e-12 * (1.0 + np.abs(za))
        binding = ((za <= loa + span) & (g > 0)) | ((za >= hia - span) & (g < 0)) | (loa == hia)
        if fixed is not None:
            binding |= fixed
        free = ~binding
        Jf = J * free[:, None, :]
        H = np.matmul(Jf.transpose(0, 2, 1), Jf)
        diag = np.einsum("bii->bi", H)
        scale = np.maximum(diag, opts.damping_floor)
        H = H + (mu[active][:, None] * scale + opts.damping_floor)[:, :, None] * eye
        # binding variables: identity rows so that their step is exactly zero
        H = np.where(binding[:, :, None] | binding[:, None, :], 0.0, H) + binding[:, :, None] * eye
        rhs = -_jt_vec(Jf, r)
        try:
            d = np.linalg.solve(H, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError:
            d = np.stack([np.linalg.lstsq(Hi, bi, rcond=None)[0] for Hi, bi in zip(H, rhs)])
        d = np.where(free, d, 0.0)

        alpha = np.ones(active.size)
        accepted = np.zeros(active.size, dtype=bool)
        z_new = za.copy()
        f_new = f0.copy()
        pending = np.arange(active.size)
        for _bt in range(opts.max_backtracks):
            if pending.size == 0:
                break
            zt = np.minimum(np.maximum(za[pending] + alpha[pending, None] * d[pending],
                                       loa[pending]), hia[pending])
            ft = p.objective(zt, active[pending])
            decrease = np.einsum("bn,bn->b", g[pending], zt - za[pending])
            ok = ft <= f0[pending] + opts.armijo * np.minimum(decrease, 0.0)
            ok &= ft <= f0[pending]
            hit = pending[ok]
            z_new[hit] = zt[ok]
            f_new[hit] = ft[ok]
            accepted[hit] = True
            pending = pending[~ok]
            alpha[pending] *= opts.contraction

        iters[active] += 1
        full = accepted & (alpha == 1.0)
        mu_a = mu[active]
        mu_a = np.where(full, np.maximum(mu_a * opts.damping_decay, opts.damping_floor), mu_a)
        mu_a = np.where(accepted & ~full, mu_a * 2.0, mu_a)
        mu_a = np.where(~accepted, mu_a * 10.0, mu_a)
        mu[active] = mu_a

        step = np.max(np.abs(z_new - za), axis=1, initial=0.0)
        small_step = accepted & (step <= opts.step_tol * (1.0 + np.max(np.abs(za), axis=1, initial=0.0)))
        tiny_gain = accepted & ((f0 - f_new) <= opts.function_tol * (1.0 + np.abs(f0)))
        stalled = ~accepted & (mu_a > 1e12)
        z[active] = z_new
        fvals[active] = f_new
        finished = small_step | tiny_gain | stalled
        reason[active[finished]] = STEP
        active = active[~finished]
    return z


def _ascend(p: NlpProblem, z: Array, opts: SolveOptions, rows: Array, fvals: Array) -> None:
    """One projected gradient-ascent step on the ascent variables."""
    mask = p.ascent_mask
    with np.errstate(over="ignore", invalid="ignore"):
        r, J = p.jacobian(z[rows], rows)
        _, dq = p.concave(z[rows], rows)
    g = 2.0 * _jt_vec(J, r) - dq
    g = np.where(mask, g, 0.0)
    curv = 2.0 * np.einsum("bmn,bmn->b", J * mask, J * mask) / max(int(mask.sum()), 1)
    eta = 1.0 / np.maximum(curv, 1e-12)
    base = fvals[rows]
    pending = np.arange(rows.size)
    lo, hi = p.lower[rows], p.upper[rows]
    zr = z[rows]
    for _ in range(opts.max_backtracks):
        if pending.size == 0:
            break
        zt = np.minimum(np.maximum(zr[pending] + eta[pending, None] * g[pending], lo[pending]), hi[pending])
        ft = p.objective(zt, rows[pending])
        ok = np.isfinite(ft) & (ft >= base[pending])
        z[rows[pending[ok]]] = zt[ok]
        fvals[rows[pending[ok]]] = ft[ok]
        pending = pending[~ok]
        eta[pending] *= opts.contraction


def solve(p: NlpProblem, opts: SolveOptions = SolveOptions(), z0: Optional[Array] = None) -> SolveResult:
    """Minimize every problem of the batch from the warm start ``z0``.

    ``z0`` is projected onto the bounds first.  Without ascent variables the
    accepted objective sequence is non-increasing; with them, descent and
    one-step ascent on the flagged variables alternate up to
    ``opts.max_alternations`` times.

    Raises
    ------
    NumericalFailure
        When the objective or gradient is non-finite at a feasible iterate
        and ``opts.raise_on_failure`` is set.
    """
    B, n = p.batch, p.n
    if z0 is None:
        z0 = np.zeros((B, n))
    z = p.project(np.array(np.broadcast_to(np.asarray(z0, dtype=float), (B, n))))
    rows = np.arange(B)
    fvals = p.objective(z, rows)
    f_init = fvals.copy()
    iters = np.zeros(B, dtype=int)
    reason = np.full(B, MAX_ITER, dtype=object)
    kkt = np.full(B, np.inf)
    live = rows[np.isfinite(fvals)]
    reason[~np.isfinite(fvals)] = FAILED

    if p.ascent_mask is None:
        _descend(p, z, opts, None, live, iters, reason, kkt, fvals)
    else:
        for _ in range(opts.max_alternations):
            live = live[reason[live] != FAILED]
            _descend(p, z, opts, p.ascent_mask, live, iters, reason, kkt, fvals)
            live = live[reason[live] != FAILED]
            _ascend(p, z, opts, live, fvals)
        live = live[reason[live] != FAILED]
        _descend(p, z, opts, p.ascent_mask, live, iters, reason, kkt, fvals)

    result = SolveResult(z=z, objective=fvals, iterations=iters, reason=reason.astype(str),
                         kkt=kkt, initial_objective=f_init)
    if opts.raise_on_failure and result.failed.any():
        bad = np.flatnonzero(result.failed)
        raise NumericalFailure(f"non-finite objective or gradient for batch rows {bad.tolist()}",
                               iterate=z[bad])
    return result


def grid_oracle(p: NlpProblem, resolution: float, row: int = 0, chunk: int = 200_000):
    """Exhaustive grid minimum of problem ``row``; for tests only.

    Returns ``(z_best, f_best)``.  At most 4 variables with finite bounds.
    """
    lo, hi = p.lower[row], p.upper[row]
    if lo.size > 4:
        raise ValueError("grid_oracle supports at most 4 variables")
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValueError("grid_oracle needs finite bounds")
    axes = []
    for a, b in zip(lo, hi):
        k = int(np.floor((b - a) / resolution + 1e-9))
        pts = a + resolution * np.arange(k + 1)
        if pts[-1] < b - 1e-12:
            pts = np.append(pts, b)
        axes.append(pts)
    best_f, best_z = np.inf, None
    it = itertools.product(*axes)
    while True:
        block = np.array(list(itertools.islice(it, chunk)))
        if block.size == 0:
            break
        f = p.objective(block, np.full(block.shape[0], row))
        i = int(np.argmin(f))
        if f[i] < best_f:
            best_f, best_z = float(f[i]), block[i].copy()
    return best_z, best_f


def finite_diff_gradient(f: Callable[[Array], float], z, h: float = 1e-6) -> Array:
    """Central-difference gradient of a scalar function."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    g = np.empty_like(z)
    for i in range(z.size):
        e = np.zeros_like(z)
        e[i] = h
        fp, fm = f(z + e), f(z - e)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalFailure("non-finite sample in finite differences", iterate=z)
        g[i] = (fp - fm) / (2 * h)
    return g


def finite_diff_jacobian(fun: Callable[[Array], Array], z, h: float = 1e-6) -> Array:
    z = np.atleast_1d(np.asarray(z, dtype=float))
    cols = []
    for i in range(z.size):
        e = np.zeros_like(z)
        e[i] = h
        cols.append((np.atleast_1d(fun(z + e)) - np.atleast_1d(fun(z - e))) / (2 * h))
    return np.stack(cols, axis=-1)
