"""Plant and prediction models, constraint boxes and seeded noise.

Every model function is batched: states have shape ``(..., n_x)`` and inputs
``(..., n_u)``.  Discrete models expose :meth:`SystemModel.step` and
:meth:`SystemModel.step_jacobian`, which is what the receding-horizon
problems roll forward.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

Array = np.ndarray


class IntegrationError(RuntimeError):
    """Raised when a fixed-step integration produces a non-finite state."""


@dataclass(frozen=True)
class BoxSet:
    """Axis-aligned box ``lower <= v <= upper`` with optional rate limits.

    ``rate`` bounds the per-step increment ``|v_j - v_{j-1}|`` and is only
    meaningful for input boxes.
    """

    lower: Array
    upper: Array
    rate: Optional[Array] = None

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape:
            raise ValueError("box bounds must have identical shapes")
        if np.any(lo > hi):
            raise ValueError(f"box lower bound exceeds upper bound: {lo} > {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if self.rate is not None:
            rate = np.broadcast_to(np.asarray(self.rate, dtype=float), lo.shape).copy()
            if np.any(rate < 0):
                raise ValueError("rate bounds must be non-negative")
            object.__setattr__(self, "rate", rate)

    @classmethod
    def symmetric(cls, bound, rate=None) -> "BoxSet":
        b = np.atleast_1d(np.asarray(bound, dtype=float))
        return cls(-b, b, rate=rate)

    @classmethod
    def unbounded(cls, dim: int) -> "BoxSet":
        return cls(np.full(dim, -np.inf), np.full(dim, np.inf))

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper)))

    def contains(self, v, tol: float = 0.0) -> Array:
        v = np.asarray(v, dtype=float)
        return np.all((v >= self.lower - tol) & (v <= self.upper + tol), axis=-1)

    def contains_origin(self) -> bool:
        return bool(np.all(self.lower <= 0.0) and np.all(self.upper >= 0.0))

    def subset_of(self, other: "BoxSet") -> bool:
        return bool(np.all(self.lower >= other.lower) and np.all(self.upper <= other.upper))

    def to_dict(self) -> dict:
        d = {"lower": _finite_list(self.lower), "upper": _finite_list(self.upper)}
        if self.rate is not None:
            d["rate"] = _finite_list(self.rate)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BoxSet":
        return cls(_parse_list(d["lower"]), _parse_list(d["upper"]),
                   rate=None if d.get("rate") is None else _parse_list(d["rate"]))


def _finite_list(a: Array) -> list:
    return [v if np.isfinite(v) else ("inf" if v > 0 else "-inf") for v in a.tolist()]


def _parse_list(values) -> Array:
    return np.array([float(v) for v in values], dtype=float)


def project_box(v, box: BoxSet) -> Array:
    """Clamp ``v`` component-wise into ``box``.

    Works on any leading batch shape; the last axis must match the box.
    """
    v = np.asarray(v, dtype=float)
    if v.shape[-1:] != box.lower.shape:
        raise ValueError(f"dimension mismatch: vector {v.shape[-1:]} vs box {box.lower.shape}")
    return np.minimum(np.maximum(v, box.lower), box.upper)


@dataclass(frozen=True)
class Discretization:
    sample_time: float = 0.1
    scheme: str = "RK4"

    def __post_init__(self):
        if not self.sample_time > 0:
            raise ValueError("sample_time must be positive")
        if self.scheme not in ("RK4", "Euler"):
            raise ValueError(f"unknown scheme {self.scheme!r}")


@dataclass(frozen=True)
class SystemModel:
    """Nonlinear model ``x+ = f(x, u) + s*w`` (discrete) or ``dx/dt = f(x, u)``.

    Parameters
    ----------
    n_x, n_u, n_w, n_y : int
        Dimensions.  The disturbance is additive on the state, so
        ``n_w == n_x``.
    f, h : callable
        Batched dynamics and output map.
    continuous : bool
        Whether ``f`` is a vector field (True) or a one-step map.
    dfdx, dfdu, dhdx : callable, optional
        Batched analytic Jacobians returning ``(..., n_x, n_x)``,
        ``(..., n_x, n_u)`` and ``(..., n_y, n_x)``.  Central finite
        differences are used when absent.
    disturbance_scale : float
        Factor ``s`` multiplying the additive disturbance after each step.
    """

    n_x: int
    n_u: int
    n_w: int
    n_y: int
    f: Callable[[Array, Array], Array]
    h: Callable[[Array], Array]
    continuous: bool = False
    dfdx: Optional[Callable] = None
    dfdu: Optional[Callable] = None
    dhdx: Optional[Callable] = None
    sample_time: Optional[float] = None
    scheme: Optional[str] = None
    disturbance_scale: float = 1.0
    name: str = "model"
    _jac: Optional[Callable] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        for attr in ("n_x", "n_u", "n_w", "n_y"):
            if int(getattr(self, attr)) < 1:
                raise ValueError(f"{attr} must be a positive integer")
        if self.n_w != self.n_x:
            raise ValueError("disturbances are additive on the state: n_w must equal n_x")

    # -- continuous-time pieces -------------------------------------------------
    def jac_x(self, x: Array, u: Array) -> Array:
        if self.dfdx is not None:
            return self.dfdx(x, u)
        return _fd_jacobian(lambda xx: self.f(xx, u), x)

    def jac_u(self, x: Array, u: Array) -> Array:
        if self.dfdu is not None:
            return self.dfdu(x, u)
        return _fd_jacobian(lambda uu: self.f(x, uu), u)

    def output(self, x: Array) -> Array:
        return self.h(np.asarray(x, dtype=float))

    def output_jacobian(self, x: Array) -> Array:
        if self.dhdx is not None:
            return self.dhdx(x)
        return _fd_jacobian(self.h, x)

    # -- discrete-time interface -------------------------------------------------
    def step(self, x: Array, u: Array, w: Optional[Array] = None, check: bool = True) -> Array:
        """One step of the discrete map, disturbance added after the step.

        Raises
        ------
        IntegrationError
            If ``check`` and the new state is not finite.
        """
        if self.continuous:
            raise TypeError("continuous model: discretize() it first")
        with np.errstate(over="ignore", invalid="ignore"):
            xn = self.f(np.asarray(x, dtype=float), np.asarray(u, dtype=float))
        if w is not None:
            xn = xn + self.disturbance_scale * np.asarray(w, dtype=float)
        if check:
            _checked(xn)
        return xn

    def step_jacobian(self, x: Array, u: Array):
        """Return ``(x_next, A, B)`` with ``A = d x_next/dx`` and ``B = d x_next/du``."""
        if self.continuous:
            raise TypeError("continuous model: discretize() it first")
        if self._jac is not None:
            return self._jac(x, u)
        return self.f(x, u), self.jac_x(x, u), self.jac_u(x, u)

    def describe(self) -> dict:
        return {"name": self.name, "continuous": self.continuous, "sample_time": self.sample_time,
                "scheme": self.scheme, "disturbance_scale": self.disturbance_scale}


def _fd_jacobian(fun: Callable[[Array], Array], z: Array, h: float = 1e-6) -> Array:
    z = np.asarray(z, dtype=float)
    f0 = np.asarray(fun(z))
    n = z.shape[-1]
    jac = np.empty(f0.shape + (n,))
    for i in range(n):
        dz = np.zeros(n)
        step = h * max(1.0, float(np.max(np.abs(z[..., i])))) if z.size else h
        dz[i] = step
        jac[..., i] = (fun(z + dz) - fun(z - dz)) / (2 * step)
    return jac


def discretize(model: SystemModel, disc: Discretization,
               disturbance_scale: float = 1.0) -> SystemModel:
    """Fixed-step discretization of a continuous model.

    The returned model maps ``(x, u)`` to the state after one sample period
    with the input held constant; the disturbance is added after the step,
    multiplied by ``disturbance_scale``.

    The raw map never raises, so optimizers can probe wild iterates;
    :meth:`SystemModel.step` raises :class:`IntegrationError` on non-finite
    states.
    """
    if not model.continuous:
        raise TypeError("discretize() expects a continuous-time model")
    h = float(disc.sample_time)
    nx = model.n_x
    eye = np.eye(nx)

    if disc.scheme == "RK4":
        def f_disc(x, u):
            x = np.asarray(x, dtype=float)
            u = np.asarray(u, dtype=float)
            k1 = model.f(x, u)
            k2 = model.f(x + 0.5 * h * k1, u)
            k3 = model.f(x + 0.5 * h * k2, u)
            k4 = model.f(x + h * k3, u)
            return x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

        def jac(x, u):
            x = np.asarray(x, dtype=float)
            u = np.asarray(u, dtype=float)
            # stage derivatives w.r.t. x and u, chained through the stage points
            k1 = model.f(x, u)
            ax, au = model.jac_x(x, u), model.jac_u(x, u)
            sx, su = ax.copy(), au.copy()
            x2 = x + 0.5 * h * k1
            k2 = model.f(x2, u)
            fx = model.jac_x(x2, u)
            bx = fx @ (eye + 0.5 * h * ax)
            bu = fx @ (0.5 * h * au) + model.jac_u(x2, u)
            sx += 2.0 * bx
            su += 2.0 * bu
            x3 = x + 0.5 * h * k2
            k3 = model.f(x3, u)
            fx = model.jac_x(x3, u)
            cx = fx @ (eye + 0.5 * h * bx)
            cu = fx @ (0.5 * h * bu) + model.jac_u(x3, u)
            sx += 2.0 * cx
            su += 2.0 * cu
            x4 = x + h * k3
            k4 = model.f(x4, u)
            fx = model.jac_x(x4, u)
            sx += fx @ (eye + h * cx)
            su += fx @ (h * cu) + model.jac_u(x4, u)
            xn = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            return xn, eye + (h / 6.0) * sx, (h / 6.0) * su
    else:
        def f_disc(x, u):
            x = np.asarray(x, dtype=float)
            return x + h * model.f(x, np.asarray(u, dtype=float))

        def jac(x, u):
            x = np.asarray(x, dtype=float)
            u = np.asarray(u, dtype=float)
            xn = x + h * model.f(x, u)
            return xn, eye + h * model.jac_x(x, u), h * model.jac_u(x, u)

    return SystemModel(
        n_x=model.n_x, n_u=model.n_u, n_w=model.n_w, n_y=model.n_y,
        f=f_disc, h=model.h, continuous=False, dhdx=model.dhdx,
        sample_time=h, scheme=disc.scheme, disturbance_scale=float(disturbance_scale),
        name=model.name, _jac=jac,
    )


def _checked(x: Array) -> Array:
    if not np.all(np.isfinite(x)):
        raise IntegrationError("non-finite state produced during integration")
    return x


# --- plants -----------------------------------------------------------------------

def scalar_cubic_model(a: float = 1.0) -> SystemModel:
    """``dx/dt = a x^3 + u`` with ``y = x``."""
    if not a > 0:
        raise ValueError("a must be positive")
    a = float(a)

    def f(x, u):
        return a * x ** 3 + u

    def dfdx(x, u):
        return (3.0 * a * x ** 2)[..., None]

    def dfdu(x, u):
        return np.ones(np.shape(x) + (1,))

    def h(x):
        return np.asarray(x, dtype=float).copy()

    def dhdx(x):
        return np.ones(np.shape(x) + (1,))

    return SystemModel(n_x=1, n_u=1, n_w=1, n_y=1, f=f, h=h, continuous=True,
                       dfdx=dfdx, dfdu=dfdu, dhdx=dhdx, name=f"cubic(a={a:g})")


def van_der_pol_model(epsilon: float = 0.1) -> SystemModel:
    """Forced van der Pol oscillator with output ``(x1 + x2) / 2``."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    eps = float(epsilon)

    def f(x, u):
        x1 = x[..., 0]
        x2 = x[..., 1]
        shape = x.shape if u.shape[:-1] == x.shape[:-1] else np.broadcast_shapes(
            x.shape, u.shape[:-1] + (2,))
        out = np.empty(shape)
        out[..., 0] = eps * (1.0 - x2 * x2) * x1 - 2.0 * x2 + u[..., 0]
        out[..., 1] = 2.0 * x1
        return out

    def dfdx(x, u):
        x1 = x[..., 0]
        x2 = x[..., 1]
        out = np.zeros(np.shape(x) + (2,))
        out[..., 0, 0] = eps * (1.0 - x2 ** 2)
        out[..., 0, 1] = -2.0 * eps * x1 * x2 - 2.0
        out[..., 1, 0] = 2.0
        return out

    def dfdu(x, u):
        out = np.zeros(np.shape(x)[:-1] + (2, 1))
        out[..., 0, 0] = 1.0
        return out

    def h(x):
        return 0.5 * (x[..., 0:1] + x[..., 1:2])

    def dhdx(x):
        return np.full(np.shape(x)[:-1] + (1, 2), 0.5)

    return SystemModel(n_x=2, n_u=1, n_w=2, n_y=1, f=f, h=h, continuous=True,
                       dfdx=dfdx, dfdu=dfdu, dhdx=dhdx, name=f"vanderpol(eps={eps:g})")


def linear_model(A, B, C) -> SystemModel:
    """Discrete linear model ``x+ = A x + B u + w``, ``y = C x``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    nx, nu, ny = A.shape[0], B.shape[1], C.shape[0]
    if A.shape != (nx, nx) or B.shape[0] != nx or C.shape[1] != nx:
        raise ValueError("inconsistent linear model dimensions")

    def f(x, u):
        return x @ A.T + u @ B.T

    def jac(x, u):
        lead = np.shape(x)[:-1]
        return f(x, u), np.broadcast_to(A, lead + A.shape).copy(), np.broadcast_to(B, lead + B.shape).copy()

    return SystemModel(n_x=nx, n_u=nu, n_w=nx, n_y=ny, f=f, h=lambda x: x @ C.T,
                       dfdx=lambda x, u: np.broadcast_to(A, np.shape(x)[:-1] + A.shape),
                       dfdu=lambda x, u: np.broadcast_to(B, np.shape(x)[:-1] + B.shape),
                       dhdx=lambda x: np.broadcast_to(C, np.shape(x)[:-1] + C.shape),
                       name="linear", _jac=jac)


# --- noise ------------------------------------------------------------------------

@dataclass(frozen=True)
class Channel:
    kind: str  # "uniform" or "gaussian"
    a: float   # lower bound or mean
    b: float   # upper bound or standard deviation

    def __post_init__(self):
        if self.kind == "uniform":
            if self.a > self.b:
                raise ValueError(f"invalid uniform bounds: {self.a} > {self.b}")
        elif self.kind == "gaussian":
            if self.b < 0:
                raise ValueError("gaussian std must be non-negative")
        else:
            raise ValueError(f"unknown noise kind {self.kind!r}")

    @property
    def amplitude(self) -> float:
        """Spread of the law: interval width or standard deviation."""
        return float(self.b - self.a) if self.kind == "uniform" else float(self.b)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "a": self.a, "b": self.b}


@dataclass(frozen=True)
class NoiseSpec:
    channels: tuple
    seed: int = 0

    @classmethod
    def uniform(cls, a: float, b: float, dim: int = 1, seed: int = 0) -> "NoiseSpec":
        return cls(tuple(Channel("uniform", a, b) for _ in range(dim)), seed)

    @classmethod
    def gaussian(cls, mean: float, std: float, dim: int = 1, seed: int = 0) -> "NoiseSpec":
        return cls(tuple(Channel("gaussian", mean, std) for _ in range(dim)), seed)

    @property
    def dim(self) -> int:
        return len(self.channels)

    @property
    def amplitude(self) -> float:
        return max(c.amplitude for c in self.channels)

    def with_seed(self, seed: int) -> "NoiseSpec":
        return NoiseSpec(self.channels, seed)

    def to_dict(self) -> dict:
        return {"channels": [c.to_dict() for c in self.channels], "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpec":
        return cls(tuple(Channel(**c) for c in d["channels"]), int(d.get("seed", 0)))


def sample_noise(spec: NoiseSpec, n_steps: int,
                 rng: Optional[np.random.Generator] = None) -> Array:
    """Draw ``n_steps`` noise vectors, shape ``(n_steps, spec.dim)``.

    The sequence is a deterministic function of ``spec.seed`` unless an
    explicit generator is passed.
    """
    if n_steps < 0:
        raise ValueError("n_steps must be non-negative")
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    out = np.empty((n_steps, spec.dim))
    for i, ch in enumerate(spec.channels):
        if ch.kind == "uniform":
            out[:, i] = rng.uniform(ch.a, ch.b, size=n_steps)
        else:
            out[:, i] = rng.normal(ch.a, ch.b, size=n_steps)
    return out


def trial_generators(seed: int, trial: int, n: int = 2) -> Sequence[np.random.Generator]:
    """Independent per-trial generators derived from ``(seed, trial)``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(trial)])
    return [np.random.default_rng(s) for s in ss.spawn(n)]
