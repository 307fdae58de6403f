"""Ready-made setups for the scalar cubic and van der Pol examples."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .costs import QuadraticWeights
from .dynamics import (BoxSet, Discretization, NoiseSpec, SystemModel, discretize,
                       scalar_cubic_model, van_der_pol_model)
from .ecmpc import EcmpcConfig
from .nlp import SolveOptions

SAMPLE_TIME = 0.1
# In the scalar example the additive disturbance is treated as a rate inside
# the sample period (see README); the oscillator example keeps the library
# default of 1.
EX1_DISTURBANCE_SCALE = SAMPLE_TIME
EX2_DISTURBANCE_SCALE = 1.0

EX1_X0 = 0.766
EX1_PRIOR = -2.5
EX1_X_MAX = 0.8
EX1_MU = 0.05
EX1_A = 1.0
EX1_G = 3.0 * EX1_X_MAX ** 3
EX1_K_MIN = 0.7326

EX2_NE = (2, 5, 10, 20)
EX2_NC = (5, 10, 35)
EX2_PHI = {2: 0.95, 5: 0.95, 10: 0.85, 20: 0.65}
EX2_X0 = (1.0, 1.0)
EX2_PRIOR = (0.0, 0.0)


def default_solver() -> SolveOptions:
    return SolveOptions(max_iterations=100, gradient_tol=1e-8, step_tol=1e-10,
                        raise_on_failure=False)


@dataclass
class Scenario:
    """Model, controller configuration, initial data and noise of one experiment."""

    name: str
    model: SystemModel
    cfg: EcmpcConfig
    x0: np.ndarray
    prior: np.ndarray
    w_spec: NoiseSpec
    v_spec: NoiseSpec
    n_steps: int
    info: dict = field(default_factory=dict)

    @property
    def noise_amplitude(self) -> float:
        return max(self.w_spec.amplitude, self.v_spec.amplitude)


def example1_model(sample_time: float = SAMPLE_TIME, scheme: str = "RK4",
                   disturbance_scale: float = EX1_DISTURBANCE_SCALE) -> SystemModel:
    return discretize(scalar_cubic_model(EX1_A), Discretization(sample_time, scheme), disturbance_scale)


def example1_config(regime: str = "nominal", N_e: int = 30, N_c: int = 10, phi: float = 0.5,
                    solver: Optional[SolveOptions] = None, **kw) -> EcmpcConfig:
    """Controller setup of the scalar example; ``regime`` is ``nominal`` or ``tight``."""
    W = QuadraticWeights(Qe=15.0, Re=1e3, Qc=5.0, Rc=5.0, Sc=5.0)
    X = BoxSet.symmetric([EX1_X_MAX])
    if regime == "nominal":
        U = BoxSet.symmetric([2.5])
        Wb = BoxSet.unbounded(1)
        V = BoxSet.unbounded(1)
    elif regime == "tight":
        U = BoxSet.symmetric([0.6])
        Wb = BoxSet.symmetric([0.4])
        V = BoxSet.symmetric([0.8])
    else:
        raise ValueError(f"unknown regime {regime!r}")
    return EcmpcConfig(N_e=N_e, N_c=N_c, phi=phi, weights=W, X=X, U=U, W=Wb, V=V,
                       arrival_P0=1e5, solver=solver or default_solver(), **kw)


def example1_noise(regime: str = "nominal"):
    if regime == "nominal":
        return NoiseSpec.uniform(0.0, 0.01), NoiseSpec.gaussian(0.0, 0.02)
    if regime == "tight":
        return NoiseSpec.uniform(0.0, 0.1), NoiseSpec.gaussian(0.0, 0.2)
    raise ValueError(f"unknown regime {regime!r}")


def example1(regime: str = "nominal", N_e: int = 30, N_c: int = 10, x0: float = EX1_X0,
             prior: float = EX1_PRIOR, n_steps: int = 100, sample_time: float = SAMPLE_TIME,
             disturbance_scale: float = EX1_DISTURBANCE_SCALE, **kw) -> Scenario:
    w, v = example1_noise(regime)
    return Scenario(
        name=f"example1-{regime}", model=example1_model(sample_time, disturbance_scale=disturbance_scale),
        cfg=example1_config(regime, N_e, N_c, **kw), x0=np.array([x0], dtype=float),
        prior=np.array([prior], dtype=float), w_spec=w, v_spec=v, n_steps=n_steps,
        info={"regime": regime, "a": EX1_A, "g": EX1_G, "mu": EX1_MU})


def example2_model(epsilon: float = 0.1, sample_time: float = SAMPLE_TIME, scheme: str = "RK4",
                   disturbance_scale: float = EX2_DISTURBANCE_SCALE) -> SystemModel:
    return discretize(van_der_pol_model(epsilon), Discretization(sample_time, scheme), disturbance_scale)


def example2_config(N_e: int = 10, N_c: int = 10, phi: Optional[float] = None,
                    solver: Optional[SolveOptions] = None, **kw) -> EcmpcConfig:
    """Controller setup of the oscillator example; ``phi`` defaults to the horizon mapping."""
    if phi is None:
        if N_e not in EX2_PHI:
            raise ValueError(f"no default phi for N_e={N_e}; pass phi explicitly")
        phi = EX2_PHI[N_e]
    W = QuadraticWeights(Qe=np.diag([50.0, 50.0]), Re=150.0, Qc=np.diag([200.0, 200.0]),
                         Rc=1e-2, Sc=np.diag([200.0, 200.0]))
    return EcmpcConfig(N_e=N_e, N_c=N_c, phi=phi, weights=W, X=BoxSet.symmetric([5.0, 5.0]),
                       U=BoxSet.symmetric([5.0], rate=[2.0]), W=BoxSet.unbounded(2),
                       V=BoxSet.unbounded(1), arrival_P0=1e5, solver=solver or default_solver(), **kw)


def example2_noise():
    return NoiseSpec.uniform(0.0, 0.25, dim=2), NoiseSpec.uniform(0.0, 0.025)


def example2(epsilon: float = 0.1, N_e: int = 10, N_c: int = 10, phi: Optional[float] = None,
             x0=EX2_X0, prior=EX2_PRIOR, n_steps: int = 200, sample_time: float = SAMPLE_TIME,
             disturbance_scale: float = EX2_DISTURBANCE_SCALE, **kw) -> Scenario:
    w, v = example2_noise()
    return Scenario(
        name=f"example2-eps{epsilon:g}", model=example2_model(epsilon, sample_time,
                                                               disturbance_scale=disturbance_scale),
        cfg=example2_config(N_e, N_c, phi, **kw), x0=np.asarray(x0, dtype=float),
        prior=np.asarray(prior, dtype=float), w_spec=w, v_spec=v, n_steps=n_steps,
        info={"epsilon": epsilon})
