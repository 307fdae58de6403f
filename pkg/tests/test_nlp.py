import numpy as np
import pytest

from simul_ecmpc.costs import ArrivalCost, QuadraticWeights
from simul_ecmpc.ecmpc import WindowBuffer, build_problem
from simul_ecmpc.nlp import (NlpProblem, NumericalFailure, SolveOptions, finite_diff_gradient,
                             finite_diff_jacobian, grid_oracle, solve)
from simul_ecmpc.scenarios import example1_config, example1_model


def _scalar(residual, lo, hi, jac=None):
    return NlpProblem.from_functions(residual, lo, hi, jac)


def test_clipped_unconstrained_optimum():
    p = _scalar(lambda z: z - 1.0, [-0.5], [0.5], lambda z: np.eye(1))
    res = solve(p, SolveOptions(), z0=[[0.0]])
    assert res.z[0, 0] == 0.5
    assert res.objective[0] == pytest.approx(0.25)
    assert res.converged[0]


def test_linear_least_squares_matches_normal_equations():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(8, 4))
    b = rng.normal(size=8)
    p = _scalar(lambda z: A @ z - b, np.full(4, -np.inf), np.full(4, np.inf), lambda z: A)
    res = solve(p, SolveOptions(), z0=np.zeros((1, 4)))
    ref = np.linalg.solve(A.T @ A, A.T @ b)
    assert np.max(np.abs(res.z[0] - ref)) < 1e-8


def test_rosenbrock_converges():
    def r(z):
        return np.array([10.0 * (z[1] - z[0] ** 2), 1.0 - z[0]])

    def J(z):
        return np.array([[-20.0 * z[0], 10.0], [-1.0, 0.0]])

    p = _scalar(r, [-2.0, -2.0], [2.0, 2.0], J)
    res = solve(p, SolveOptions(max_iterations=200), z0=[[-1.2, 1.0]])
    assert np.allclose(res.z[0], [1.0, 1.0], atol=1e-6)


def test_solution_feasible_and_monotone():
    rng = np.random.default_rng(3)
    for _ in range(20):
        c = rng.normal(size=3) * 2
        p = _scalar(lambda z: np.concatenate([z - c, [z[0] * z[1] - 0.3]]), -np.ones(3), np.ones(3))
        z0 = rng.uniform(-3, 3, size=(1, 3))  # infeasible start gets projected
        res = solve(p, SolveOptions(), z0=z0)
        assert np.all(res.z >= -1) and np.all(res.z <= 1)
        assert res.objective[0] <= res.initial_objective[0]


def test_batched_rows_solve_independently():
    targets = np.array([[0.2], [-3.0], [0.7]])

    def jac(z, rows):
        return z - targets[rows], np.ones((z.shape[0], 1, 1))

    p = NlpProblem(jacobian=jac, lower=np.full((3, 1), -1.0), upper=np.full((3, 1), 1.0))
    res = solve(p, SolveOptions(), z0=np.zeros((3, 1)))
    assert np.allclose(res.z[:, 0], [0.2, -1.0, 0.7])


def test_numerical_failure_raises_with_iterate():
    p = _scalar(lambda z: np.array([np.nan]) * z, [-1.0], [1.0], lambda z: np.ones((1, 1)))
    with pytest.raises(NumericalFailure) as err:
        solve(p, SolveOptions(), z0=[[0.5]])
    assert err.value.iterate is not None
    res = solve(p, SolveOptions(raise_on_failure=False), z0=[[0.5]])
    assert res.failed[0]


def test_solve_options_validation():
    with pytest.raises(ValueError):
        SolveOptions(gradient_tol=0.0)
    with pytest.raises(ValueError):
        SolveOptions(contraction=1.0)
    with pytest.raises(ValueError):
        SolveOptions(max_iterations=-1)
    with pytest.raises(ValueError):
        NlpProblem(jacobian=None, lower=[1.0], upper=[0.0])


def test_grid_oracle_examples():
    z, f = grid_oracle(_scalar(lambda z: z, [-1.0], [1.0]), 0.1)
    assert abs(z[0]) < 1e-12 and f < 1e-24
    z, _ = grid_oracle(_scalar(lambda z: z - 0.33, [-1.0], [1.0]), 0.01)
    assert abs(z[0] - 0.33) <= 0.01 + 1e-12
    with pytest.raises(ValueError):
        grid_oracle(_scalar(lambda z: z, -np.ones(5), np.ones(5)), 0.5)
    with pytest.raises(ValueError):
        grid_oracle(_scalar(lambda z: z, [-np.inf], [1.0]), 0.5)


def test_minmax_alternation_raises_inner_maximum():
    # min_x max_w (x - 1)^2 + 2 w^2 - w^2: convex in w, so the maximizer sits on the bound
    def jac(z, rows):
        r = np.stack([z[:, 0] - 1.0, np.sqrt(2.0) * z[:, 1]], axis=1)
        J = np.tile(np.diag([1.0, np.sqrt(2.0)]), (z.shape[0], 1, 1))
        return r, J

    def concave(z, rows):
        return z[:, 1] ** 2, np.stack([np.zeros(len(z)), 2.0 * z[:, 1]], axis=1)

    p = NlpProblem(jacobian=jac, lower=[[-2.0, -0.5]], upper=[[2.0, 0.5]], concave=concave,
                   ascent_mask=np.array([False, True]))
    res = solve(p, SolveOptions(), z0=[[0.0, 0.1]])
    assert res.z[0, 0] == pytest.approx(1.0, abs=1e-6)
    assert res.z[0, 1] == pytest.approx(0.5)
    assert res.objective[0] == pytest.approx(0.25, abs=1e-10)


UNIT = QuadraticWeights(Qe=1.0, Re=1.0, Qc=1.0, Rc=1.0, Sc=1.0)


def _one_step_cubic(y, prior, weights=None, u_applied=0.0):
    model = example1_model()
    cfg = example1_config("tight", N_e=1, N_c=1)
    if weights is not None:
        cfg = cfg.with_(weights=weights)
    buf = WindowBuffer(y=np.array([[y[0]], [y[1]]]), u=np.array([[u_applied]]),
                       arrival=ArrivalCost(mean=[prior], P=1.0), k=1)
    return build_problem(model, cfg, buf)


@pytest.mark.parametrize("y,prior", [((0.3, 0.35), 0.0), ((-0.5, -0.4), 0.2), ((0.7, 0.75), -0.3)])
def test_cubic_one_step_joint_problem_matches_grid(y, prior):
    prob = _one_step_cubic(y, prior, UNIT)
    assert prob.layout.n == 3
    res = 0.01
    zg, fg = grid_oracle(prob.nlp, res)
    out = solve(prob.nlp, SolveOptions(), z0=np.zeros((1, 3)))
    assert abs(fg - out.objective[0]) <= 10 * res ** 2


def test_cubic_one_step_example_weights_never_worse_than_grid():
    # with Re = 1e3 the grid's own quantization error exceeds 10 res^2, so only
    # the one-sided comparison is informative
    prob = _one_step_cubic((0.3, 0.35), 0.0)
    zg, fg = grid_oracle(prob.nlp, 0.01)
    out = solve(prob.nlp, SolveOptions(), z0=np.zeros((1, 3)))
    assert out.objective[0] <= fg + 1e-12


def test_window_jacobian_matches_finite_differences():
    prob = _one_step_cubic((0.3, 0.35), 0.1)
    rng = np.random.default_rng(4)
    for _ in range(100):
        z = rng.uniform(prob.lower[0], prob.upper[0])
        r, J = prob.nlp.jacobian(z[None], np.array([0]))
        Jfd = finite_diff_jacobian(lambda v: prob.nlp.residual(v[None], np.array([0]))[0], z)
        assert np.allclose(J[0], Jfd, rtol=1e-5, atol=1e-5)


def test_finite_diff_gradient_examples():
    assert np.allclose(finite_diff_gradient(lambda z: z @ z, [1.0, 2.0]), [2.0, 4.0], atol=1e-6)
    assert finite_diff_gradient(lambda z: z[0] ** 3, [1.0], h=1e-5)[0] == pytest.approx(3.0, abs=1e-6)
    assert np.array_equal(finite_diff_gradient(lambda z: 7.0, [1.0, 2.0, 3.0]), np.zeros(3))
    with pytest.raises(NumericalFailure):
        finite_diff_gradient(lambda z: np.inf, [0.0])
