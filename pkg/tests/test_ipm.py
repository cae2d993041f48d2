import numpy as np
import pytest
import scipy.linalg as la
import scipy.sparse as sp
from scipy.optimize import minimize

from echocp.bench import bench_nfz5
from echocp.ipm import (LOG_HEADER, DenseNlp, SolverOptions, Status, WarmStart, initialize,
                        least_squares_multipliers, push_into_bounds, solve)
from echocp.kkt import LDLFactor, block_diagonal_inertia
from echocp.mesh import Mesh
from echocp.transcription import transcribe
from toys import bounded_square, circle_equality, linear_on_box, shifted_quadratic


def stationarity(nlp, sol):
    z = sol.z_star
    r = nlp.gradient(z) - sol.bound_lower + sol.bound_upper
    if nlp.n_eq:
        r = r + nlp.eq_jacobian(z).T @ sol.eq_multipliers
    if nlp.n_ineq:
        r = r + nlp.ineq_jacobian(z).T @ sol.ineq_multipliers
    return np.max(np.abs(r))


class TestAnalyticExamples:
    def test_bounded_square(self):
        sol = solve(bounded_square())
        assert sol.status is Status.OPTIMAL
        assert sol.z_star[0] == pytest.approx(1.0, abs=1e-6)
        assert sol.ineq_multipliers[0] == pytest.approx(2.0, abs=1e-5)
        assert sol.objective_value == pytest.approx(1.0, abs=1e-6)

    def test_unconstrained(self):
        sol = solve(shifted_quadratic())
        assert sol.ok
        np.testing.assert_allclose(sol.z_star, [2.0, 1.0], atol=1e-6)
        assert sol.eq_multipliers.size == 0 and sol.ineq_multipliers.size == 0
        assert sol.objective_value == pytest.approx(0.0, abs=1e-10)

    def test_linear_on_box(self):
        sol = solve(linear_on_box())
        assert sol.ok
        assert sol.z_star[0] == pytest.approx(3.0, abs=1e-6)
        assert sol.bound_upper[0] == pytest.approx(1.0, abs=1e-5)
        assert sol.bound_lower[0] == pytest.approx(0.0, abs=1e-5)

    def test_equality(self):
        sol = solve(circle_equality())
        assert sol.ok
        np.testing.assert_allclose(sol.z_star, [0.5, 0.5], atol=1e-6)
        assert sol.eq_multipliers[0] == pytest.approx(-1.0, abs=1e-5)

    @pytest.mark.parametrize("make", [bounded_square, shifted_quadratic, linear_on_box, circle_equality])
    def test_sign_convention(self, make):
        nlp = make()
        sol = solve(nlp)
        assert stationarity(nlp, sol) <= 1e-7
        assert np.all(sol.ineq_multipliers >= 0)
        assert np.all(sol.bound_lower >= 0) and np.all(sol.bound_upper >= 0)


class TestRandomConvexQp:
    @pytest.mark.parametrize("seed", range(6))
    def test_matches_reference_solver(self, seed):
        rng = np.random.default_rng(seed)
        n, me, mi = 5, 2, 4
        M = rng.normal(size=(n, n))
        Q = M @ M.T + 0.5 * np.eye(n)
        q = rng.normal(size=n)
        A, b = rng.normal(size=(me, n)), rng.normal(size=me)
        G = rng.normal(size=(mi, n))
        h = G @ np.linalg.lstsq(A, b, rcond=None)[0] + rng.uniform(-0.5, 1.0, size=mi)
        nlp = DenseNlp(n, lambda z: 0.5 * z @ Q @ z + q @ z, lambda z: Q @ z + q, lambda z: Q,
                       eq=lambda z: A @ z - b, eq_jac=lambda z: A, eq_hess=lambda z, lam: np.zeros((n, n)),
                       ineq=lambda z: G @ z - h, ineq_jac=lambda z: G, ineq_hess=lambda z, lam: np.zeros((n, n)))
        sol = solve(nlp)
        assert sol.ok
        ref = minimize(lambda z: 0.5 * z @ Q @ z + q @ z, np.zeros(n), jac=lambda z: Q @ z + q, method="SLSQP",
                       constraints=[{"type": "eq", "fun": lambda z: A @ z - b, "jac": lambda z: A},
                                    {"type": "ineq", "fun": lambda z: h - G @ z, "jac": lambda z: -G}],
                       options={"ftol": 1e-14, "maxiter": 500})
        assert ref.success
        np.testing.assert_allclose(sol.z_star, ref.x, atol=1e-6)
        assert stationarity(nlp, sol) <= 1e-7


class TestInitialize:
    def test_guess_on_bound_is_pushed(self):
        z = push_into_bounds(np.array([0.0, 5.0]), np.array([0.0, -10.0]), np.array([100.0, 5.0]), 1e-2, 1e-2)
        np.testing.assert_allclose(z, [0.01, 5.0 - 0.05])

    def test_interior_guess_unchanged(self):
        nlp = linear_on_box()
        pt = initialize(nlp, WarmStart(np.array([1.5])))
        assert pt.z[0] == 1.5

    def test_guess_outside_bounds_clipped_then_pushed(self):
        nlp = linear_on_box()
        opts = SolverOptions()
        pt = initialize(nlp, WarmStart(np.array([7.0])), opts)
        assert pt.z[0] == pytest.approx(3.0 - opts.slack_min * 3.0)

    def test_slacks_and_distances_positive(self, rng):
        nlp = bounded_square()
        opts = SolverOptions()
        for x in (0.0, 1.0, 1.0 + 1e-9, 4.0):
            pt = initialize(nlp, WarmStart(np.array([x])), opts)
            assert np.all(pt.s >= opts.slack_min)

    def test_least_squares_multiplier_inequality(self):
        _, lam = least_squares_multipliers(bounded_square(), np.array([1.0]))
        assert lam[0] == pytest.approx(2.0, abs=1e-6)

    def test_least_squares_multiplier_equality(self):
        lam, _ = least_squares_multipliers(circle_equality(), np.array([0.5, 0.5]))
        assert lam[0] == pytest.approx(-1.0, abs=1e-6)

    def test_guess_floored(self):
        opts = SolverOptions()
        pt = initialize(bounded_square(), WarmStart(np.array([1.0]), np.zeros(0), np.array([-3.0])), opts)
        assert pt.lam_ineq[0] == opts.mult_min


class TestSolverBehaviour:
    @pytest.mark.parametrize("make", [bounded_square, linear_on_box, circle_equality])
    def test_barrier_non_increasing_and_complementarity(self, make):
        nlp = make()
        opts = SolverOptions()
        sol = solve(nlp, opts=opts)
        assert all(b <= a for a, b in zip(sol.mu_history, sol.mu_history[1:]))
        bound = opts.tol_kkt * (1 + abs(sol.objective_value))
        assert np.all(np.abs(sol.ineq_multipliers * sol.slacks) <= bound)
        assert np.all(sol.slacks > 0)

    def test_max_iter(self):
        sol = solve(bounded_square(), opts=SolverOptions(max_iter=2))
        assert sol.status is Status.MAX_ITER
        assert sol.iteration_count == 2
        assert np.all(np.isfinite(sol.z_star))

    def test_infeasible(self):
        nlp = DenseNlp(1, lambda z: z[0] ** 2, lambda z: 2 * z, lambda z: np.array([[2.0]]),
                       ineq=lambda z: np.array([1.0 - z[0], z[0] + 1.0]),
                       ineq_jac=lambda z: np.array([[-1.0], [1.0]]), ineq_hess=lambda z, lam: np.zeros((1, 1)))
        sol = solve(nlp, opts=SolverOptions(max_iter=200))
        assert sol.status in (Status.INFEASIBLE, Status.RESTORATION_FAILED)

    def test_log_lines(self):
        lines = []
        sol = solve(bounded_square(), opts=SolverOptions(log_callback=lines.append))
        assert lines == sol.log_lines
        assert lines[0] == LOG_HEADER
        width = len(LOG_HEADER.split("\t"))
        assert all(len(line.split("\t")) == width for line in lines[1:])
        assert [int(line.split("\t")[0]) for line in lines[1:]] == list(range(len(lines) - 1))

    def test_nonconvex_with_finite_difference_hessian(self):
        """Rosenbrock inside a disc, Hessians by differences."""
        nlp = DenseNlp(2, lambda z: (1 - z[0]) ** 2 + 100 * (z[1] - z[0] ** 2) ** 2,
                       lambda z: np.array([-2 * (1 - z[0]) - 400 * z[0] * (z[1] - z[0] ** 2),
                                           200 * (z[1] - z[0] ** 2)]),
                       ineq=lambda z: np.array([z @ z - 1.5]), ineq_jac=lambda z: np.atleast_2d(2 * z),
                       x0=[-1.0, 0.5])
        sol = solve(nlp)
        assert sol.ok
        ref = minimize(nlp.objective, [-1.0, 0.5], method="SLSQP",
                       constraints=[{"type": "ineq", "fun": lambda z: 1.5 - z @ z}], options={"ftol": 1e-14})
        assert sol.objective_value == pytest.approx(ref.fun, abs=1e-6)


class TestWarmStartEconomy:
    def test_bench_resolve_from_own_solution(self):
        prob, _, _ = bench_nfz5()
        nlp = transcribe(prob, Mesh.uniform(16))
        first = solve(nlp)
        assert first.ok
        again = solve(nlp, WarmStart.from_solution(first), SolverOptions(slack_min=1e-6, bound_frac=1e-6))
        assert again.ok
        assert again.iteration_count <= 5
        assert again.objective_value == pytest.approx(first.objective_value, rel=1e-8)


class TestInertia:
    @pytest.mark.parametrize("seed", range(5))
    def test_quasi_definite(self, seed):
        rng = np.random.default_rng(seed)
        n, m = 8, 3
        M = rng.normal(size=(n, n))
        H = M @ M.T + np.eye(n)
        J = rng.normal(size=(m, n))
        A = np.block([[H, J.T], [J, -1e-3 * np.eye(m)]])
        F = LDLFactor(sp.csc_matrix(A))
        ev = np.linalg.eigvalsh(A)
        assert F.inertia == (int(np.sum(ev > 0)), int(np.sum(ev < 0)), 0) == (n, m, 0)
        b = rng.normal(size=n + m)
        np.testing.assert_allclose(A @ F.solve(b), b, atol=1e-10)

    @pytest.mark.parametrize("seed", range(5))
    def test_block_diagonal(self, seed):
        rng = np.random.default_rng(seed)
        M = rng.normal(size=(9, 9))
        A = M + M.T
        _, D, _ = la.ldl(A)
        ev = np.linalg.eigvalsh(A)
        assert block_diagonal_inertia(D) == (int(np.sum(ev > 0)), int(np.sum(ev < 0)), 0)

    def test_refined_solve(self, rng):
        A = sp.csc_matrix(np.diag([1.0, 2.0, 3.0]))
        near = sp.csc_matrix(np.diag([1.0 + 1e-6, 2.0, 3.0]))
        x, res = LDLFactor(near).refined_solve(A, np.array([1.0, 1.0, 1.0]))
        np.testing.assert_allclose(x, [1.0, 0.5, 1.0 / 3.0], atol=1e-12)
        assert res <= 1e-12
