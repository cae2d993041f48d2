import numpy as np
import pytest

from echocp.bench import BenchProblemSpec, NoFlyZone, bench_nfz5
from echocp.mesh import Mesh, MeshError
from echocp.transcription import ALL, NONE, ActivationFilter, defect_residuals, nlp_jacobians, transcribe
from oracles import central_difference_jacobian, hs_node_times
from toys import double_integrator, random_interior, scalar_problem

BENCH_VARIANTS = {
    "nfz5": {},
    "one_zone": {"zones": (NoFlyZone(5.0, 0.0, 1.0),)},
    "no_zones": {"zones": ()},
}


class TestMesh:
    def test_node_count(self):
        for K in (1, 3, 10):
            assert Mesh.uniform(K).N == 2 * K + 1

    def test_node_times_match_enumeration(self):
        b = np.array([0.0, 0.1, 0.5, 1.0])
        np.testing.assert_allclose(Mesh(b).node_times(2.0, 4.0), hs_node_times(3, 2.0, 4.0, b))

    @pytest.mark.parametrize("b", [[0.0, 0.5, 0.5, 1.0], [0.1, 1.0], [0.0, 0.9], [0.0]])
    def test_invalid(self, b):
        with pytest.raises(MeshError):
            Mesh(np.array(b))

    def test_simpson_weights_integrate_cubics(self):
        mesh = Mesh(np.array([0.0, 0.2, 0.7, 1.0]))
        tau = mesh.tau
        assert mesh.simpson_weights() @ tau ** 3 == pytest.approx(0.25, abs=1e-15)


class TestFilterCounts:
    def test_all(self, bench):
        prob, _, _ = bench
        nlp = transcribe(prob, Mesh.uniform(12), ActivationFilter.all(5, prob.horizon))
        assert nlp.n_ineq == prob.n_path * nlp.mesh.N

    def test_none(self, bench):
        prob, _, _ = bench
        nlp = transcribe(prob, Mesh.uniform(12), ActivationFilter.none(5, prob.horizon))
        assert nlp.n_ineq == 0
        assert nlp.ineq_jacobian(nlp.initial_point()).shape == (0, nlp.n)

    def test_half_horizon_one_zone(self, bench):
        prob, _, _ = bench
        K = 40
        half = prob.tf / 2
        entries = {l: NONE for l in range(5)}
        entries[2] = ((prob.t0, half),)
        nlp = transcribe(prob, Mesh.uniform(K), ActivationFilter(entries, prob.horizon))
        times = hs_node_times(K, prob.t0, prob.tf)
        expected = int(np.sum(times <= half))
        assert nlp.n_ineq == expected == K + 1
        assert set(nlp.row_constraint.tolist()) == {2}
        assert np.all(nlp.row_times() <= half)

    def test_row_map_bijective(self, bench, rng):
        prob, _, _ = bench
        entries = {0: ((1.0, 3.0), (6.0, 7.5)), 1: ALL, 2: NONE, 3: ((0.0, 0.0),), 4: ((9.9, 10.0),)}
        nlp = transcribe(prob, Mesh.uniform(20), ActivationFilter(entries, prob.horizon))
        pairs = list(zip(nlp.row_constraint.tolist(), nlp.row_node.tolist()))
        assert len(pairs) == len(set(pairs))
        times = nlp.node_times()
        for l in range(5):
            nodes = [i for (c, i) in pairs if c == l]
            want = [i for i, t in enumerate(times)
                    if any(a - 1e-12 <= t <= b + 1e-12 for a, b in nlp.filter.intervals(l))]
            assert nodes == want
        z = random_interior(nlp, rng)
        X, U, p, _, _ = nlp.unpack(z)
        C = prob._c.value(X, U, times, p)
        np.testing.assert_allclose(nlp.ineq_constraints(z), C[nlp.row_node, nlp.row_constraint])

    def test_closed_interval_membership(self, bench):
        prob, _, _ = bench
        entries = {l: NONE for l in range(5)}
        entries[0] = ((2.5, 5.0),)
        nlp = transcribe(prob, Mesh.uniform(4), ActivationFilter(entries, prob.horizon))
        np.testing.assert_allclose(nlp.row_times(), [2.5, 3.75, 5.0])

    def test_unknown_index(self, bench):
        prob, _, _ = bench
        entries = {l: ALL for l in range(6)}
        with pytest.raises(ValueError):
            transcribe(prob, Mesh.uniform(4), ActivationFilter(entries, prob.horizon))

    def test_empty_mesh(self, bench):
        prob, _, _ = bench
        with pytest.raises(MeshError):
            transcribe(prob, None)

    def test_filter_outside_horizon(self):
        with pytest.raises(ValueError):
            ActivationFilter({0: ((-1.0, 2.0),)}, (0.0, 10.0))

    def test_filter_merges_and_canonicalizes(self):
        f = ActivationFilter({0: ((4.0, 6.0), (1.0, 2.0), (5.0, 7.0)), 1: ((0.0, 10.0),), 2: ()}, (0.0, 10.0))
        assert f[0] == ((1.0, 2.0), (4.0, 7.0))
        assert f[1] == ALL
        assert f[2] == NONE
        assert ActivationFilter.from_dict(f.to_dict(), f.horizon) == f


class TestDefects:
    def test_constant_solution(self):
        prob = scalar_problem(lambda x, u, t: 0.0 * x[..., 0:1])
        nlp = transcribe(prob, Mesh.uniform(7))
        z = nlp.layout.pack(np.full((nlp.mesh.N, 1), 3.0), np.zeros((nlp.mesh.N, 1)))
        np.testing.assert_array_equal(defect_residuals(nlp, z), 0.0)

    @pytest.mark.parametrize("seed", range(3))
    def test_linear_solution_any_mesh(self, seed):
        rng = np.random.default_rng(seed)
        prob = scalar_problem(lambda x, u, t: np.ones_like(x), t0=0.5, tf=3.0)
        b = np.concatenate([[0.0], np.sort(rng.uniform(size=6)), [1.0]])
        nlp = transcribe(prob, Mesh(b))
        t = nlp.node_times()
        z = nlp.layout.pack(t[:, None], np.zeros((t.size, 1)))
        assert np.max(np.abs(defect_residuals(nlp, z))) <= 1e-12

    def test_exponential(self):
        prob = scalar_problem(lambda x, u, t: x)
        nlp = transcribe(prob, Mesh.uniform(10))
        t = nlp.node_times()
        z = nlp.layout.pack(np.exp(t)[:, None], np.zeros((t.size, 1)))
        assert np.max(np.abs(defect_residuals(nlp, z))) <= 1e-6

    @pytest.mark.parametrize("seed", range(5))
    def test_polynomial_exactness(self, seed):
        """Cubic states driven by quadratic inputs satisfy the defects on any mesh."""
        rng = np.random.default_rng(seed)
        a = rng.normal(size=4)
        prob = double_integrator(t0=-1.0, tf=2.0)
        b = np.concatenate([[0.0], np.sort(rng.uniform(size=5)), [1.0]])
        nlp = transcribe(prob, Mesh(b))
        t = nlp.node_times()
        x1 = a[0] + a[1] * t + a[2] * t ** 2 + a[3] * t ** 3
        x2 = a[1] + 2 * a[2] * t + 3 * a[3] * t ** 2
        u = 2 * a[2] + 6 * a[3] * t
        z = nlp.layout.pack(np.stack([x1, x2], axis=1), u[:, None])
        assert np.max(np.abs(defect_residuals(nlp, z))) <= 1e-12

    def test_time_dependent_quadratic_input(self):
        prob = scalar_problem(lambda x, u, t: u, t0=0.0, tf=2.0)
        nlp = transcribe(prob, Mesh(np.array([0.0, 0.3, 1.0])))
        t = nlp.node_times()
        z = nlp.layout.pack((t ** 3 / 3 - t)[:, None], (t ** 2 - 1)[:, None])
        assert np.max(np.abs(defect_residuals(nlp, z))) <= 1e-12

    def test_layout_check(self):
        nlp = transcribe(scalar_problem(lambda x, u, t: x), Mesh.uniform(2))
        with pytest.raises(ValueError):
            defect_residuals(nlp, np.zeros(nlp.n + 1))


class TestObjective:
    def test_quadratic_objective_gradient(self, rng):
        """Lagrange cost u^2/2 on [0,1]: gradient is the input weighted by Simpson weights."""
        prob = scalar_problem(lambda x, u, t: u, lagrange_cost=lambda x, u, t, p: 0.5 * u[..., 0] ** 2)
        nlp = transcribe(prob, Mesh.uniform(5))
        z = rng.normal(size=nlp.n)
        g = nlp.gradient(z)
        U = z[nlp.layout.u_idx]
        np.testing.assert_allclose(g[nlp.layout.u_idx].ravel(), nlp.quadrature_weights * U.ravel(), atol=1e-12)
        np.testing.assert_allclose(g[nlp.layout.x_idx], 0.0, atol=1e-12)

    def test_simpson_integral(self):
        prob = scalar_problem(lambda x, u, t: u, lagrange_cost=lambda x, u, t, p: t ** 3, t0=1.0, tf=3.0)
        nlp = transcribe(prob, Mesh(np.array([0.0, 0.4, 1.0])))
        assert nlp.objective(nlp.initial_point()) == pytest.approx((3 ** 4 - 1) / 4, rel=1e-14)

    def test_linear_dynamics_constant_jacobian(self, rng):
        prob = double_integrator()
        nlp = transcribe(prob, Mesh.uniform(6))
        J1 = nlp.eq_jacobian(rng.normal(size=nlp.n)).toarray()
        J2 = nlp.eq_jacobian(rng.normal(size=nlp.n)).toarray()
        # the toy has no analytic Jacobian, so entries carry difference roundoff
        np.testing.assert_allclose(J1, J2, atol=1e-9)


@pytest.mark.parametrize("variant", sorted(BENCH_VARIANTS))
class TestBenchDerivatives:
    def test_jacobians_match_central_differences(self, variant):
        prob, _, _ = bench_nfz5(BENCH_VARIANTS[variant], BenchProblemSpec())
        nlp = transcribe(prob, Mesh.uniform(6))
        rng = np.random.default_rng(7)
        for _ in range(10):
            z = random_interior(nlp, rng)
            g, Je, Ji = nlp_jacobians(nlp, z)
            np.testing.assert_allclose(g, central_difference_jacobian(nlp.objective, z)[0], atol=1e-6)
            np.testing.assert_allclose(Je.toarray(), central_difference_jacobian(nlp.eq_constraints, z), atol=1e-6)
            if nlp.n_ineq:
                np.testing.assert_allclose(Ji.toarray(), central_difference_jacobian(nlp.ineq_constraints, z),
                                           atol=1e-6)

    def test_sparsity_pattern_is_superset(self, variant):
        prob, _, _ = bench_nfz5(BENCH_VARIANTS[variant], BenchProblemSpec())
        nlp = transcribe(prob, Mesh.uniform(5))
        pattern = nlp.jacobian_structure()
        rng = np.random.default_rng(3)
        for name, fun in (("eq", nlp.eq_constraints), ("ineq", nlp.ineq_constraints)):
            declared = np.zeros((len(fun(nlp.initial_point())), nlp.n), dtype=bool)
            declared[pattern[name]] = True
            for _ in range(3):
                J = central_difference_jacobian(fun, random_interior(nlp, rng))
                assert not np.any((np.abs(J) > 1e-9) & ~declared)

    def test_hessian_matches_gradient_differences(self, variant):
        prob, _, _ = bench_nfz5(BENCH_VARIANTS[variant], BenchProblemSpec())
        nlp = transcribe(prob, Mesh.uniform(4))
        rng = np.random.default_rng(11)
        z = random_interior(nlp, rng)
        le, li = rng.normal(size=nlp.n_eq), rng.uniform(size=nlp.n_ineq)

        def lagrangian_grad(w):
            return nlp.gradient(w) + nlp.eq_jacobian(w).T @ le + nlp.ineq_jacobian(w).T @ li

        H = nlp.hessian(z, le, li).toarray()
        H = H + np.tril(H, -1).T if np.allclose(np.triu(H, 1), 0) else H
        np.testing.assert_allclose(H, central_difference_jacobian(lagrangian_grad, z), atol=1e-6)
