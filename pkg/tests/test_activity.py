import numpy as np
import pytest

from echocp.activity import (ActivityConfig, MultiplierField, SetStatus, buffer_intervals, classify,
                             default_penalty, detect_changepoints, node_runs, normalize, normalize_values,
                             segmentation_cost)
from echocp.bench import BenchProblemSpec, NoFlyZone, bench_nfz5, build_problem, straight_line_crossings
from echocp.interp import DiscreteSolution, interpolate
from echocp.ipm import solve
from echocp.mesh import Mesh
from echocp.transcription import ALL, NONE, transcribe
from oracles import brute_force_segmentation, optimal_partitioning, penalized_cost
from toys import activity_report

EPS_TOL = 1e-4


def pass_solution(east, multipliers=None, K=10, zones=((5.0, 0.0, 1.0),), rows=None):
    """Straight constant-speed pass north along ``east`` with given path-row multipliers."""
    spec = BenchProblemSpec(zones=tuple(NoFlyZone(*z) for z in zones), start=(0.0, east), goal=(10.0, east))
    prob = build_problem(spec)
    mesh = Mesh.uniform(K)
    t = mesh.node_times(0.0, 10.0)
    X = np.stack([t, np.full_like(t, east), np.ones_like(t), np.zeros_like(t)], axis=1)
    F = np.stack([np.ones_like(t), np.zeros_like(t), np.zeros_like(t), np.zeros_like(t)], axis=1)
    ng = len(zones)
    if rows is None:
        rc = np.repeat(np.arange(ng), mesh.N)
        rn = np.tile(np.arange(mesh.N), ng)
    else:
        rc, rn = rows
    lam = np.zeros(rc.size) if multipliers is None else np.asarray(multipliers, float)
    sol = DiscreteSolution(mesh, X, np.zeros((t.size, 2)), np.zeros(0), 0.0, 10.0, F, rc, rn, lam)
    return prob, sol


class TestNormalize:
    def test_examples(self):
        np.testing.assert_allclose(normalize_values([0, 2, 4]), [0, 0.5, 1])
        np.testing.assert_array_equal(normalize_values([3.0, 3.0, 3.0]), [0, 0, 0])
        np.testing.assert_allclose(normalize_values([1e-9, 3e-9, 5e-9]), [0, 0.5, 1])

    def test_field(self):
        f = MultiplierField([[0.0, 1.0, 2.0], [0.5]], [[1.0, 2.0, 3.0], [7.0]])
        out = normalize(f)
        np.testing.assert_allclose(out[0], [0, 0.5, 1])
        np.testing.assert_array_equal(out[1], [0])

    def test_field_validation(self):
        with pytest.raises(ValueError):
            MultiplierField([[1.0, 0.0]], [[1.0, 1.0]])
        with pytest.raises(ValueError):
            MultiplierField([[0.0, 1.0]], [[1.0, -1.0]])


class TestChangepoints:
    def test_step(self):
        y = np.r_[np.zeros(50), np.ones(50)]
        assert detect_changepoints(y, 0.5) == [50]

    def test_staircase(self):
        y = np.r_[np.zeros(40), np.full(40, 0.5), np.ones(40)]
        assert detect_changepoints(y, 0.5) == [40, 80]

    @pytest.mark.parametrize("penalty", [1e-6, 0.1, 5.0])
    def test_constant(self, penalty):
        assert detect_changepoints(np.full(30, 0.7), penalty) == []

    def test_short(self):
        assert detect_changepoints([0.3], 0.1) == []

    def test_hidden_middle_level(self):
        """A raised middle block with equal ends needs the two-split look-ahead."""
        y = np.r_[np.zeros(20), np.ones(10), np.zeros(20)]
        assert detect_changepoints(y, 0.5) == [20, 30]

    def test_oracle_self_check(self):
        rng = np.random.default_rng(99)
        for _ in range(20):
            y = rng.uniform(size=rng.integers(2, 9))
            pen = rng.uniform(0.01, 0.3)
            assert optimal_partitioning(y, pen)[0] == pytest.approx(brute_force_segmentation(y, pen)[0], abs=1e-12)

    def test_bounded_suboptimality(self):
        rng = np.random.default_rng(2024)
        for _ in range(100):
            n = int(rng.integers(2, 31))
            levels = rng.uniform(size=rng.integers(1, 5))
            y = np.clip(np.repeat(levels, -(-n // levels.size))[:n] + rng.normal(0, 0.1, n), 0, None)
            pen = float(rng.choice([default_penalty(y), 0.05, 0.5]))
            opt, _ = optimal_partitioning(y, pen)
            cps = detect_changepoints(y, pen)
            assert cps == sorted(set(cps)) and all(0 < k < n for k in cps)
            got = segmentation_cost(y, cps, pen)
            assert got == pytest.approx(penalized_cost(y, cps, pen), abs=1e-9)
            assert got <= opt + pen + 1e-9

    def test_default_penalty(self):
        y = np.r_[np.zeros(5), np.ones(5)]
        assert default_penalty(y) == pytest.approx(0.1 * 10 * 0.25)


class TestClassify:
    def test_feasible_small_multipliers_redundant(self):
        prob, sol = pass_solution(east=3.0)
        rep = classify(prob, sol, interpolate(sol))
        assert rep.set_status == {0: SetStatus.REDUNDANT}
        assert not rep.node_active.any()
        assert rep.intervals == [[]]

    def test_near_boundary_node_active_by_violation(self):
        east = np.sqrt(1.0 + EPS_TOL / 2)
        prob, sol = pass_solution(east=east)
        rep = classify(prob, sol, interpolate(sol), ActivityConfig(eps_c_tol=EPS_TOL))
        i5 = int(np.argmin(np.abs(sol.times - 5.0)))
        assert rep.by_violation[i5, 0]
        assert not rep.by_multiplier.any()
        assert rep.set_status[0] is SetStatus.ENFORCED
        far = np.abs(sol.times - 5.0) > 1.0
        assert not rep.node_active[far, 0].any()

    def test_multiplier_segment_marks_nodes(self):
        N = 21
        lam = np.zeros(N)
        lam[8:13] = 2.0
        prob, sol = pass_solution(east=3.0, multipliers=lam)
        rep = classify(prob, sol, interpolate(sol))
        np.testing.assert_array_equal(np.flatnonzero(rep.node_active[:, 0]), np.arange(8, 13))
        np.testing.assert_allclose(rep.intervals[0], [(4.0, 6.0)], rtol=1e-14)

    def test_single_node_gives_degenerate_interval(self):
        lam = np.zeros(21)
        lam[10] = 1.0
        prob, sol = pass_solution(east=3.0, multipliers=lam)
        rep = classify(prob, sol, interpolate(sol), ActivityConfig(penalty=0.01))
        assert rep.intervals == [[(5.0, 5.0)]]

    @pytest.mark.parametrize("scale", [1e-3, 7.0, 1e3])
    def test_scale_invariance(self, scale):
        rng = np.random.default_rng(5)
        lam = np.r_[rng.uniform(0, 0.02, 8), rng.uniform(1.0, 1.2, 6), rng.uniform(0, 0.02, 7)]
        zones = ((5.0, 0.0, 1.0), (5.0, 20.0, 1.0))
        both = np.r_[lam, lam[::-1]]
        prob, sol = pass_solution(east=3.0, multipliers=both, zones=zones)
        base = classify(prob, sol, interpolate(sol))
        prob, sol = pass_solution(east=3.0, multipliers=np.r_[lam, scale * lam[::-1]], zones=zones)
        one = classify(prob, sol, interpolate(sol))
        prob, sol = pass_solution(east=3.0, multipliers=scale * both, zones=zones)
        glob = classify(prob, sol, interpolate(sol))
        np.testing.assert_array_equal(base.by_multiplier, one.by_multiplier)
        np.testing.assert_array_equal(base.by_multiplier, glob.by_multiplier)

    def test_noise_floor_beyond_ratio(self):
        """Multipliers below 1e-4 of the largest one anywhere count as zero."""
        lam = np.r_[np.zeros(8), np.ones(6), np.zeros(7)]
        zones = ((5.0, 0.0, 1.0), (5.0, 20.0, 1.0))
        prob, sol = pass_solution(east=3.0, multipliers=np.r_[lam, 1e5 * lam], zones=zones)
        rep = classify(prob, sol, interpolate(sol))
        assert rep.set_status == {0: SetStatus.REDUNDANT, 1: SetStatus.ENFORCED}

    def test_unimplemented_rows_use_violation_only(self):
        """Rows filtered out at the nodes near the zone are still caught on the interpolant."""
        N = 21
        keep = np.r_[np.arange(0, 6), np.arange(15, N)]
        rows = (np.zeros(keep.size, int), keep)
        prob, sol = pass_solution(east=0.5, rows=rows)
        rep = classify(prob, sol, interpolate(sol))
        assert rep.set_status[0] is SetStatus.ENFORCED
        assert rep.by_violation[10, 0]

    def test_missing_multipliers(self):
        lam = np.zeros(21)
        lam[3] = np.nan
        prob, sol = pass_solution(east=3.0, multipliers=lam)
        with pytest.raises(ValueError):
            classify(prob, sol, interpolate(sol))

    @pytest.mark.parametrize("seed", range(10))
    def test_redundant_iff_no_active_nodes(self, seed):
        rng = np.random.default_rng(seed)
        zones = tuple((float(rng.uniform(1, 9)), float(rng.uniform(-3, 3)), float(rng.uniform(0.3, 1.5)))
                      for _ in range(3))
        lam = rng.uniform(0, 1, 3 * 21) * (rng.uniform(size=3 * 21) < 0.2)
        east = float(rng.uniform(-2, 2))
        if any(np.hypot(z[0] - 0.0, z[1] - east) <= z[2] or np.hypot(z[0] - 10.0, z[1] - east) <= z[2]
               for z in zones):
            pytest.skip("random zone covers an endpoint")
        prob, sol = pass_solution(east=east, multipliers=lam, zones=zones)
        rep = classify(prob, sol, interpolate(sol))
        for sid, rows in rep.set_rows.items():
            none_active = not rep.node_active[:, rows].any()
            assert (rep.set_status[sid] is SetStatus.REDUNDANT) == none_active

    def test_bench_coarse_solve(self):
        prob, mesh, spec = bench_nfz5()
        nlp = transcribe(prob, mesh)
        sol = DiscreteSolution.from_nlp(nlp, solve(nlp))
        rep = classify(prob, sol, interpolate(sol))
        assert sorted(rep.enforced_sets()) == straight_line_crossings(spec) == [0, 3]
        assert sorted(rep.redundant_sets()) == [1, 2, 4]


class TestNodeRuns:
    def test_runs(self):
        assert node_runs(np.array([0, 1, 1, 0, 1, 0, 0, 1, 1, 1], bool)) == [(1, 2), (4, 4), (7, 9)]
        assert node_runs(np.zeros(4, bool)) == []


class TestBuffer:
    E, R = SetStatus.ENFORCED, SetStatus.REDUNDANT

    def test_widen(self):
        f = buffer_intervals(activity_report([[(100.0, 200.0)]], [self.E]), 50.0)
        assert f[0] == ((50.0, 250.0),)

    def test_clamp(self):
        f = buffer_intervals(activity_report([[(10.0, 20.0)]], [self.E]), 50.0)
        assert f[0] == ((0.0, 70.0),)

    def test_merge(self):
        f = buffer_intervals(activity_report([[(100.0, 200.0), (240.0, 300.0)]], [self.E]), 50.0)
        assert f[0] == ((50.0, 350.0),)

    def test_large_beta_recovers_everything(self):
        rep = activity_report([[(100.0, 200.0)], []], [self.E, self.R])
        f = buffer_intervals(rep, 1000.0)
        assert f[0] == ALL and f[1] == ALL

    def test_redundant_is_none(self):
        f = buffer_intervals(activity_report([[]], [self.R]), 50.0)
        assert f[0] == NONE

    def test_free_final_time_keeps_all(self):
        f = buffer_intervals(activity_report([[(100.0, 200.0)]], [self.E], fixed_time=False), 50.0)
        assert f[0] == ALL

    def test_negative_beta(self):
        with pytest.raises(ValueError):
            buffer_intervals(activity_report([[]], [self.R]), -1.0)

    @pytest.mark.parametrize("seed", range(10))
    def test_monotone_in_beta(self, seed):
        rng = np.random.default_rng(seed)
        ivs = sorted(tuple(sorted(rng.uniform(0, 1000, 2))) for _ in range(rng.integers(1, 5)))
        b1, b2 = sorted(rng.uniform(0, 300, 2))
        f1 = buffer_intervals(activity_report([ivs], [self.E]), b1)
        f2 = buffer_intervals(activity_report([ivs], [self.E]), b2)
        t = np.linspace(0, 1000, 4001)
        assert np.all(f2.mask(0, t)[f1.mask(0, t)])
