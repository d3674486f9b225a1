import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings as hsettings, strategies as st
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from aosim.diagnostics import (BadPathSchedule, Report, UnionFind, brownian_oscillation_bound,
                               chain_bound, chain_factor, close_packing_density, detect_chain, detect_fast,
                               fast_bound_report, index_sets, largest_cluster_fraction,
                               oscillation_brute, oscillation_flags, percolation_clusters,
                               verify_separation, write_reports)
from aosim.dynamics import TrajectoryRecord
from aosim.geometry import Box, Configuration

R_S, EPS = 0.5, 0.1


def brute_chain(S, alpha, kappa, eps, r):
    n = len(S)
    for path in itertools.permutations(range(n), kappa + 1):
        if np.linalg.norm(S[path[0]]) > alpha:
            continue
        if all(np.linalg.norm(S[a] - S[b]) < 2 * r + eps for a, b in zip(path, path[1:])):
            return True
    return False


def record_from(paths_s, paths_p, times):
    rec = TrajectoryRecord()
    for t in range(len(times)):
        rec.times.append(float(times[t]))
        rec.configs.append(Configuration.from_points(spheres=paths_s[:, t], particles=paths_p[:, t],
                                                     d=paths_s.shape[2]))
    return rec


class TestChains:
    def test_line_examples(self):
        for kappa in (1, 2, 3):
            line = np.array([[k * (2 * R_S + EPS / 2), 0.0] for k in range(kappa + 1)])
            w = detect_chain(line, 0.5, kappa, EPS, R_S)
            assert w is not None and len(set(w)) == kappa + 1 and w[0] == 0
            far = np.array([[k * (2 * R_S + 2 * EPS), 0.0] for k in range(kappa + 1)])
            assert detect_chain(far, 0.5, kappa, EPS, R_S) is None

    def test_start_must_be_inside_alpha(self):
        line = np.array([[5 + k * 1.02, 0.0] for k in range(3)])
        assert detect_chain(line, 4.0, 2, EPS, R_S) is None
        assert detect_chain(line, 5.0, 2, EPS, R_S) is not None

    @hsettings(max_examples=200)
    @given(st.integers(0, 2 ** 32 - 1), st.integers(2, 12), st.integers(0, 4))
    def test_matches_exhaustive(self, seed, n, kappa):
        rng = np.random.default_rng(seed)
        S = rng.uniform(-2.0, 2.0, (n, 2))
        alpha, eps = rng.uniform(0.5, 2.5), rng.uniform(0.05, 0.6)
        w = detect_chain(S, alpha, kappa, eps, R_S)
        assert (w is not None) == brute_chain(S, alpha, kappa, eps, R_S)
        if w is not None:
            assert len(set(w)) == kappa + 1 and np.linalg.norm(S[w[0]]) <= alpha
            assert all(np.linalg.norm(S[a] - S[b]) < 2 * R_S + eps for a, b in zip(w, w[1:]))
            # monotone in eps, anti-monotone in kappa
            assert detect_chain(S, alpha, kappa, eps * 1.5, R_S) is not None
            if kappa:
                assert detect_chain(S, alpha, kappa - 1, eps, R_S) is not None

    def test_bound_examples(self):
        assert chain_bound(0.1, 0.1, 0.5, 2, 2) == pytest.approx((0.1 * 0.21 * math.pi) ** 2)
        assert round(chain_bound(0.1, 0.1, 0.5, 2, 2), 6) == 0.004352
        f = chain_factor(0.1, 0.1, 0.5, 2)
        assert chain_bound(0.1, 0.1, 0.5, 2, 3) == pytest.approx(f * chain_bound(0.1, 0.1, 0.5, 2, 2))
        assert chain_bound(0.1, 0.1, 0.5, 2, 2, delta=0.5) == pytest.approx(2 * chain_bound(0.1, 0.1, 0.5, 2, 2))
        with pytest.raises(ValueError):
            detect_chain(np.zeros((2, 2)), 1.0, -1, EPS, R_S)


class TestSchedule:
    def test_kappa_and_derived(self):
        s = BadPathSchedule(27.0, 0.5, 0.1)
        assert s.kappa == 3 and s.delta == pytest.approx(1 / 3) and s.alpha == 26.0
        assert BadPathSchedule(64.0, 0.5, 0.1).kappa == 4
        assert BadPathSchedule(63.9, 0.5, 0.1).kappa == 3
        assert s.rho_a(1.0, s.steps) == 1.0
        assert s.rho_a(1.0, 0) == pytest.approx(s.rho_max() + 2 * s.steps * s.chain_step() - s.rho_max() + 1.0)
        with pytest.raises(ValueError):
            BadPathSchedule(7.9, 0.5, 0.1)
        with pytest.raises(ValueError):
            BadPathSchedule(27.0, 0.5, 0.0)


class TestFast:
    @hsettings(max_examples=100)
    @given(st.integers(0, 2 ** 32 - 1), st.integers(2, 40), st.floats(0.05, 0.6), st.floats(0.1, 2.0))
    def test_window_matches_quadratic(self, seed, T, delta, eps):
        rng = np.random.default_rng(seed)
        dt = 0.02
        paths = np.cumsum(rng.standard_normal((3, T, 2)) * 0.3, axis=1)
        times = dt * np.arange(T)
        flags = oscillation_flags(paths, dt, delta, eps)
        for b in range(3):
            assert flags[b] == (oscillation_brute(paths[b], times, delta) > eps)

    def test_constant_and_jump(self):
        T = 41
        times = np.linspace(0, 1, T)
        still = np.tile(np.array([[[0.5, 0.0]]]), (1, T, 1))
        rec = record_from(still, np.zeros((0, T, 2)), times)
        assert detect_fast(rec, 1.0, 0.1, 0.2) is None
        jump = still.copy()
        jump[0, 20:, 0] += 0.21
        rec = record_from(jump, np.zeros((0, T, 2)), times)
        assert detect_fast(rec, 1.0, 0.1, 0.2) == ("S", 0)
        # outside B(0, alpha) the same jump is ignored
        rec = record_from(jump + 5.0, np.zeros((0, T, 2)), times)
        assert detect_fast(rec, 1.0, 0.1, 0.2) is None

    def test_particles_and_resolution(self):
        T = 11
        times = np.linspace(0, 1, T)
        p = np.zeros((1, T, 2))
        p[0, 6:, 1] = 1.0
        rec = record_from(np.zeros((0, T, 2)), p, times)
        assert detect_fast(rec, 1.0, 0.4, 0.5) == ("P", 0)
        with pytest.raises(ValueError, match="resolution"):
            detect_fast(rec, 1.0, 0.2, 0.5)

    def test_unwrap_across_boundary(self):
        T = 9
        times = np.linspace(0, 0.08, T)
        x = (3.9 + 0.05 * np.arange(T)) % 4.0
        path = np.stack([x, np.full(T, 0.2)], axis=1)[None]
        rec = record_from(path - 0.0, np.zeros((0, T, 2)), times)
        # wrapped coordinates jump by ~4; the unwrapped motion is 0.4 in total
        assert detect_fast(rec, 10.0, 0.04, 0.5) is not None
        assert detect_fast(rec, 10.0, 0.04, 0.5, lengths=np.array([4.0, 4.0])) is None

    def test_brownian_bound_examples(self):
        assert brownian_oscillation_bound(2, 0.1, 4.0) == pytest.approx(4 * math.sqrt(5) * 20 * math.exp(-8))
        assert round(brownian_oscillation_bound(2, 0.1, 4.0), 4) == 0.0600
        assert brownian_oscillation_bound(2, 0.1, 1.0) == pytest.approx(108.5, abs=0.05)
        rep = fast_bound_report(2, 1.0, 0.1, 1.0, 500, 1000)
        assert rep.values["vacuous"] is True and rep.passed


class TestSeparation:
    def schedule(self):
        return BadPathSchedule(27.0, 0.5, 0.1)

    def test_index_sets(self):
        S = np.array([[0.0, 0.0], [1.05, 0.0], [2.1, 0.0], [10.0, 0.0]])
        P = np.array([[2.1, 0.66], [10.0, 0.6], [0.1, 0.1]])
        sel, psel = index_sets(S, P, 0.5, 0.5, 0.1, 0.5, 0.575)
        assert sel.tolist() == [True, True, True, False]
        assert psel.tolist() == [True, False, True]

    def test_static_clusters_pass(self):
        sch = self.schedule()
        T = 4 * 12 + 1
        times = np.linspace(0, 1, T)
        S0 = np.array([[0.0, 0.0], [1.2, 0.0], [15.0, 0.0], [16.2, 0.0]])
        P0 = np.array([[0.0, 0.8], [15.0, 0.8]])
        rec = record_from(np.repeat(S0[:, None], T, 1), np.repeat(P0[:, None], T, 1), times)
        rep = verify_separation(rec, sch, 0.075, rho=1.0)
        assert rep.values["precondition"] == "satisfied" and rep.passed
        assert rep.values["separation_violations"] == 0 and rep.values["nesting_violations"] == 0

    def test_single_ball(self):
        T = 49
        times = np.linspace(0, 1, T)
        S = np.zeros((1, T, 2))
        S[0, :, 0] = 0.01 * np.arange(T) / T
        rep = verify_separation(record_from(S, np.zeros((0, T, 2)), times), self.schedule(), 0.075, rho=1.0)
        assert rep.passed

    def test_preconditions(self):
        sch = self.schedule()
        T = 49
        times = np.linspace(0, 1, T)
        chain = np.array([[k * 1.05, 0.0] for k in range(4)])
        rep = verify_separation(record_from(np.repeat(chain[:, None], T, 1), np.zeros((0, T, 2)), times),
                                sch, 0.075, rho=1.0)
        assert rep.values["precondition"] == "chain-event" and rep.passed is None
        S = np.zeros((1, T, 2))
        S[0, 30:, 0] = 0.5
        rep = verify_separation(record_from(S, np.zeros((0, T, 2)), times), sch, 0.075, rho=1.0)
        assert rep.values["precondition"] == "fast-event"
        rep = verify_separation(record_from(S, np.zeros((0, T, 2)), times), sch, 0.075, rho=100.0)
        assert rep.values["precondition"] == "rho-out-of-range" and rep.passed is False


class TestClusters:
    def test_examples(self):
        r = 2 * 0.575
        far = np.array([[0.0, 0.0], [r, 0.0], [0.0, r]])
        res = percolation_clusters(far, r)
        assert res.n_clusters == 3 and res.max_size == 1
        line = np.array([[k * 1.9 * 0.575, 0.0] for k in range(6)])
        assert percolation_clusters(line, r).n_clusters == 1

    @hsettings(max_examples=100)
    @given(st.integers(0, 2 ** 32 - 1), st.integers(1, 60), st.booleans())
    def test_matches_csgraph(self, seed, n, periodic):
        rng = np.random.default_rng(seed)
        L = np.array([6.0, 5.0])
        S = rng.random((n, 2)) * L
        radius = 1.15
        win = Box(L, periodic=periodic)
        res = percolation_clusters(S, radius, win)
        diff = S[:, None] - S[None]
        if periodic:
            diff -= L * np.round(diff / L)
        adj = (np.linalg.norm(diff, axis=2) < radius) & ~np.eye(n, dtype=bool)
        k, lab = connected_components(coo_matrix(adj), directed=False)
        assert res.n_clusters == k
        same = lab[:, None] == lab[None]
        assert np.array_equal(res.labels[:, None] == res.labels[None], same)
        assert res.n_clusters + res.merges == n

    def test_spanning(self):
        L = np.array([5.0, 5.0])
        row = np.array([[0.2 + 1.1 * k, 2.5] for k in range(5)])
        assert percolation_clusters(row, 1.15, Box(L, periodic=True)).spanning
        assert percolation_clusters(row, 1.15, Box(L, periodic=False)).spanning
        short = row[:3]
        assert not percolation_clusters(short, 1.15, Box(L, periodic=True)).spanning
        assert not percolation_clusters(short, 1.15, Box(L, periodic=False)).spanning

    def test_union_find_accounting(self):
        uf = UnionFind(5)
        assert uf.union(0, 1) and uf.union(1, 2) and not uf.union(0, 2)
        assert uf.merges == 2 and len(set(uf.labels().tolist())) == 3

    def test_largest_fraction(self):
        c = Configuration.from_points(spheres=[[0, 0], [1, 0], [4, 4]])
        f = largest_cluster_fraction([c, Configuration.from_points(d=2)], 1.15, Box([6.0, 6.0]))
        assert f.tolist() == [pytest.approx(2 / 3), 0.0]


class TestMisc:
    def test_close_packing(self):
        assert close_packing_density(2, 0.5) == pytest.approx(1.154701, abs=1e-6)
        assert close_packing_density(1, 0.5) == 1.0
        assert close_packing_density(3, 0.5) == pytest.approx(math.sqrt(2))
        with pytest.raises(ValueError):
            close_packing_density(4, 0.5)

    def test_report_render(self, tmp_path):
        r = Report("x", {"a": 1.5, "b": True, "c": [1, 2.0]}, passed=False, notes=["n"])
        text = r.render()
        assert text.splitlines() == ["[x]", "a = 1.5", "b = true", "c = [1, 2]", "status = fail", "note = n"]
        write_reports(tmp_path / "r.txt", [r], {"seed": 3})
        assert (tmp_path / "r.txt").read_text().startswith("# seed=3\n[x]\n")
