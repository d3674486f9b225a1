"""Acceptance criteria, one test each.  Every test prints a single verdict line
(collected again in the terminal summary) before asserting."""

import filecmp
import itertools
import math
import time

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from aosim import cli
from aosim.depletion import DepletionParams, energy, grad_energy, v_ovlap
from aosim.diagnostics import (brownian_oscillation_frequency, chain_bound, chain_bound_report,
                               chain_indicators, close_packing_density, critical_sphere_activity,
                               detect_chain, fast_bound_report, largest_cluster_fraction,
                               oscillation_brute, oscillation_flags, packing_experiment,
                               percolation_clusters)
from aosim.dynamics import IntegratorSettings, run
from aosim.geometry import Ball, Box, Configuration, Domain, is_admissible, mc_union_volume, min_image
from aosim.gibbs import GibbsModelParams, GibbsSampler, marginal_equivalence_experiment, tiny_partition_terms
from aosim.stats import batch_means, chi_square_gof, z_score

pytestmark = pytest.mark.acceptance


def cluster_config(rng, n, d, r_s=0.5, r_dep=0.575, margin=1e-4):
    """Admissible spheres grown so that every new sphere interacts with an earlier one."""
    S = [np.zeros(d)]
    while len(S) < n:
        base = S[rng.integers(len(S))]
        u = rng.standard_normal(d)
        x = base + u / np.linalg.norm(u) * rng.uniform(2 * r_s + margin, 2 * r_dep - margin)
        dist = np.linalg.norm(np.asarray(S) - x, axis=1)
        if np.all(dist >= 2 * r_s + margin) and np.all(np.abs(dist - 2 * r_dep) > margin):
            S.append(x)
    return np.asarray(S)


def lens_area(r, a):
    if r >= 2 * a:
        return 0.0
    return 2 * a * a * math.acos(r / (2 * a)) - 0.5 * r * math.sqrt(4 * a * a - r * r)


# ---------------------------------------------------------------------------

def test_c01_depletion_potential_exact(acceptance):
    t0 = time.perf_counter()
    p = DepletionParams(3, 0.5, 0.075)
    a = p.r_dep
    u = np.linspace(p.u_min, 1.0, 1000)
    v = v_ovlap(u, p)
    closed = 2 * math.pi * a ** 3 * (2 / 3 - u + u ** 3 / 3)
    quadv = np.array([2 * math.pi * a ** 3 * quad(lambda t: 1 - t * t, x, 1.0, epsabs=1e-14)[0] for x in u])
    err_closed = float(np.max(np.abs(v - closed)) / a ** 3)
    err_quad = float(np.max(np.abs(v - quadv)) / a ** 3)
    dt = time.perf_counter() - t0
    ok = err_closed <= 1e-10 and err_quad <= 1e-10
    assert acceptance(1, "depletion potential exactness (d=3)", ok,
                      f"max|v-closed|/r^3={err_closed:.2e} max|v-quad|/r^3={err_quad:.2e} "
                      f"points=1000 time={dt:.2f}s")


def test_c02_gradient_finite_differences(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    p = DepletionParams(3, 0.5, 0.075, 1.0)
    h = 1e-6
    worst = 0.0
    for _ in range(100):
        S = cluster_config(rng, int(rng.integers(2, 11)), 3)
        g = grad_energy(S, p)
        fd = np.zeros_like(S)
        for i in range(len(S)):
            for k in range(3):
                e = np.zeros_like(S)
                e[i, k] = h
                fd[i, k] = (energy(S + e, p) - energy(S - e, p)) / (2 * h)
        worst = max(worst, float(np.max(np.abs(fd - g)) / np.max(np.abs(g))))
    dt = time.perf_counter() - t0
    assert acceptance(2, "gradient vs central differences", worst <= 1e-5,
                      f"max relative error={worst:.2e} over 100 configs (d=3, n<=10) time={dt:.1f}s")


def test_c03_union_volume_consistency(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    dom = Domain(3, 0.5, 0.075)
    p = DepletionParams(3, 0.5, 0.075)
    assert dom.pairwise_regime
    worst = 0.0
    for _ in range(50):
        S = cluster_config(rng, int(rng.integers(2, 11)), 3)
        exact = energy(S, p)
        lo, hi = S.min(axis=0) - p.r_dep, S.max(axis=0) + p.r_dep
        est, se = mc_union_volume(S, p.r_dep, lo, hi, 10 ** 6, rng)
        worst = max(worst, abs(exact - est) / se)
    dt = time.perf_counter() - t0
    assert acceptance(3, "pairwise energy vs Monte Carlo union", worst <= 4.0,
                      f"max |z|={worst:.2f} (limit 4) over 50 configs at 1e6 samples time={dt:.1f}s")


def test_c04_tiny_window_sampler(acceptance):
    t0 = time.perf_counter()
    dom = Domain(2, 0.5, 0.075)
    worst, min_ess, parts = 0.0, math.inf, []
    for w_i, side in enumerate((0.4, 0.55, 0.7)):
        params = GibbsModelParams(dom, 2.0, 3.0, "two-type-hardcore", Box((side, side), periodic=False),
                                  max_spheres=1, max_particles=1)
        terms = tiny_partition_terms(params, 1, 1, 1 << 16, np.random.default_rng(40 + w_i))
        Z = sum(v for v, _ in terms.values())
        s = GibbsSampler(params, np.random.default_rng(50 + w_i))
        s.run(10_000)
        tn, tm = s.run(4_000_000, trace=True)
        for (n, m), (val, se) in terms.items():
            ind = ((tn == n) & (tm == m)).astype(float)
            mean, sem, ess = batch_means(ind, 100)
            z = z_score(mean, sem, val / Z, se / Z)
            worst = max(worst, abs(z))
            min_ess = min(min_ess, ess)
        parts.append(f"side {side}: P(1,1)={terms[(1, 1)][0] / Z:.4f}")
    dt = time.perf_counter() - t0
    ok = worst <= 3.0 and min_ess >= 1e5
    assert acceptance(4, "tiny-window sampler exactness", ok,
                      f"max |z|={worst:.2f} min ESS={min_ess:.3g} windows=3 ({'; '.join(parts)}) "
                      f"time={dt:.0f}s")


def test_c05_marginal_equivalence(acceptance):
    t0 = time.perf_counter()
    dom = Domain(2, 0.5, 0.075, container=Box([6.0, 6.0], periodic=True))
    params = GibbsModelParams(dom, 6.0, 1.0, "two-type-hardcore", Box([6.0, 6.0], periodic=True))
    rep = marginal_equivalence_experiment(params, 8000, np.random.default_rng(5), burn_in=200_000,
                                          thin=2000, n_batches=40)
    v = rep.values
    dt = time.perf_counter() - t0
    mean_n = v["sphere_count_mean_two_type"]
    ok = rep.passed and 10 <= mean_n <= 30
    keys = ("sphere_count_mean_z", "count_histogram_p", "pair_histogram_p", "particle_count_z",
            "thinned_intensity_z")
    body = " ".join(f"{k}={v[k]:.3g}" for k in keys if k in v)
    assert acceptance(5, "marginal equivalence two-type vs one-type", ok,
                      f"mean spheres={mean_n:.1f} {body} time={dt:.0f}s")


def test_c06_chain_bound(acceptance):
    t0 = time.perf_counter()
    dom = Domain(2, 0.5, 0.075)
    params = GibbsModelParams(dom, 0.1, 0.2, "two-type-hardcore", Ball(4.0))
    kappas = [1, 2, 3]
    hits, counts = chain_indicators(params, 1.0, kappas, 0.1, 100_000, np.random.default_rng(6),
                                    burn_in=20_000, thin=200)
    rep = chain_bound_report(params, 1.0, kappas, 0.1, hits, counts, 200, delta=1.0)
    v = rep.values
    dt = time.perf_counter() - t0
    assert round(chain_bound(0.1, 0.1, 0.5, 2, 2), 6) == 0.004352
    body = " ".join(f"k{k}: f={v[f'kappa{k}_frequency']:.2e} ci_hi={v[f'kappa{k}_ci_high']:.2e} "
                    f"bound={v[f'kappa{k}_bound']:.6f}" for k in kappas)
    assert acceptance(6, "chain bound", bool(rep.passed), f"{body} replicas=1e5 time={dt:.0f}s")


def test_c07_brownian_oscillation(acceptance):
    t0 = time.perf_counter()
    freq, hits = brownian_oscillation_frequency(2, 0.1, 4.0, 100_000, np.random.default_rng(7),
                                                resolution=0.001)
    rep = fast_bound_report(2, 1.0, 0.1, 4.0, hits, 100_000, 0.001)
    dt = time.perf_counter() - t0
    b = rep.values["brownian_bound"]
    assert acceptance(7, "Brownian oscillation bound", bool(rep.passed),
                      f"frequency={freq:.2e} ci_hi={rep.values['brownian_ci_high']:.2e} bound={b:.4f} "
                      f"paths=1e5 time={dt:.0f}s")


def test_c08_integrator_stationarity(acceptance):
    """Two spheres, depletion dynamics, periodic box.

    (a) 10^4 independent replicas from uniform admissible starts, horizon 2,
    final pair distance against the 1-d quadrature density.
    (b) replicas from the exact continuum sampler, run for a burn-in of 1 under the
    integrator, then (r(t), r(t + 0.1)) tested for exchangeability on an 8x8 grid.
    The contact atom that projection produces is reported next to its O(sqrt h)
    prediction.
    """
    t0 = time.perf_counter()
    L, zp, h = 2.5, 20.0, 1e-4
    dom = Domain(2, 0.5, 0.075, container=Box([L, L], periodic=True))
    dep = DepletionParams.from_domain(dom, zp)
    a, Lv = dom.r_dep, dom.periodic_lengths
    settings = IntegratorSettings(h=h, scheme="depletion-gradient")

    def g(r):
        return 2 * math.pi * r if r <= L / 2 else 2 * math.pi * r - 8 * r * math.acos(L / (2 * r))

    def weight(r):
        return g(r) * math.exp(zp * lens_area(r, a))

    r_max = L / math.sqrt(2)
    edges = np.concatenate([np.linspace(1.0, 1.15, 7), np.linspace(1.15, r_max, 12)[1:]])
    probs = np.array([quad(weight, lo, hi, points=[L / 2] if lo < L / 2 < hi else None)[0]
                      for lo, hi in zip(edges[:-1], edges[1:])])
    norm = probs.sum()

    rng = np.random.default_rng(8)

    def dist(X):
        return float(np.linalg.norm(min_image(X[0] - X[1], Lv)))

    def uniform_start():
        while True:
            X = rng.random((2, 2)) * L
            if dist(X) >= 1.0:
                return X

    n_rep, horizon = 10_000, 2.0
    final = np.empty(n_rep)
    for q in range(n_rep):
        rec = run(Configuration.from_points(spheres=uniform_start()), dom, settings, horizon,
                  int(round(horizon / h)), rng=rng, dep=dep)
        final[q] = dist(rec.configs[-1].spheres)
    counts = np.histogram(final, edges)[0]
    chi2, dof, p_full = chi_square_gof(counts, probs)

    # projection leaves an atom at contact of size ~ 0.5826 * sigma_rel * sqrt(h) * density(1)
    atom = float(np.mean(final <= 1.0 + 1e-8))
    beta = 0.5826 * math.sqrt(2 * h)
    pred = beta * weight(1.0) / norm / (1 + beta * weight(1.0) / norm)
    cut = 1.0 + 4 * math.sqrt(2 * h)
    inner = np.concatenate([[cut], edges[edges > cut]])
    pin = np.array([quad(weight, lo, hi, points=[L / 2] if lo < L / 2 < hi else None)[0]
                    for lo, hi in zip(inner[:-1], inner[1:])])
    _, _, p_inner = chi_square_gof(np.histogram(final[final >= cut], inner)[0], pin)

    wmax = math.exp(zp * lens_area(1.0, a))

    def exact_start():
        while True:
            X = rng.random((2, 2)) * L
            r = dist(X)
            if r >= 1.0 and rng.random() < math.exp(zp * lens_area(r, a)) / wmax:
                return X

    pairs = np.empty((6000, 2))
    for q in range(len(pairs)):
        rec = run(Configuration.from_points(spheres=exact_start()), dom, settings, 1.1, 1000, rng=rng, dep=dep)
        pairs[q] = dist(rec.configs[10].spheres), dist(rec.configs[11].spheres)
    qe = np.quantile(pairs.ravel(), np.linspace(0, 1, 9))
    qe[0], qe[-1] = 0.0, math.inf
    H = np.histogram2d(pairs[:, 0], pairs[:, 1], [qe, qe])[0]
    iu = np.triu_indices(8, 1)
    num, den = (H[iu] - H.T[iu]) ** 2, H[iu] + H.T[iu]
    m = den > 0
    sym = float(np.sum(num[m] / den[m]))
    sym_dof = int(m.sum())
    z_rev = (sym - sym_dof) / math.sqrt(2 * sym_dof)
    dt = time.perf_counter() - t0
    ok = p_full > 0.01 and z_rev <= 3.0
    assert acceptance(8, "integrator stationarity and reversibility", ok,
                      f"chi2 p={p_full:.2e} (dof {dof}, need >0.01) reversibility z={z_rev:.2f} | "
                      f"contact atom={atom:.4f} predicted O(sqrt h)={pred:.4f} "
                      f"interior (r>={cut:.3f}) chi2 p={p_inner:.3f} time={dt:.0f}s")


def test_c09_invariant_suite(acceptance, tmp_path):
    t0 = time.perf_counter()
    failures = []
    rng = np.random.default_rng(9)

    # (a) trajectories recorded at every step
    torus = Domain(2, 0.5, 0.075, sigma=1.3, container=Box([3.2, 3.2], periodic=True))
    ball = Domain(2, 0.5, 0.075, container=Ball(2.5, Configuration.from_points(
        spheres=[[2.9, 0.0], [0.0, -3.0]], particles=[[-2.6, 0.1]])))
    cases = [
        (torus, "two-type-penalised", Configuration.from_points(
            spheres=[[0.6, 0.6], [1.62, 0.6], [0.6, 1.62], [1.62, 1.62]],
            particles=[[1.11, 1.11], [2.7, 2.7], [2.2, 0.4]]), None),
        (ball, "two-type-penalised", Configuration.from_points(
            spheres=[[0.0, 0.0], [1.01, 0.0], [0.0, 1.2]], particles=[[1.0, 1.0], [-1.2, -1.0]]), None),
        (Domain(2, 0.5, 0.075, container=Box([3.0, 3.0], periodic=True)), "depletion-gradient",
         Configuration.from_points(spheres=[[0.6, 0.6], [1.62, 0.6], [0.6, 1.65], [2.2, 2.2]]), 30.0),
    ]
    steps_checked = 0
    for dom, scheme, cfg, zp in cases:
        dep = DepletionParams.from_domain(dom, zp) if zp else None
        s = IntegratorSettings(h=1e-3, scheme=scheme)
        tol = s.tolerance(dom)
        rec = run(cfg, dom, s, 0.5, 1, rng=rng, dep=dep)
        L = dom.periodic_lengths
        for t in range(len(rec.configs)):
            c, led = rec.configs[t], rec.ledgers[t]
            steps_checked += 1
            if not is_admissible(c, dom, slack=tol, include_exterior=False):
                failures.append(f"{scheme}: overlap at sample {t}")
            if not (np.array_equal(led.spheres, led.spheres.T) and np.all(np.diag(led.spheres) == 0)):
                failures.append(f"{scheme}: ledger symmetry at {t}")
            if np.any(led.spheres < 0) or np.any(led.cross < 0):
                failures.append(f"{scheme}: negative ledger at {t}")
            if t == 0:
                continue
            prev = rec.ledgers[t - 1]
            dS, dC = led.spheres - prev.spheres, led.cross - prev.cross
            if np.any(dS < 0) or np.any(dC < 0):
                failures.append(f"{scheme}: ledger decreased at {t}")
            for i, j in zip(*np.nonzero(np.triu(dS, 1))):
                r = np.linalg.norm(min_image(c.spheres[i] - c.spheres[j], L))
                if abs(r - 2 * dom.r_sphere) > 10 * tol:
                    failures.append(f"{scheme}: ledger support SS at {t}")
            for i, k in zip(*np.nonzero(dC)):
                r = np.linalg.norm(min_image(c.spheres[i] - c.particles[k], L))
                if abs(r - dom.r_dep) > 10 * tol:
                    failures.append(f"{scheme}: ledger support SP at {t}")

    # (b) detectors against brute force
    mismatches = 0
    for _ in range(300):
        n = int(rng.integers(2, 10))
        S = rng.uniform(-2, 2, (n, 2))
        kappa = int(rng.integers(0, 4))
        eps = rng.uniform(0.05, 0.5)
        brute = any(np.linalg.norm(S[pth[0]]) <= 1.5 and all(
            np.linalg.norm(S[x] - S[y]) < 1.0 + eps for x, y in zip(pth, pth[1:]))
            for pth in itertools.permutations(range(n), kappa + 1))
        mismatches += (detect_chain(S, 1.5, kappa, eps, 0.5) is not None) != brute
        paths = np.cumsum(rng.standard_normal((2, 30, 2)) * 0.3, axis=1)
        flags = oscillation_flags(paths, 0.02, 0.15, 0.8)
        times = 0.02 * np.arange(30)
        mismatches += sum(flags[b] != (oscillation_brute(paths[b], times, 0.15) > 0.8) for b in range(2))
        P = rng.random((int(rng.integers(1, 40)), 2)) * 5.0
        res = percolation_clusters(P, 1.15, Box([5.0, 5.0], periodic=True))
        diff = P[:, None] - P[None]
        diff -= 5.0 * np.round(diff / 5.0)
        adj = (np.linalg.norm(diff, axis=2) < 1.15) & ~np.eye(len(P), dtype=bool)
        k, lab = connected_components(coo_matrix(adj), directed=False)
        mismatches += (k != res.n_clusters) + (res.n_clusters + res.merges != len(P))
        mismatches += not np.array_equal(lab[:, None] == lab[None], res.labels[:, None] == res.labels[None])
    if mismatches:
        failures.append(f"detector mismatches: {mismatches}")

    # (c) byte-identical artifacts for equal config and seed
    text = """
command = "simulate"
seed = 99
[domain]
d = 2
r_sphere = 0.5
r_particle = 0.075
sides = [4.0, 4.0]
[model]
z_sphere = 1.0
z_particle = 3.0
[sampler]
burn_in = 5000
[integrator]
h = 0.001
horizon = 0.2
sample_every = 10
"""
    cfg_path = tmp_path / "run.toml"
    cfg_path.write_text(text)
    dirs = [tmp_path / "a", tmp_path / "b"]
    for d in dirs:
        if cli.main(["--config", str(cfg_path), "--out", str(d)]) != 0:
            failures.append("simulate run failed")
    names = sorted(p.name for p in dirs[0].iterdir())
    same = all(filecmp.cmp(dirs[0] / n, dirs[1] / n, shallow=False) for n in names)
    if not same or len(names) != 5:
        failures.append("artifacts differ between identical runs")
    dt = time.perf_counter() - t0
    assert acceptance(9, "invariant suite", not failures,
                      f"samples checked={steps_checked} detector instances=900 artifacts={len(names)} "
                      f"identical={same} failures={failures[:3]} time={dt:.0f}s")


def test_c10_percolation_desk_scale(acceptance):
    t0 = time.perf_counter()
    dom = Domain(2, 0.5, 0.075)
    zc = critical_sphere_activity(dom)
    z = 0.5 * zc
    rows = []
    for k, side in enumerate((5.0, 10.0, 15.0)):
        w = Box([side, side], periodic=True)
        p = GibbsModelParams(dom, z, 2.0, "one-type-depletion", w)
        s = GibbsSampler(p, np.random.default_rng(100 + k))
        s.run(int(50 * side * side))
        confs = []
        for _ in range(10_000):
            s.run(int(2 * side * side))
            confs.append(s.configuration())
        f = largest_cluster_fraction([c for c in confs if c.n_spheres], 2 * dom.r_dep, w)
        mean, se, _ = batch_means(f, 50)
        rows.append((side, mean, se))
    ok = all(b[1] <= a[1] + 3 * math.hypot(a[2], b[2]) for a, b in zip(rows, rows[1:]))
    dt = time.perf_counter() - t0
    body = " ".join(f"L={s:g}: {m:.4f}+-{e:.4f}" for s, m, e in rows)
    assert acceptance(10, "percolation desk-scale check", ok,
                      f"z_sphere={z:.5f} (z_c={zc:.6f}) largest-cluster fraction {body} time={dt:.0f}s")


def test_c11_packing_trend(acceptance):
    t0 = time.perf_counter()
    dom = Domain(2, 0.5, 0.075)
    box = Box([6.0, 6.0 * math.sqrt(3) / 2], periodic=True)
    ladder = [1e2, 1e3, 1e4, 1e5, 1e6]
    curves = []
    for k, zp in enumerate((0.0, 2.0)):
        p = GibbsModelParams(dom, 1.0, zp, "one-type-depletion", box, move_mix=(0.1, 0.1, 0.8), kick=0.05)
        curves.append(packing_experiment(p, ladder, 10_000_000, np.random.default_rng(110 + k), replicas=4))
    rho = close_packing_density(2, 0.5)
    mono = all(all(c.intensity[i + 1] >= c.intensity[i] - 3 * math.hypot(c.stderr[i], c.stderr[i + 1])
                   for i in range(len(ladder) - 1)) for c in curves)
    top = [float(c.ratio[-1]) for c in curves]
    reach = all(t > 0.8 for t in top)
    a, b = curves
    z_top = z_score(a.intensity[-1], a.stderr[-1], b.intensity[-1], b.stderr[-1])
    same = abs(z_top) <= 3.0
    dt = time.perf_counter() - t0
    ratios = " | ".join(f"z_p={c.z_particle:g}: " + ",".join(f"{r:.3f}" for r in c.ratio) for c in curves)
    assert acceptance(11, "packing trend", mono and reach and same,
                      f"ratio to rho*={rho:.6f} {ratios} monotone={mono} top>0.8={reach} "
                      f"top z={z_top:.2f} time={dt:.0f}s")
