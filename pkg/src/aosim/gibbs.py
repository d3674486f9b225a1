"""Grand-canonical birth/death/translate samplers and tiny-window oracles.

Targets on a window W with frozen boundary configuration y (outside W):

* ``two-type-hardcore``: Poisson(z_sphere) x Poisson(z_particle) conditioned on
  admissibility of the window balls together with y;
* ``two-type-penalised``: the same hard core among moving balls only, with
  reference densities exp(-psi) of the penalisation field on a ball window;
* ``one-type-depletion``: spheres only, density exp(-z_particle * E_W) times the
  hard core, E_W the conditional depletion energy given y.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np

from . import _kernels as K
from .depletion import DepletionParams, conditional_energy
from .geometry import Ball, Box, Configuration, Domain, coverage_counts
from .penalisation import PenalisationField
from .stats import batch_means, two_sample_batch_test, z_score

MODELS = ("two-type-hardcore", "two-type-penalised", "one-type-depletion")
_MODEL_CODE = {m: i for i, m in enumerate(MODELS)}


@dataclass(frozen=True)
class GibbsModelParams:
    domain: Domain
    z_sphere: float
    z_particle: float
    model: str
    window: Union[Ball, Box]
    boundary: Optional[Configuration] = None
    field: Optional[PenalisationField] = None
    move_mix: tuple = (0.4, 0.4, 0.2)
    kick: Optional[float] = None
    max_spheres: Optional[int] = None
    max_particles: Optional[int] = None
    energy_mode: str = "pairwise"
    mc_density: float = 2000.0

    def __post_init__(self):
        for z in (self.z_sphere, self.z_particle):
            if not (z >= 0 and math.isfinite(z)):
                raise ValueError("activities must be finite and non-negative")
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}")
        if abs(sum(self.move_mix) - 1.0) > 1e-12 or min(self.move_mix) < 0 \
                or self.move_mix[0] <= 0 or self.move_mix[1] <= 0:
            raise ValueError("move mix must be positive birth/death weights summing to 1")
        if self.model == "two-type-penalised":
            if self.field is None or not isinstance(self.window, Ball):
                raise ValueError("penalised model needs a field and a ball window")
        if isinstance(self.window, Box) and self.window.periodic and self.boundary is not None \
                and (self.boundary.n_spheres or self.boundary.n_particles):
            raise ValueError("periodic windows take no boundary configuration")
        if self.energy_mode not in ("pairwise", "mc"):
            raise ValueError("energy mode must be 'pairwise' or 'mc'")
        if self.model == "one-type-depletion" and self.energy_mode == "pairwise" \
                and not self.domain.pairwise_regime and self.z_particle > 0:
            raise ValueError("triple-overlap regime: use energy_mode='mc'")

    @classmethod
    def penalised(cls, dom: Domain, z_sphere: float, z_particle: float, tail: float = 40.0,
                  **kw) -> "GibbsModelParams":
        """Penalised mixture on B(0, R + tail / R^{d+1}); the field ramp makes the
        mass beyond that radius smaller than exp(-tail + 1/2) relative to the shell."""
        field = PenalisationField.from_domain(dom)
        R = field.R
        win = Ball(R + tail / R ** (dom.d + 1))
        return cls(dom, z_sphere, z_particle, "two-type-penalised", win, None, field, **kw)

    @property
    def window_volume(self) -> float:
        return self.window.volume(self.domain.d)

    @property
    def depletion(self) -> DepletionParams:
        return DepletionParams.from_domain(self.domain, self.z_particle)

    @property
    def periodic_lengths(self):
        w = self.window
        return w.lengths if isinstance(w, Box) and w.periodic else None


@dataclass
class SamplerState:
    config: Configuration
    energy: float
    counters: np.ndarray


class GibbsSampler:
    """Mutable chain; all variates come from the supplied Generator."""

    CHUNK = 1 << 15

    def __init__(self, params: GibbsModelParams, rng: np.random.Generator,
                 initial: Optional[Configuration] = None):
        self.params = params
        self.rng = rng
        dom = params.domain
        d = dom.d
        self.d = d
        init = initial if initial is not None else Configuration.from_points(d=d)
        if params.model == "one-type-depletion" and init.n_particles:
            raise ValueError("one-type model holds spheres only")
        cap_s = max(16, 2 * init.n_spheres)
        cap_p = max(16, 2 * init.n_particles)
        self.S = np.zeros((cap_s, d))
        self.P = np.zeros((cap_p, d))
        self.sid = np.zeros(cap_s, np.int64)
        self.pid = np.zeros(cap_p, np.int64)
        self.S[:init.n_spheres] = init.spheres
        self.P[:init.n_particles] = init.particles
        self.sid[:init.n_spheres] = init.sphere_ids
        self.pid[:init.n_particles] = init.particle_ids
        self.ns = np.array([init.n_spheres], np.int64)
        self.mp = np.array([init.n_particles], np.int64)
        self.next_id = np.array([int(init.sphere_ids.max(initial=-1)) + 1,
                                 int(init.particle_ids.max(initial=-1)) + 1], np.int64)
        self.counters = np.zeros(6, np.int64)
        self.steps = 0
        w = params.window
        self.box = np.zeros(d)
        if isinstance(w, Box):
            self.wkind, self.wside, self.wrad = 0, w.lengths.copy(), 0.0
            if w.periodic:
                self.box = w.lengths.copy()
        else:
            self.wkind, self.wside, self.wrad = 1, np.zeros(d), float(w.radius)
        b = params.boundary
        if params.model == "two-type-penalised" or b is None:
            self.BS, self.BP = np.zeros((0, d)), np.zeros((0, d))
        else:
            self.BS = np.ascontiguousarray(b.spheres, dtype=float)
            self.BP = np.ascontiguousarray(b.particles, dtype=float)
        if params.field is not None:
            f = params.field
            self.R = f.R
            self.cen_s, self.c2_s, self.const_s = f.kernel_arrays("sphere")
            self.cen_p, self.c2_p, self.const_p = f.kernel_arrays("particle")
        else:
            self.R = 1.0
            self.cen_s, self.c2_s, self.const_s = np.zeros((0, d)), np.zeros(0), 0.0
            self.cen_p, self.c2_p, self.const_p = np.zeros((0, d)), np.zeros(0), 0.0
        self.kick = params.kick if params.kick is not None else 0.3 * dom.r_sphere
        big = np.iinfo(np.int64).max
        self.cap_s = big if params.max_spheres is None else int(params.max_spheres)
        self.cap_p = big if params.max_particles is None else int(params.max_particles)
        if params.model == "one-type-depletion":
            self.cap_p = 0
        self.dep = DepletionParams.from_domain(dom, params.z_particle)
        self._setup_mc()
        self.energy = np.array([self.fresh_energy()])
        self._since_check = 0

    # -- Monte Carlo energy support -------------------------------------------------
    def _setup_mc(self):
        p, d = self.params, self.d
        self.emode = 0
        self.mc_pts = np.zeros((0, d))
        self.mc_start = np.zeros(1, np.int64)
        self.mc_order = np.zeros(0, np.int64)
        self.mc_cover = np.zeros(0, np.int64)
        self.mc_ncell = np.ones(d, np.int64)
        self.mc_width = np.ones(d)
        self.mc_cell_vol = 0.0
        if p.model != "one-type-depletion" or p.energy_mode != "mc":
            return
        if self.params.periodic_lengths is None:
            raise ValueError("Monte Carlo energy mode needs a periodic box window")
        L = self.params.periodic_lengths
        r = self.dep.r_dep
        ncell = np.floor(L / r).astype(np.int64)
        if np.any(ncell < 3):
            raise ValueError("box too small for the Monte Carlo energy grid")
        self.emode = 1
        vol = float(np.prod(L))
        npts = int(round(p.mc_density * vol))
        pts = self.rng.random((npts, d)) * L
        width = L / ncell
        cells = np.floor(pts / width).astype(np.int64)
        cells = np.minimum(cells, ncell - 1)
        flat = np.zeros(npts, np.int64)
        for c in range(d):
            flat = flat * ncell[c] + cells[:, c]
        order = np.argsort(flat, kind="stable")
        start = np.searchsorted(flat[order], np.arange(int(np.prod(ncell)) + 1))
        self.mc_pts = pts
        self.mc_order = order.astype(np.int64)
        self.mc_start = start.astype(np.int64)
        self.mc_ncell = ncell
        self.mc_width = width
        self.mc_cell_vol = vol / npts
        self.mc_cover = coverage_counts(pts, self.S[:self.ns[0]], r, L)

    # -- energy ------------------------------------------------------------------------
    def fresh_energy(self) -> float:
        p = self.params
        if p.model != "one-type-depletion" or p.z_particle == 0:
            return 0.0
        S = self.S[:self.ns[0]]
        if self.emode == 1:
            cover = coverage_counts(self.mc_pts, S, self.dep.r_dep, p.periodic_lengths)
            return self.mc_cell_vol * float(np.count_nonzero(cover))
        return conditional_energy(S, self.BS, self.dep, lengths=p.periodic_lengths)

    def check_energy(self) -> None:
        fresh = self.fresh_energy()
        cached = float(self.energy[0])
        if abs(fresh - cached) > 1e-8 * max(1.0, abs(fresh)):
            raise RuntimeError(f"cached energy {cached!r} drifted from {fresh!r}")
        self.energy[0] = fresh

    # -- running ---------------------------------------------------------------------
    def _grow(self):
        for name, ids in (("S", "sid"), ("P", "pid")):
            arr = getattr(self, name)
            if (self.ns[0] if name == "S" else self.mp[0]) >= arr.shape[0]:
                new = np.zeros((2 * arr.shape[0], self.d))
                new[:arr.shape[0]] = arr
                setattr(self, name, new)
                old = getattr(self, ids)
                nid = np.zeros(2 * len(old), np.int64)
                nid[:len(old)] = old
                setattr(self, ids, nid)

    def run(self, nsteps: int, trace: bool = False):
        """Advance ``nsteps`` moves; with ``trace`` return per-step (n_spheres, n_particles)."""
        p = self.params
        d = self.d
        tn = np.zeros(nsteps if trace else 0, np.int64)
        tm = np.zeros(nsteps if trace else 0, np.int64)
        done = 0
        pb, pd, _ = p.move_mix
        model = _MODEL_CODE[p.model]
        while done < nsteps:
            k = min(self.CHUNK, nsteps - done)
            U = self.rng.random((k, 5 + d))
            G = self.rng.standard_normal((k, 2 * d))
            pos = 0
            while pos < k:
                cnt = K.mcmc_run(
                    self.S, self.ns, self.P, self.mp, self.sid, self.pid, self.next_id,
                    U[pos:], G[pos:], k - pos,
                    model, p.z_sphere, p.z_particle, self.wkind, self.wside, self.wrad,
                    p.window_volume, self.box, self.BS, self.BP,
                    2 * p.domain.r_sphere, p.domain.r_dep, d, self.dep.vol_unit_lower,
                    self.dep.ball_volume, pb, pd, self.kick, self.cap_s, self.cap_p,
                    self.R, self.cen_s, self.c2_s, self.const_s, self.cen_p, self.c2_p, self.const_p,
                    self.emode, self.mc_pts, self.mc_start, self.mc_order, self.mc_cover,
                    self.mc_ncell, self.mc_width, self.mc_cell_vol,
                    self.counters, self.energy,
                    tn[done + pos:] if trace else tn, tm[done + pos:] if trace else tm, trace)
                pos += cnt
                if pos < k:
                    self._grow()
            done += k
            self._since_check += k
            if self._since_check >= 1 << 18:
                self.check_energy()
                self._since_check = 0
        self.steps += nsteps
        if trace:
            return tn, tm
        return None

    def configuration(self) -> Configuration:
        n, m = int(self.ns[0]), int(self.mp[0])
        return Configuration(self.S[:n].copy(), self.P[:m].copy(),
                             self.sid[:n].copy(), self.pid[:m].copy())

    def state(self) -> SamplerState:
        return SamplerState(self.configuration(), float(self.energy[0]), self.counters.copy())

    def acceptance(self) -> dict:
        c = self.counters
        out = {}
        for i, name in enumerate(("birth", "death", "translate")):
            out[f"{name}_proposed"] = int(c[2 * i])
            out[f"{name}_accepted"] = int(c[2 * i + 1])
            out[f"{name}_rate"] = float(c[2 * i + 1] / c[2 * i]) if c[2 * i] else 0.0
        return out


def mcmc_step(state: Optional[SamplerState], params: GibbsModelParams,
              rng: np.random.Generator) -> SamplerState:
    """One kernel application (functional form; use :class:`GibbsSampler` for long runs)."""
    init = None if state is None else state.config
    s = GibbsSampler(params, rng, init)
    if state is not None:
        s.counters[:] = state.counters
    s.run(1)
    return s.state()


def sample(params: GibbsModelParams, burn_in: int, thin: int, count: int,
           rng: np.random.Generator, initial: Optional[Configuration] = None):
    if count < 1:
        raise ValueError("count must be >= 1")
    if thin < 1 or burn_in < 0:
        raise ValueError("thin must be >= 1 and burn_in >= 0")
    s = GibbsSampler(params, rng, initial)
    if burn_in:
        s.run(burn_in)
    out = []
    for _ in range(count):
        s.run(thin)
        out.append(s.configuration())
    return out


# ---------------------------------------------------------------------------
# tiny-window oracle

def _window_points(window, u: np.ndarray):
    """Map unit-cube points to the window bounding box; return points and in-window mask."""
    if isinstance(window, Box):
        return u * window.lengths, np.ones(len(u), dtype=bool)
    r = window.radius
    x = (2 * u - 1) * r
    return x, np.einsum("ij,ij->i", x, x) < r * r


def _term_integrand(params: GibbsModelParams, X: np.ndarray, Y: np.ndarray, ok: np.ndarray):
    """Weights of n spheres X (q, n, d) and m particles Y (q, m, d)."""
    dom = params.domain
    L = params.periodic_lengths
    from .geometry import min_image

    def d2(a, b):
        diff = min_image(a - b, L)
        return np.einsum("...k,...k->...", diff, diff)

    w = ok.astype(float)
    n, m = X.shape[1], Y.shape[1]
    two_r2, rd2 = (2 * dom.r_sphere) ** 2, dom.r_dep ** 2
    for i in range(n):
        for j in range(i + 1, n):
            w *= d2(X[:, i], X[:, j]) >= two_r2
        for k in range(m):
            w *= d2(X[:, i], Y[:, k]) >= rd2
    b = params.boundary
    if b is not None and params.model != "two-type-penalised":
        for y in b.spheres:
            for i in range(n):
                w *= d2(X[:, i], y) >= two_r2
            for k in range(m):
                w *= d2(Y[:, k], y) >= rd2
        for y in b.particles:
            for i in range(n):
                w *= d2(X[:, i], y) >= rd2
    if params.model == "two-type-penalised":
        f = params.field
        for i in range(n):
            w *= np.exp(-f.evaluate(X[:, i], "sphere")[0])
        for k in range(m):
            w *= np.exp(-f.evaluate(Y[:, k], "particle")[0])
    if params.model == "one-type-depletion" and params.z_particle > 0 and n:
        dep = params.depletion
        bs = b.spheres if b is not None else np.zeros((0, dom.d))
        live = np.nonzero(w > 0)[0]
        e = np.zeros(len(w))
        for q in live:
            e[q] = conditional_energy(X[q], bs, dep, lengths=L)
        w *= np.exp(-params.z_particle * e)
    return w


def tiny_partition_terms(params: GibbsModelParams, max_spheres: int, max_particles: int,
                         quadrature_samples: int, rng: Optional[np.random.Generator] = None,
                         randomizations: int = 8) -> dict:
    """Terms (z_s^n / n!)(z_p^m / m!) * integral over W^{n+m} of the model weight.

    Each integral is a randomized (scrambled Sobol) quasi-Monte Carlo average;
    returns {(n, m): (value, stderr)}.
    """
    from scipy.stats import qmc

    if max_spheres > 2 or max_particles > 2 or max_spheres < 0 or max_particles < 0:
        raise ValueError("caps exceeded: tiny partition handles at most 2 balls of each type")
    if params.model == "one-type-depletion":
        max_particles = 0
    if rng is None:
        rng = np.random.default_rng(0)
    d = params.domain.d
    win = params.window
    box_vol = float(np.prod(win.lengths)) if isinstance(win, Box) else (2 * win.radius) ** d
    terms = {}
    for n in range(max_spheres + 1):
        for m in range(max_particles + 1):
            coef = params.z_sphere ** n * params.z_particle ** m / math.factorial(n) / math.factorial(m)
            k = n + m
            if k == 0:
                terms[(0, 0)] = (1.0, 0.0)
                continue
            if coef == 0.0:
                terms[(n, m)] = (0.0, 0.0)
                continue
            per = max(2, quadrature_samples // randomizations)
            per = 1 << int(math.ceil(math.log2(per)))
            est = []
            for _ in range(randomizations):
                sob = qmc.Sobol(d * k, scramble=True, seed=rng)
                u = sob.random(per)
                pts, ok = _window_points(win, u.reshape(-1, d))
                pts = pts.reshape(per, k, d)
                ok = ok.reshape(per, k).all(axis=1)
                w = _term_integrand(params, pts[:, :n], pts[:, n:], ok)
                est.append(w.mean() * box_vol ** k)
            est = np.asarray(est)
            terms[(n, m)] = (coef * float(est.mean()),
                             coef * float(est.std(ddof=1) / math.sqrt(randomizations)))
    return terms


def exact_tiny_partition(params: GibbsModelParams, max_spheres: int, max_particles: int,
                         quadrature_samples: int, rng: Optional[np.random.Generator] = None) -> float:
    """Truncated grand-canonical partition function of a tiny window."""
    terms = tiny_partition_terms(params, max_spheres, max_particles, quadrature_samples, rng)
    return float(sum(v for v, _ in terms.values()))


# ---------------------------------------------------------------------------
# marginal equivalence

def pair_distance_features(configs, lengths, r_lo: float, r_hi: float, bins: int) -> np.ndarray:
    """Per-sample histogram of sphere pair distances on [r_lo, r_hi)."""
    from .geometry import close_pairs
    edges = np.linspace(r_lo, r_hi, bins + 1)
    out = np.zeros((len(configs), bins))
    for q, c in enumerate(configs):
        _, _, dist = close_pairs(c.spheres, r_hi, lengths)
        out[q] = np.histogram(dist, bins=edges)[0]
    return out


def count_features(counts, support) -> np.ndarray:
    counts = np.asarray(counts)
    lo, hi = support
    clipped = np.clip(counts, lo, hi)
    return (clipped[:, None] == np.arange(lo, hi + 1)[None, :]).astype(float)


def thinned_particles(config: Configuration, dep: DepletionParams, lengths, rng) -> np.ndarray:
    """Poisson(z_particle) points in the box with the depletion balls removed."""
    d = dep.d
    vol = float(np.prod(lengths))
    k = rng.poisson(dep.z_particle * vol)
    pts = rng.random((k, d)) * lengths
    if config.n_spheres and k:
        from .geometry import union_hits
        pts = pts[~union_hits(pts, config.spheres, dep.r_dep, lengths)]
    return pts


@dataclass
class EquivalenceReport:
    values: dict
    passed: bool


def marginal_equivalence_experiment(params: GibbsModelParams, samples: int,
                                    rng: np.random.Generator, burn_in: int = 200_000,
                                    thin: int = 2_000, n_batches: int = 40,
                                    pcf_bins: int = 8, alpha: float = 0.0027) -> EquivalenceReport:
    """Compare the sphere marginal of the two-type sampler against the one-type sampler."""
    w = params.window
    if not (isinstance(w, Box) and w.periodic):
        raise ValueError("marginal equivalence needs a periodic box window")
    if not params.domain.pairwise_regime:
        raise ValueError("triple-overlap regime: one-type energy must be pairwise")
    L = w.lengths
    two = replace(params, model="two-type-hardcore")
    one = replace(params, model="one-type-depletion", max_particles=None)
    sa = sample(two, burn_in, thin, samples, rng)
    sb = sample(one, burn_in, thin, samples, rng)
    na = np.array([c.n_spheres for c in sa])
    nb = np.array([c.n_spheres for c in sb])
    lo, hi = int(min(na.min(), nb.min())), int(max(na.max(), nb.max()))
    qa, qb = np.quantile(np.concatenate([na, nb]), [0.02, 0.98])
    support = (int(qa), int(qb))
    t_cnt, dof_cnt, p_cnt = two_sample_batch_test(count_features(na, support), count_features(nb, support),
                                                  n_batches)
    r_lo = 2 * params.domain.r_sphere
    r_hi = min(2 * params.domain.r_dep + 2 * params.domain.r_sphere, 0.5 * float(L.min()))
    fa = pair_distance_features(sa, L, r_lo, r_hi, pcf_bins)
    fb = pair_distance_features(sb, L, r_lo, r_hi, pcf_bins)
    t_pcf, dof_pcf, p_pcf = two_sample_batch_test(fa, fb, n_batches)
    mean_a, se_a, _ = batch_means(na, n_batches)
    mean_b, se_b, _ = batch_means(nb, n_batches)

    dep = params.depletion
    vol = float(np.prod(L))
    ma = np.array([c.n_particles for c in sa], dtype=float)
    recon = np.array([len(thinned_particles(c, dep, L, rng)) for c in sb], dtype=float)
    free = np.array([params.z_particle * (vol - conditional_energy(c.spheres, np.zeros((0, dep.d)), dep,
                                                                     lengths=L)) for c in sb])
    pm_a, pse_a, _ = batch_means(ma, n_batches)
    pm_b, pse_b, _ = batch_means(recon, n_batches)
    z_particles = z_score(pm_a, pse_a, pm_b, pse_b)
    measured = recon.mean() / vol
    computed = free.mean() / vol
    se_thin = math.sqrt(max(free.mean(), 1e-300) / len(free)) / vol
    z_thin = z_score(measured, se_thin, computed)
    z_mean = z_score(mean_a, se_a, mean_b, se_b)
    passed = (p_cnt > alpha and p_pcf > alpha and abs(z_particles) <= 3
              and abs(z_thin) <= 3 and abs(z_mean) <= 3)
    values = {
        "samples": samples, "burn_in": burn_in, "thin": thin, "batches": n_batches,
        "sphere_count_mean_two_type": mean_a, "sphere_count_se_two_type": se_a,
        "sphere_count_mean_one_type": mean_b, "sphere_count_se_one_type": se_b,
        "sphere_count_range": f"{lo}..{hi}", "sphere_count_mean_z": z_mean,
        "count_histogram_stat": t_cnt, "count_histogram_dof": dof_cnt, "count_histogram_p": p_cnt,
        "pair_histogram_stat": t_pcf, "pair_histogram_dof": dof_pcf, "pair_histogram_p": p_pcf,
        "particle_count_mean_two_type": pm_a, "particle_count_mean_reconstructed": pm_b,
        "particle_count_z": z_particles,
        "thinned_intensity_measured": measured, "thinned_intensity_computed": computed,
        "thinned_intensity_z": z_thin,
    }
    return EquivalenceReport(values, bool(passed))


__all__ = ["GibbsModelParams", "GibbsSampler", "SamplerState", "mcmc_step", "sample",
           "exact_tiny_partition", "tiny_partition_terms", "marginal_equivalence_experiment"]
