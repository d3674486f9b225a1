"""Reflected Euler-Maruyama integration with collision local-time bookkeeping.

Two schemes share one stepper:

* ``two-type-penalised``: spheres take ``dW - (h/2) grad psi_sphere``, particles
  ``sigma dW - (h sigma^2 / 2) grad psi_particle``; the exterior is frozen.
* ``depletion-gradient``: spheres only, ``dW - (h z_particle / 2) grad E``.

After the unconstrained increment, overlaps are removed by projected
Gauss-Seidel sweeps in fixed pair order.  A sphere-sphere push of total size
``c`` moves each sphere by ``c/2``; a sphere-particle push splits as
``1 : sigma^2``.  The per-step multipliers (push divided by the current centre
separation) are accumulated in the :class:`LocalTimeLedger`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels as K
from .depletion import DepletionParams
from .geometry import Ball, Configuration, Domain, fmt, is_admissible, min_image
from .penalisation import PenalisationField

SCHEMES = ("two-type-penalised", "depletion-gradient")


@dataclass(frozen=True)
class IntegratorSettings:
    h: float
    max_sweeps: int = 100
    tol: float = 0.0
    seed: Optional[int] = None
    scheme: str = "two-type-penalised"
    noise: bool = True
    skin: float = 0.0

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("step size must be positive")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be >= 1")

    @classmethod
    def default(cls, dom: Domain, **kw) -> "IntegratorSettings":
        kw.setdefault("h", 1e-4 * dom.r_sphere ** 2)
        kw.setdefault("tol", 1e-10 * dom.r_sphere)
        return cls(**kw)

    def tolerance(self, dom: Domain) -> float:
        tol = self.tol if self.tol > 0 else 1e-10 * dom.r_sphere
        if not tol < 1e-6 * dom.r_sphere:
            raise ValueError("projection tolerance must be below 1e-6 * r_sphere")
        return tol

    def skin_length(self, dom: Domain) -> float:
        return self.skin if self.skin > 0 else 0.5 * dom.r_sphere


class ProjectionError(RuntimeError):
    """Overlap resolution did not converge; ``pairs`` lists the violating pairs."""

    def __init__(self, message, pairs, record=None):
        super().__init__(message)
        self.pairs = pairs
        self.record = record


@dataclass
class LocalTimeLedger:
    """Accumulated reflection multipliers; row/column order follows the configuration."""

    spheres: np.ndarray        # (n, n), symmetric, zero diagonal
    cross: np.ndarray          # (n, m), sphere x particle
    sphere_ids: np.ndarray
    particle_ids: np.ndarray

    @classmethod
    def zeros(cls, config: Configuration) -> "LocalTimeLedger":
        n, m = config.n_spheres, config.n_particles
        return cls(np.zeros((n, n)), np.zeros((n, m)),
                   config.sphere_ids.copy(), config.particle_ids.copy())

    def copy(self) -> "LocalTimeLedger":
        return LocalTimeLedger(self.spheres.copy(), self.cross.copy(),
                               self.sphere_ids.copy(), self.particle_ids.copy())

    def sphere_pair(self, a: int, b: int) -> float:
        i = int(np.nonzero(self.sphere_ids == a)[0][0])
        j = int(np.nonzero(self.sphere_ids == b)[0][0])
        return float(self.spheres[i, j])

    def sphere_particle(self, a: int, k: int) -> float:
        i = int(np.nonzero(self.sphere_ids == a)[0][0])
        j = int(np.nonzero(self.particle_ids == k)[0][0])
        return float(self.cross[i, j])

    def entries(self):
        """Nonzero entries as (pair-type, id, id, value), sphere pairs with i < j."""
        out = []
        iu, ju = np.nonzero(np.triu(self.spheres, k=1))
        for i, j in zip(iu, ju):
            a, b = int(self.sphere_ids[i]), int(self.sphere_ids[j])
            out.append(("SS", min(a, b), max(a, b), float(self.spheres[i, j])))
        ic, kc = np.nonzero(self.cross)
        for i, k in zip(ic, kc):
            out.append(("SP", int(self.sphere_ids[i]), int(self.particle_ids[k]), float(self.cross[i, k])))
        return out


@dataclass
class DynamicsState:
    config: Configuration
    ledger: LocalTimeLedger
    time: float = 0.0

    @classmethod
    def start(cls, config: Configuration) -> "DynamicsState":
        return cls(config.copy(), LocalTimeLedger.zeros(config), 0.0)


@dataclass
class TrajectoryRecord:
    times: list = field(default_factory=list)
    configs: list = field(default_factory=list)
    ledgers: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    completed: bool = True
    diagnostic: str = ""
    max_sweeps_used: int = 0

    def sphere_paths(self) -> np.ndarray:
        """(n_spheres, T, d) unwrapped only if no periodic wrap occurred."""
        return np.stack([c.spheres for c in self.configs], axis=1)

    def particle_paths(self) -> np.ndarray:
        return np.stack([c.particles for c in self.configs], axis=1)


def _box(dom: Domain) -> np.ndarray:
    L = dom.periodic_lengths
    return np.zeros(dom.d) if L is None else L.astype(float)


def _violations(S, P, dom: Domain, tol: float):
    L = dom.periodic_lengths
    out = []
    for i in range(len(S)):
        for j in range(i + 1, len(S)):
            r = float(np.linalg.norm(min_image(S[i] - S[j], L)))
            if 2 * dom.r_sphere - r > tol:
                out.append(("SS", i, j, r))
        for k in range(len(P)):
            r = float(np.linalg.norm(min_image(S[i] - P[k], L)))
            if dom.r_dep - r > tol:
                out.append(("SP", i, k, r))
    return out


class _Engine:
    """Holds the mutable arrays for one trajectory and drives the compiled loop."""

    def __init__(self, state: DynamicsState, dom: Domain, settings: IntegratorSettings,
                 field: Optional[PenalisationField], dep: Optional[DepletionParams]):
        self.dom = dom
        self.settings = settings
        self.S = np.ascontiguousarray(state.config.spheres, dtype=float).copy()
        self.P = np.ascontiguousarray(state.config.particles, dtype=float).copy()
        self.sid = state.config.sphere_ids.copy()
        self.pid = state.config.particle_ids.copy()
        self.L_ss = state.ledger.spheres.copy()
        self.L_sp = state.ledger.cross.copy()
        self.time = state.time
        self.box = _box(dom)
        self.wrap = dom.periodic_lengths is not None
        self.tol = settings.tolerance(dom)
        self.skin = settings.skin_length(dom)
        d = dom.d
        empty = np.zeros((0, d))
        self.cen_s, self.c2_s, self.cen_p, self.c2_p = empty, np.zeros(0), empty, np.zeros(0)
        self.R = 1.0
        self.zp = 0.0
        self.vol_lower = 0.0
        if settings.scheme == "two-type-penalised":
            if isinstance(dom.container, Ball):
                if field is None:
                    field = PenalisationField.from_domain(dom)
                self.mode = 1
                self.R = field.R
                self.cen_s, self.c2_s, _ = field.kernel_arrays("sphere")
                self.cen_p, self.c2_p, _ = field.kernel_arrays("particle")
            else:
                self.mode = 0
        else:
            if len(self.P):
                raise ValueError("depletion-gradient dynamics moves spheres only")
            if dep is None:
                raise ValueError("depletion-gradient dynamics needs DepletionParams")
            if not dep.pairwise_regime:
                raise ValueError("triple-overlap regime: depletion gradient unavailable")
            self.mode = 2 if dep.z_particle > 0 else 0
            self.zp = dep.z_particle
            self.vol_lower = dep.vol_unit_lower
            if isinstance(dom.container, Ball):
                raise ValueError("depletion-gradient dynamics needs a periodic box or free space")

    def advance(self, inc_S, inc_P, scale_S, scale_P):
        nsteps = inc_S.shape[0]
        dom, st = self.dom, self.settings
        status, sw = K.integrate(
            self.S, self.P, self.box, inc_S, inc_P, scale_S, scale_P, nsteps,
            self.mode, st.h, dom.sigma ** 2, self.zp, self.vol_lower, dom.r_dep, 2 * dom.r_sphere,
            self.R, self.cen_s, self.c2_s, self.cen_p, self.c2_p,
            self.tol, st.max_sweeps, self.skin, self.L_ss, self.L_sp, self.wrap)
        self.time += st.h * status
        if status < nsteps:
            pairs = _violations(self.S, self.P, dom, self.tol)
            raise ProjectionError(
                f"overlap resolution did not converge within {st.max_sweeps} sweeps "
                f"at t={self.time!r}", pairs)
        return sw

    def draw(self, rng: np.random.Generator, nsteps: int):
        n, m, d = len(self.S), len(self.P), self.dom.d
        if self.settings.noise:
            inc_S = rng.standard_normal((nsteps, n, d))
            inc_P = rng.standard_normal((nsteps, m, d))
        else:
            inc_S = np.zeros((nsteps, n, d))
            inc_P = np.zeros((nsteps, m, d))
        sq = math.sqrt(self.settings.h)
        return inc_S, inc_P, sq, sq * self.dom.sigma

    def state(self) -> DynamicsState:
        cfg = Configuration(self.S.copy(), self.P.copy(), self.sid.copy(), self.pid.copy())
        led = LocalTimeLedger(self.L_ss.copy(), self.L_sp.copy(), self.sid.copy(), self.pid.copy())
        return DynamicsState(cfg, led, self.time)


def _single_step(state, dom, settings, field, dep, rng, increments):
    eng = _Engine(state, dom, settings, field, dep)
    if increments is not None:
        dS, dP = increments
        dS = np.asarray(dS, dtype=float).reshape(1, len(eng.S), dom.d)
        dP = np.asarray(dP, dtype=float).reshape(1, len(eng.P), dom.d)
        eng.advance(dS, dP, 1.0, 1.0)
    else:
        if rng is None:
            raise ValueError("an rng is required unless increments are given")
        eng.advance(*eng.draw(rng, 1))
    return eng.state()


def step_two_type(state: DynamicsState, dom: Domain, field: Optional[PenalisationField],
                  settings: IntegratorSettings, rng: Optional[np.random.Generator] = None,
                  increments=None) -> DynamicsState:
    """One penalised two-type step.  ``increments=(dW_spheres, dW_particles)`` overrides
    the random draw; particle increments are then used as given (already scaled)."""
    if settings.scheme != "two-type-penalised":
        settings = _with(settings, scheme="two-type-penalised")
    return _single_step(state, dom, settings, field, None, rng, increments)


def step_depletion(state: DynamicsState, dom: Domain, p: DepletionParams,
                   settings: IntegratorSettings, rng: Optional[np.random.Generator] = None,
                   increments=None) -> DynamicsState:
    if settings.scheme != "depletion-gradient":
        settings = _with(settings, scheme="depletion-gradient")
    if increments is not None and not isinstance(increments, tuple):
        increments = (increments, np.zeros((0, dom.d)))
    return _single_step(state, dom, settings, None, p, rng, increments)


def resolve_overlaps(state: DynamicsState, dom: Domain, settings: IntegratorSettings,
                     ledger: Optional[LocalTimeLedger] = None) -> DynamicsState:
    """Project an arbitrary state onto the admissible set, crediting the ledger."""
    if ledger is not None:
        state = DynamicsState(state.config, ledger, state.time)
    s0 = _with(settings, noise=False, scheme="two-type-penalised")
    eng = _Engine(state, dom, s0, None, None)
    eng.mode = 0
    n, m, d = len(eng.S), len(eng.P), dom.d
    eng.advance(np.zeros((1, n, d)), np.zeros((1, m, d)), 0.0, 0.0)
    eng.time = state.time
    return eng.state()


def _with(settings: IntegratorSettings, **kw) -> IntegratorSettings:
    vals = {f: getattr(settings, f) for f in settings.__dataclass_fields__}
    vals.update(kw)
    return IntegratorSettings(**vals)


def run(initial, dom: Domain, settings: IntegratorSettings, horizon: float, sample_every: int,
        rng: Optional[np.random.Generator] = None, field: Optional[PenalisationField] = None,
        dep: Optional[DepletionParams] = None, check_admissible: bool = True) -> TrajectoryRecord:
    """Integrate up to ``horizon`` and record every ``sample_every`` steps.

    Randomness comes from ``rng`` or, failing that, from ``settings.seed``.
    On a projection failure the returned error carries the partial record.
    """
    if sample_every < 1:
        raise ValueError("sample_every must be >= 1")
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    state = initial if isinstance(initial, DynamicsState) else DynamicsState.start(initial)
    chunk_t = settings.h * sample_every
    n_chunks = int(round(horizon / chunk_t))
    if abs(n_chunks * chunk_t - horizon) > 1e-9 * max(horizon, chunk_t):
        raise ValueError("horizon must be a multiple of h * sample_every")
    if rng is None:
        if settings.seed is None:
            raise ValueError("run needs an rng or a seed in the settings")
        rng = np.random.default_rng(settings.seed)
    if check_admissible and not is_admissible(state.config, dom, slack=settings.tolerance(dom),
                                              include_exterior=False):
        raise ValueError("initial configuration is not admissible")
    eng = _Engine(state, dom, settings, field, dep)
    rec = TrajectoryRecord(metadata={"scheme": settings.scheme, "h": settings.h,
                                     "sample_every": sample_every, "horizon": horizon,
                                     "domain": dom.describe()})
    t0 = state.time
    first = eng.state()
    rec.times.append(t0)
    rec.configs.append(first.config)
    rec.ledgers.append(first.ledger)
    for c in range(n_chunks):
        try:
            sw = eng.advance(*eng.draw(rng, sample_every))
        except ProjectionError as err:
            rec.completed = False
            rec.diagnostic = str(err)
            err.record = rec
            raise
        rec.max_sweeps_used = max(rec.max_sweeps_used, sw)
        eng.time = t0 + (c + 1) * chunk_t
        st = eng.state()
        rec.times.append(eng.time)
        rec.configs.append(st.config)
        rec.ledgers.append(st.ledger)
    return rec


# ---------------------------------------------------------------------------
# files

def write_trajectory(path, rec: TrajectoryRecord, header: Optional[dict] = None) -> None:
    d = rec.configs[0].d if rec.configs else 0
    lines = ["# aosim trajectory v1"]
    for k, v in {**rec.metadata, **(header or {})}.items():
        lines.append(f"# {k}={v}")
    lines.append("t,type,id," + ",".join(f"x{i + 1}" for i in range(d)))
    for t, cfg in zip(rec.times, rec.configs):
        ts = fmt(t)
        for tag, ids, pts in (("S", cfg.sphere_ids, cfg.spheres), ("P", cfg.particle_ids, cfg.particles)):
            for i, x in zip(ids, pts):
                lines.append(f"{ts},{tag},{int(i)}," + ",".join(fmt(v) for v in x))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def write_ledger(path, rec: TrajectoryRecord, header: Optional[dict] = None) -> None:
    lines = ["# aosim local-time ledger v1"]
    for k, v in (header or {}).items():
        lines.append(f"# {k}={v}")
    lines.append("t,pair-type,i,j,value")
    for t, led in zip(rec.times, rec.ledgers):
        ts = fmt(t)
        for kind, i, j, v in led.entries():
            lines.append(f"{ts},{kind},{i},{j},{fmt(v)}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_trajectory(path):
    """Rows of a trajectory file as a dict: time -> {"S": {id: x}, "P": {id: x}}."""
    out: dict = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#") or line.startswith("t,"):
                continue
            parts = line.rstrip("\n").split(",")
            t = float(parts[0])
            slot = out.setdefault(t, {"S": {}, "P": {}})
            slot[parts[1]][int(parts[2])] = np.array([float(v) for v in parts[3:]])
    return out
