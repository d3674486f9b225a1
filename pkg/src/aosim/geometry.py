"""Configurations, containers, admissibility, neighbor search and union volumes.

Spheres have radius ``r_sphere``; particles have radius ``r_particle``.  Two
spheres may not come closer than ``2 * r_sphere``, a sphere and a particle not
closer than ``r_dep = r_sphere + r_particle``; particles ignore each other.
"""

from __future__ import annotations

import hashlib
import itertools
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

PAIRWISE_RATIO = 2.0 / math.sqrt(3.0) - 1.0


def _as_points(x, d: Optional[int] = None) -> np.ndarray:
    a = np.asarray(x, dtype=float)
    if a.size == 0:
        if d is None:
            d = a.shape[-1] if a.ndim == 2 else 0
        return np.zeros((0, d))
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ValueError("points must be an (n, d) array")
    if d is not None and a.shape[1] != d:
        raise ValueError(f"points have dimension {a.shape[1]}, expected {d}")
    return a


@dataclass(frozen=True, eq=False)
class Configuration:
    """Finite two-type point set with stable integer ids per type."""

    spheres: np.ndarray
    particles: np.ndarray
    sphere_ids: np.ndarray
    particle_ids: np.ndarray

    def __post_init__(self):
        s = _as_points(self.spheres)
        d = s.shape[1] if s.shape[0] else None
        p = _as_points(self.particles, d)
        if d is None:
            d = p.shape[1]
            s = np.zeros((0, d))
        si = np.asarray(self.sphere_ids, dtype=np.int64).reshape(-1)
        pi = np.asarray(self.particle_ids, dtype=np.int64).reshape(-1)
        if si.shape[0] != s.shape[0] or pi.shape[0] != p.shape[0]:
            raise ValueError("id arrays must match point counts")
        if np.unique(si).size != si.size or np.unique(pi).size != pi.size:
            raise ValueError("ids must be unique within each type")
        object.__setattr__(self, "spheres", s)
        object.__setattr__(self, "particles", p)
        object.__setattr__(self, "sphere_ids", si)
        object.__setattr__(self, "particle_ids", pi)

    @classmethod
    def from_points(cls, spheres=(), particles=(), d: Optional[int] = None) -> "Configuration":
        s = _as_points(spheres, d)
        if d is None:
            d = s.shape[1] if s.shape[0] else None
        p = _as_points(particles, d)
        if s.shape[0] == 0 and p.shape[0]:
            s = np.zeros((0, p.shape[1]))
        if s.shape[0] == 0 and p.shape[0] == 0 and d is not None:
            s, p = np.zeros((0, d)), np.zeros((0, d))
        return cls(s, p, np.arange(s.shape[0]), np.arange(p.shape[0]))

    @property
    def d(self) -> int:
        return self.spheres.shape[1]

    @property
    def n_spheres(self) -> int:
        return self.spheres.shape[0]

    @property
    def n_particles(self) -> int:
        return self.particles.shape[0]

    def copy(self) -> "Configuration":
        return Configuration(self.spheres.copy(), self.particles.copy(),
                             self.sphere_ids.copy(), self.particle_ids.copy())

    def __eq__(self, other) -> bool:
        if not isinstance(other, Configuration):
            return NotImplemented
        return (self.spheres.shape == other.spheres.shape
                and self.particles.shape == other.particles.shape
                and np.array_equal(self.spheres, other.spheres)
                and np.array_equal(self.particles, other.particles)
                and np.array_equal(self.sphere_ids, other.sphere_ids)
                and np.array_equal(self.particle_ids, other.particle_ids))


def empty_configuration(d: int) -> Configuration:
    return Configuration.from_points(d=d)


@dataclass(frozen=True)
class Ball:
    """Ball B(0, radius) with a frozen exterior configuration."""

    radius: float
    exterior: Optional[Configuration] = None

    def volume(self, d: int) -> float:
        return unit_ball_volume(d) * self.radius ** d

    def describe(self) -> str:
        return f"ball:{self.radius!r}"


@dataclass(frozen=True)
class Box:
    """Axis-aligned box [0, L_1) x ... x [0, L_d); periodic by default."""

    sides: tuple
    periodic: bool = True

    def __post_init__(self):
        sides = tuple(float(x) for x in self.sides)
        if not sides or any(not (x > 0 and math.isfinite(x)) for x in sides):
            raise ValueError("box sides must be positive and finite")
        object.__setattr__(self, "sides", sides)

    @property
    def lengths(self) -> np.ndarray:
        return np.asarray(self.sides, dtype=float)

    def volume(self, d: Optional[int] = None) -> float:
        return float(np.prod(self.sides))

    def describe(self) -> str:
        return "box:" + ",".join(repr(x) for x in self.sides) + f";periodic={int(self.periodic)}"


Container = Union[Ball, Box]


@dataclass(frozen=True)
class Domain:
    d: int
    r_sphere: float
    r_particle: float
    sigma: float = 1.0
    container: Optional[Container] = None

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise ValueError("dimension must be an integer >= 1")
        if not (0 < self.r_particle < self.r_sphere):
            raise ValueError("radii must satisfy 0 < r_particle < r_sphere")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        c = self.container
        if isinstance(c, Ball) and not c.radius > 2 * self.r_sphere:
            raise ValueError("ball radius must exceed 2 * r_sphere")
        if isinstance(c, Box) and len(c.sides) != self.d:
            raise ValueError("box must have one side per dimension")

    @property
    def r_dep(self) -> float:
        return self.r_sphere + self.r_particle

    @property
    def pairwise_regime(self) -> bool:
        return self.r_particle / self.r_sphere <= PAIRWISE_RATIO * (1 + 1e-12)

    @property
    def periodic_lengths(self) -> Optional[np.ndarray]:
        c = self.container
        if isinstance(c, Box) and c.periodic:
            return c.lengths
        return None

    def describe(self) -> str:
        c = "none" if self.container is None else self.container.describe()
        return (f"d={self.d} r_sphere={self.r_sphere!r} r_particle={self.r_particle!r} "
                f"sigma={self.sigma!r} container={c}")


def unit_ball_volume(d: int) -> float:
    return math.pi ** (d / 2.0) / math.gamma(d / 2.0 + 1.0)


# --------------------------------------------------------------------------
# distances

def min_image(delta: np.ndarray, lengths: Optional[np.ndarray]) -> np.ndarray:
    if lengths is None:
        return delta
    return delta - lengths * np.round(delta / lengths)


def wrap(points: np.ndarray, lengths: Optional[np.ndarray]) -> np.ndarray:
    if lengths is None:
        return points
    w = np.mod(points, lengths)
    # np.mod can return L itself for tiny negative inputs
    return np.where(w >= lengths, w - lengths, w)


def _check_finite(config: Configuration) -> None:
    if not (np.all(np.isfinite(config.spheres)) and np.all(np.isfinite(config.particles))):
        raise ValueError("configuration has non-finite coordinates")


class NeighborGrid:
    """Uniform cell list over a point set; periodic when ``lengths`` is given."""

    def __init__(self, points: np.ndarray, cell_size: float,
                 lengths: Optional[np.ndarray] = None):
        if not cell_size > 0:
            raise ValueError("cell size must be positive")
        self.points = np.asarray(points, dtype=float)
        self.cell_size = float(cell_size)
        self.lengths = None if lengths is None else np.asarray(lengths, dtype=float)
        d = self.points.shape[1]
        if self.lengths is not None:
            self.shape = np.maximum(1, np.floor(self.lengths / cell_size)).astype(np.int64)
            self.width = self.lengths / self.shape
            self.origin = np.zeros(d)
            pts = wrap(self.points, self.lengths)
        else:
            self.origin = self.points.min(axis=0) if len(self.points) else np.zeros(d)
            self.width = np.full(d, self.cell_size)
            pts = self.points
            ext = (pts.max(axis=0) - self.origin) if len(pts) else np.zeros(d)
            self.shape = np.floor(ext / self.cell_size).astype(np.int64) + 1
        self._pts = pts
        cells = self._cell_of(pts)
        self.cells: dict = {}
        for idx, key in enumerate(map(tuple, cells)):
            self.cells.setdefault(key, []).append(idx)
        self.cells = {k: np.asarray(v, dtype=np.int64) for k, v in self.cells.items()}
        self._offsets = list(itertools.product((-1, 0, 1), repeat=d))

    def _cell_of(self, pts: np.ndarray) -> np.ndarray:
        c = np.floor((pts - self.origin) / self.width).astype(np.int64)
        if self.lengths is not None:
            c = np.mod(c, self.shape)
        return c

    def _neighbor_cells(self, key) -> list:
        out = []
        seen = set()
        for off in self._offsets:
            c = tuple(k + o for k, o in zip(key, off))
            if self.lengths is not None:
                c = tuple(int(v % s) for v, s in zip(c, self.shape))
            if c in seen:
                continue
            seen.add(c)
            out.append(c)
        return out

    def _delta(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return min_image(a[:, None, :] - b[None, :, :], self.lengths)

    def pairs(self, cutoff: float):
        """Index pairs (i < j) with distance < cutoff, plus their distances."""
        if cutoff > self.cell_size * (1 + 1e-12):
            raise ValueError("cutoff exceeds cell size")
        c2 = cutoff * cutoff
        I, J, D = [], [], []
        for key, members in self.cells.items():
            for nkey in self._neighbor_cells(key):
                other = self.cells.get(nkey)
                if other is None or nkey < key:
                    continue
                delta = self._delta(self._pts[members], self._pts[other])
                r2 = np.einsum("ijk,ijk->ij", delta, delta)
                ii, jj = np.nonzero(r2 < c2)
                a, b = members[ii], other[jj]
                keep = a < b if nkey == key else np.ones(a.shape, bool)
                I.append(np.minimum(a, b)[keep])
                J.append(np.maximum(a, b)[keep])
                D.append(np.sqrt(r2[ii, jj][keep]))
        if not I:
            return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
        return np.concatenate(I), np.concatenate(J), np.concatenate(D)

    def query(self, others: np.ndarray, cutoff: float):
        """Pairs (grid index, other index) with distance < cutoff."""
        if cutoff > self.cell_size * (1 + 1e-12):
            raise ValueError("cutoff exceeds cell size")
        others = np.asarray(others, dtype=float)
        if len(others) == 0 or len(self._pts) == 0:
            return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
        opts = wrap(others, self.lengths)
        ocells = self._cell_of(opts)
        groups: dict = {}
        for idx, key in enumerate(map(tuple, ocells)):
            groups.setdefault(key, []).append(idx)
        c2 = cutoff * cutoff
        I, J, D = [], [], []
        for key, oidx in groups.items():
            oidx = np.asarray(oidx, dtype=np.int64)
            for nkey in self._neighbor_cells(key):
                members = self.cells.get(nkey)
                if members is None:
                    continue
                delta = self._delta(self._pts[members], opts[oidx])
                r2 = np.einsum("ijk,ijk->ij", delta, delta)
                ii, jj = np.nonzero(r2 < c2)
                I.append(members[ii])
                J.append(oidx[jj])
                D.append(np.sqrt(r2[ii, jj]))
        if not I:
            return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
        return np.concatenate(I), np.concatenate(J), np.concatenate(D)


def close_pairs(points: np.ndarray, cutoff: float, lengths: Optional[np.ndarray] = None):
    """(i, j, dist) index arrays for i < j at distance < cutoff."""
    points = np.asarray(points, dtype=float)
    if len(points) < 2:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
    if lengths is not None and np.any(cutoff > lengths / 2):
        return _brute_pairs(points, cutoff, lengths)
    grid = NeighborGrid(points, cutoff, lengths)
    return grid.pairs(cutoff)


def close_cross_pairs(a: np.ndarray, b: np.ndarray, cutoff: float,
                      lengths: Optional[np.ndarray] = None):
    """(i, k, dist) for a[i], b[k] at distance < cutoff."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if len(a) == 0 or len(b) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
    if lengths is not None and np.any(cutoff > lengths / 2):
        delta = min_image(a[:, None, :] - b[None, :, :], lengths)
        r2 = np.einsum("ijk,ijk->ij", delta, delta)
        i, k = np.nonzero(r2 < cutoff * cutoff)
        return i, k, np.sqrt(r2[i, k])
    grid = NeighborGrid(a, cutoff, lengths)
    return grid.query(b, cutoff)


def _brute_pairs(points, cutoff, lengths):
    delta = min_image(points[:, None, :] - points[None, :, :], lengths)
    r2 = np.einsum("ijk,ijk->ij", delta, delta)
    i, j = np.nonzero(np.triu(r2 < cutoff * cutoff, k=1))
    return i, j, np.sqrt(r2[i, j])


def neighbor_pairs(config: Configuration, cutoff: float, kind: str = "spheres",
                   lengths: Optional[Sequence[float]] = None):
    """Unordered pairs at distance < cutoff as (id, id, distance), sorted by id pair.

    ``kind`` selects sphere-sphere, particle-particle or sphere-particle
    ("cross") pairs; for cross pairs the first id is the sphere id.
    """
    if not cutoff > 0:
        raise ValueError("cutoff must be positive")
    L = None if lengths is None else np.asarray(lengths, dtype=float)
    if kind == "spheres":
        i, j, dist = close_pairs(config.spheres, cutoff, L)
        a, b = config.sphere_ids[i], config.sphere_ids[j]
        a, b = np.minimum(a, b), np.maximum(a, b)
    elif kind == "particles":
        i, j, dist = close_pairs(config.particles, cutoff, L)
        a, b = config.particle_ids[i], config.particle_ids[j]
        a, b = np.minimum(a, b), np.maximum(a, b)
    elif kind == "cross":
        i, j, dist = close_cross_pairs(config.spheres, config.particles, cutoff, L)
        a, b = config.sphere_ids[i], config.particle_ids[j]
    else:
        raise ValueError(f"unknown pair kind {kind!r}")
    order = np.lexsort((b, a))
    return [(int(a[k]), int(b[k]), float(dist[k])) for k in order]


def is_admissible(config: Configuration, dom: Domain, slack: Optional[float] = None,
                  include_exterior: bool = True) -> bool:
    """Closed hard-core test: sphere gaps >= 2 r_sphere - slack, sphere-particle >= r_dep - slack."""
    if slack is None:
        slack = 1e-12 * dom.r_sphere
    if slack < 0:
        raise ValueError("slack must be non-negative")
    _check_finite(config)
    L = dom.periodic_lengths
    S, P = config.spheres, config.particles
    c = dom.container
    if include_exterior and isinstance(c, Ball) and c.exterior is not None:
        S = np.vstack([S, c.exterior.spheres]) if c.exterior.n_spheres else S
        P = np.vstack([P, c.exterior.particles]) if c.exterior.n_particles else P
    ss = 2 * dom.r_sphere - slack
    sp = dom.r_dep - slack
    if ss > 0 and len(S) > 1:
        i, _, _ = close_pairs(S, ss, L)
        if len(i):
            return False
    if sp > 0 and len(S) and len(P):
        i, _, _ = close_cross_pairs(S, P, sp, L)
        if len(i):
            return False
    return True


# --------------------------------------------------------------------------
# union of depletion balls

def union_hits(points: np.ndarray, centers: np.ndarray, radius: float,
               lengths: Optional[np.ndarray] = None) -> np.ndarray:
    """Boolean mask: which sample points lie in the union of open balls B(center, radius)."""
    from scipy.spatial import cKDTree

    points = np.asarray(points, dtype=float)
    centers = np.asarray(centers, dtype=float)
    if len(centers) == 0:
        return np.zeros(len(points), dtype=bool)
    if lengths is not None:
        tree = cKDTree(wrap(centers, lengths), boxsize=lengths)
        q = wrap(points, lengths)
    else:
        tree = cKDTree(centers)
        q = points
    dist, _ = tree.query(q, k=1, distance_upper_bound=radius)
    return dist < radius


def coverage_counts(points: np.ndarray, centers: np.ndarray, radius: float,
                    lengths: Optional[np.ndarray] = None) -> np.ndarray:
    """Number of balls B(center, radius) covering each sample point."""
    from scipy.spatial import cKDTree

    points = np.asarray(points, dtype=float)
    centers = np.asarray(centers, dtype=float)
    if len(centers) == 0 or len(points) == 0:
        return np.zeros(len(points), dtype=np.int64)
    if lengths is not None:
        ptree = cKDTree(wrap(points, lengths), boxsize=lengths)
        c = wrap(centers, lengths)
    else:
        ptree = cKDTree(points)
        c = centers
    counts = np.zeros(len(points), dtype=np.int64)
    for hits in ptree.query_ball_point(c, r=radius * (1 - 1e-15)):
        counts[hits] += 1
    return counts


def union_bounding_box(centers: np.ndarray, radius: float):
    centers = np.asarray(centers, dtype=float)
    return centers.min(axis=0) - radius, centers.max(axis=0) + radius


def forbidden_region_volume(spheres, dom: Domain, method: str = "exact-pairwise",
                            mc_samples: int = 10 ** 6,
                            rng: Optional[np.random.Generator] = None):
    """Volume of the union of depletion balls B(x, r_dep); returns (volume, stderr)."""
    S = _as_points(spheres, dom.d)
    if method == "exact-pairwise":
        if not dom.pairwise_regime:
            raise ValueError("triple-overlap regime: exact-pairwise needs "
                             "r_particle / r_sphere <= 2/sqrt(3) - 1")
        from .depletion import DepletionParams, energy
        p = DepletionParams(dom.d, dom.r_sphere, dom.r_particle)
        return energy(S, p, lengths=dom.periodic_lengths), 0.0
    if method != "monte-carlo":
        raise ValueError(f"unknown method {method!r}")
    if rng is None:
        raise ValueError("monte-carlo requires an explicit rng")
    if len(S) == 0:
        return 0.0, 0.0
    L = dom.periodic_lengths
    if L is not None:
        lo, hi = np.zeros(dom.d), L.copy()
    else:
        lo, hi = union_bounding_box(S, dom.r_dep)
    return mc_union_volume(S, dom.r_dep, lo, hi, mc_samples, rng, L)


def mc_union_volume(centers, radius, lo, hi, n_samples, rng, lengths=None, chunk=1 << 18):
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    box_vol = float(np.prod(hi - lo))
    hits = 0
    done = 0
    while done < n_samples:
        k = min(chunk, n_samples - done)
        pts = lo + (hi - lo) * rng.random((k, len(lo)))
        hits += int(np.count_nonzero(union_hits(pts, centers, radius, lengths)))
        done += k
    frac = hits / n_samples
    return box_vol * frac, box_vol * math.sqrt(frac * (1 - frac) / n_samples)


# --------------------------------------------------------------------------
# snapshot files

SNAPSHOT_MAGIC = "# aosim snapshot v1"


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def config_digest(config: Configuration) -> str:
    h = hashlib.sha256()
    for arr in (config.spheres, config.particles, config.sphere_ids, config.particle_ids):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()[:16]


def _parse_container(text: str):
    if text == "none":
        return None
    kind, _, rest = text.partition(":")
    if kind == "ball":
        return Ball(float(rest))
    if kind == "box":
        sides, _, per = rest.partition(";periodic=")
        return Box(tuple(float(s) for s in sides.split(",")), periodic=bool(int(per or 1)))
    raise ValueError(f"unknown container {text!r}")


def write_snapshot(path, config: Configuration, dom: Domain, header: Optional[dict] = None) -> None:
    """Tabular snapshot: header lines, then rows ``type,id,x1..xd``."""
    lines = [SNAPSHOT_MAGIC, "# " + dom.describe()]
    for k, v in (header or {}).items():
        lines.append(f"# {k}={v}")
    cols = ",".join(f"x{i + 1}" for i in range(dom.d))
    lines.append(f"type,id,{cols}")
    for tag, ids, pts in (("S", config.sphere_ids, config.spheres),
                          ("P", config.particle_ids, config.particles)):
        for i, x in zip(ids, pts):
            lines.append(f"{tag},{int(i)}," + ",".join(fmt(v) for v in x))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_snapshot(path):
    """Inverse of :func:`write_snapshot`; returns (config, domain, header dict)."""
    header: dict = {}
    dom_fields: dict = {}
    rows = {"S": ([], []), "P": ([], [])}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line == SNAPSHOT_MAGIC:
                continue
            if line.startswith("# d="):
                for tok in line[2:].split(" "):
                    k, _, v = tok.partition("=")
                    dom_fields[k] = v
                continue
            if line.startswith("# "):
                k, _, v = line[2:].partition("=")
                header[k] = v
                continue
            if line.startswith("type,"):
                continue
            parts = line.split(",")
            ids, pts = rows[parts[0]]
            ids.append(int(parts[1]))
            pts.append([float(v) for v in parts[2:]])
    d = int(dom_fields["d"])
    dom = Domain(d, float(dom_fields["r_sphere"]), float(dom_fields["r_particle"]),
                 float(dom_fields["sigma"]), _parse_container(dom_fields["container"]))
    s_ids, s_pts = rows["S"]
    p_ids, p_pts = rows["P"]
    config = Configuration(np.asarray(s_pts, dtype=float).reshape(-1, d),
                           np.asarray(p_pts, dtype=float).reshape(-1, d),
                           np.asarray(s_ids, dtype=np.int64), np.asarray(p_ids, dtype=np.int64))
    return config, dom, header
