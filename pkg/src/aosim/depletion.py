"""Depletion (overlap-volume) pair potential and the effective one-type energy.

The energy of a sphere configuration is the volume of the union of its
depletion balls B(x, r_dep).  While r_particle / r_sphere <= 2/sqrt(3) - 1 no
point can lie in three depletion balls of an admissible configuration, so the
union volume is n * V_d * r_dep**d minus the sum of pairwise lens volumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import (PAIRWISE_RATIO, _as_points, close_cross_pairs, close_pairs,
                       coverage_counts, min_image, union_bounding_box, union_hits,
                       unit_ball_volume)

HARD_CORE_RTOL = 1e-9


@dataclass(frozen=True)
class DepletionParams:
    d: int
    r_sphere: float
    r_particle: float
    z_particle: float = 0.0

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise ValueError("dimension must be an integer >= 1")
        if not (0 < self.r_particle < self.r_sphere):
            raise ValueError("radii must satisfy 0 < r_particle < r_sphere")
        if not (self.z_particle >= 0 and math.isfinite(self.z_particle)):
            raise ValueError("particle activity must be finite and >= 0")

    @classmethod
    def from_domain(cls, dom, z_particle: float = 0.0) -> "DepletionParams":
        return cls(dom.d, dom.r_sphere, dom.r_particle, z_particle)

    @property
    def r_dep(self) -> float:
        return self.r_sphere + self.r_particle

    @property
    def vol_unit(self) -> float:
        return unit_ball_volume(self.d)

    @property
    def vol_unit_lower(self) -> float:
        return unit_ball_volume(self.d - 1)

    @property
    def u_min(self) -> float:
        return self.r_sphere / self.r_dep

    @property
    def ball_volume(self) -> float:
        return self.vol_unit * self.r_dep ** self.d

    @property
    def pairwise_regime(self) -> bool:
        return self.r_particle / self.r_sphere <= PAIRWISE_RATIO * (1 + 1e-12)


def sin_power_integral(theta, d: int):
    """I_d(theta) = int_0^theta sin^d, by the two-step reduction formula."""
    theta = np.asarray(theta, dtype=float)
    c, s = np.cos(theta), np.sin(theta)
    if d % 2 == 0:
        acc, k = theta.copy(), 0
    else:
        acc, k = 1.0 - c, 1
    while k < d:
        k += 2
        acc = (-c * s ** (k - 1) + (k - 1) * acc) / k
    return acc


def _check_u(u: np.ndarray, p: DepletionParams) -> None:
    if np.any(u < p.u_min * (1 - HARD_CORE_RTOL)) or np.any(np.isnan(u)):
        raise ValueError("hard-core violation: sphere centres closer than 2 * r_sphere")


def v_ovlap(u, p: DepletionParams):
    """Lens volume of two depletion balls whose centres are 2 * r_dep * u apart."""
    u_arr = np.asarray(u, dtype=float)
    _check_u(u_arr, p)
    uc = np.clip(u_arr, -1.0, 1.0)
    if p.d == 3:
        core = 2.0 / 3.0 - uc + uc ** 3 / 3.0
        out = 2.0 * math.pi * p.r_dep ** 3 * core
    else:
        out = 2.0 * p.vol_unit_lower * p.r_dep ** p.d * sin_power_integral(np.arccos(uc), p.d)
    out = np.where(u_arr < 1.0, out, 0.0)
    return float(out) if np.ndim(u) == 0 else out


def v_ovlap_prime(u, p: DepletionParams):
    u_arr = np.asarray(u, dtype=float)
    _check_u(u_arr, p)
    w = np.clip(1.0 - u_arr ** 2, 0.0, None)
    out = -2.0 * p.vol_unit_lower * p.r_dep ** p.d * w ** ((p.d - 1) / 2.0)
    out = np.where(u_arr < 1.0, out, 0.0)
    return float(out) if np.ndim(u) == 0 else out


def _pair_lens_sum(i_d: np.ndarray, p: DepletionParams) -> float:
    if len(i_d) == 0:
        return 0.0
    return float(np.sum(v_ovlap(i_d / (2.0 * p.r_dep), p)))


def energy(spheres, p: DepletionParams, lengths: Optional[np.ndarray] = None,
           rng: Optional[np.random.Generator] = None, mc_samples: int = 10 ** 6) -> float:
    """|union of B(x, r_dep)|; pairwise formula in its regime, Monte Carlo otherwise."""
    S = _as_points(spheres, p.d)
    if len(S) == 0:
        return 0.0
    if not p.pairwise_regime:
        if rng is None:
            raise ValueError("energy outside the pairwise regime needs an rng for Monte Carlo")
        from .geometry import mc_union_volume
        if lengths is not None:
            lo, hi = np.zeros(p.d), np.asarray(lengths, float)
        else:
            lo, hi = union_bounding_box(S, p.r_dep)
        return mc_union_volume(S, p.r_dep, lo, hi, mc_samples, rng, lengths)[0]
    _, _, dist = close_pairs(S, 2.0 * p.r_dep, lengths)
    return len(S) * p.ball_volume - _pair_lens_sum(dist, p)


def conditional_energy(inside, outside, p: DepletionParams,
                       lengths: Optional[np.ndarray] = None,
                       rng: Optional[np.random.Generator] = None,
                       mc_samples: int = 10 ** 6) -> float:
    """|B(inside) minus B(outside)| for depletion balls B(x, r_dep)."""
    A = _as_points(inside, p.d)
    B = _as_points(outside, p.d)
    if len(A) == 0:
        return 0.0
    if p.pairwise_regime:
        _, _, d_in = close_pairs(A, 2.0 * p.r_dep, lengths)
        _, _, d_x = close_cross_pairs(A, B, 2.0 * p.r_dep, lengths)
        return len(A) * p.ball_volume - _pair_lens_sum(d_in, p) - _pair_lens_sum(d_x, p)
    if rng is None:
        raise ValueError("conditional energy outside the pairwise regime needs an rng")
    lo, hi = union_bounding_box(A, p.r_dep)
    pts = lo + (hi - lo) * rng.random((mc_samples, p.d))
    hit = union_hits(pts, A, p.r_dep, lengths) & ~union_hits(pts, B, p.r_dep, lengths)
    return float(np.prod(hi - lo)) * np.count_nonzero(hit) / mc_samples


def grad_energy(spheres, p: DepletionParams, lengths: Optional[np.ndarray] = None) -> np.ndarray:
    """Gradient of the pairwise energy with respect to each sphere centre, shape (n, d)."""
    if not p.pairwise_regime:
        raise ValueError("triple-overlap regime: gradient unavailable")
    S = _as_points(spheres, p.d)
    g = np.zeros_like(S)
    if len(S) < 2:
        return g
    i, j, dist = close_pairs(S, 2.0 * p.r_dep, lengths)
    if np.any(dist == 0.0):
        raise ValueError("coincident sphere centres (inadmissible)")
    _check_u(dist / (2.0 * p.r_dep), p)
    delta = min_image(S[i] - S[j], lengths)
    w = np.clip(1.0 - dist ** 2 / (4.0 * p.r_dep ** 2), 0.0, None)
    mag = p.vol_unit_lower * p.r_dep ** (p.d - 1) * w ** ((p.d - 1) / 2.0)
    f = (mag / dist)[:, None] * delta
    np.add.at(g, i, f)
    np.add.at(g, j, -f)
    return g


def critical_activity(p: DepletionParams) -> float:
    """Sphere activity below which interacting clusters stay finite."""
    return 1.0 / (2 ** p.d * (p.r_dep ** p.d - p.r_sphere ** p.d) * p.vol_unit)


def critical_activity_asymptotic(p: DepletionParams) -> float:
    """Leading small-r_particle form of :func:`critical_activity`."""
    return 1.0 / (p.d * 2 ** p.d * p.vol_unit * p.r_sphere ** (p.d - 1) * p.r_particle)


def mc_energy_points(centers, p: DepletionParams, points, cell_volume: float,
                     lengths: Optional[np.ndarray] = None) -> float:
    """Shared-sample union volume: fraction of fixed sample points covered."""
    hits = coverage_counts(points, centers, p.r_dep, lengths) > 0
    return cell_volume * float(np.count_nonzero(hits))


def write_potential_table(path, p: DepletionParams, num: int = 1001, u_max: float = 1.1,
                          header: Optional[dict] = None) -> None:
    u = np.linspace(p.u_min, u_max, num)
    v = v_ovlap(u, p)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for k, val in (header or {}).items():
            fh.write(f"# {k}={val}\n")
        fh.write("u,v_ovlap\n")
        for a, b in zip(u, v):
            fh.write(f"{a:.17g},{b:.17g}\n")
