"""Confining penalisation fields for a ball B(0, R) with a frozen exterior.

Profiles: ``s`` is the quintic smoothstep, the bump is ``1 - s`` and the ramp is
the antiderivative of ``s`` (so it equals ``t - 1/2`` for ``t >= 1``).  All
three are C^2 with bounded derivatives.

The sphere field is

    2 log R + ramp(R^{d+1}(|x| - R))
      + sum over exterior spheres y with R <= |y| <= R + 2 r_sphere of bump(|y - x|^2 / (2 r_sphere)^2)
      + sum over exterior particles y with R <= |y| <= R + r_dep of bump(|y - x|^2 / r_dep^2)
      + log(#first shell) + log(#second shell)

and the particle field keeps only exterior spheres with R <= |y| <= R + r_dep at
scale r_dep.  An empty shell contributes nothing (no log term either).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np

from .geometry import Ball, Configuration, Domain, unit_ball_volume


def smoothstep(t):
    t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
    return t ** 3 * (10.0 + t * (-15.0 + 6.0 * t))


def smoothstep_prime(t):
    t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
    return 30.0 * t ** 2 * (t - 1.0) ** 2


def smoothstep_second(t):
    t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
    return 60.0 * t * (t - 1.0) * (2.0 * t - 1.0)


def bump(t):
    return 1.0 - smoothstep(t)


def ramp(t):
    t = np.asarray(t, dtype=float)
    tc = np.clip(t, 0.0, 1.0)
    inner = tc ** 4 * (2.5 + tc * (-3.0 + tc))
    return np.where(t >= 1.0, t - 0.5, inner)


@dataclass(frozen=True, eq=False)
class PenalisationField:
    """Immutable pair of fields for one (R, exterior) choice."""

    R: float
    d: int
    r_sphere: float
    r_particle: float
    sphere_groups: tuple      # ((centres, scale**2), ...) acting on spheres
    particle_groups: tuple    # acting on particles
    sphere_const: float
    particle_const: float
    exterior: Configuration

    @classmethod
    def from_domain(cls, dom: Domain) -> "PenalisationField":
        c = dom.container
        if not isinstance(c, Ball):
            raise ValueError("penalisation requires ball container")
        ext = c.exterior if c.exterior is not None else Configuration.from_points(d=dom.d)
        R = float(c.radius)
        r_s, r_dep = dom.r_sphere, dom.r_dep

        def shell(points, width):
            if len(points) == 0:
                return np.zeros((0, dom.d))
            n = np.linalg.norm(points, axis=1)
            return points[(n >= R) & (n <= R + width)].copy()

        a = shell(ext.spheres, 2 * r_s)
        b = shell(ext.particles, r_dep)
        cgrp = shell(ext.spheres, r_dep)
        base = 2.0 * math.log(R)
        s_const = base + sum(math.log(len(g)) for g in (a, b) if len(g))
        p_const = base + (math.log(len(cgrp)) if len(cgrp) else 0.0)
        return cls(R, dom.d, r_s, dom.r_particle,
                   ((a, (2 * r_s) ** 2), (b, r_dep ** 2)), ((cgrp, r_dep ** 2),),
                   s_const, p_const, ext)

    @property
    def r_dep(self) -> float:
        return self.r_sphere + self.r_particle

    def groups(self, which: str):
        if which == "sphere":
            return self.sphere_groups, self.sphere_const
        if which == "particle":
            return self.particle_groups, self.particle_const
        raise ValueError(f"which must be 'sphere' or 'particle', got {which!r}")

    def evaluate(self, points, which: str, second: bool = False):
        """Values (k,) and gradients (k, d); with ``second`` also Hessians (k, d, d)."""
        x = np.atleast_2d(np.asarray(points, dtype=float))
        groups, const = self.groups(which)
        k, d = x.shape
        val = np.full(k, const)
        grad = np.zeros((k, d))
        hess = np.zeros((k, d, d)) if second else None
        scale = self.R ** (d + 1)
        nrm = np.linalg.norm(x, axis=1)
        t = scale * (nrm - self.R)
        val += ramp(t)
        act = t > 0.0
        if np.any(act):
            u = x[act] / nrm[act, None]
            sp = smoothstep(t[act])
            grad[act] += (scale * sp)[:, None] * u
            if second:
                spp = smoothstep_prime(t[act])
                eye = np.eye(d)[None]
                uu = u[:, :, None] * u[:, None, :]
                hess[act] += (scale ** 2 * spp)[:, None, None] * uu \
                    + (scale * sp / nrm[act])[:, None, None] * (eye - uu)
        for centres, c2 in groups:
            for y in centres:
                diff = x - y
                tt = np.einsum("ij,ij->i", diff, diff) / c2
                near = tt < 1.0
                if not np.any(near):
                    continue
                val[near] += bump(tt[near])
                sp = smoothstep_prime(tt[near])
                grad[near] -= (2.0 * sp / c2)[:, None] * diff[near]
                if second:
                    spp = smoothstep_second(tt[near])
                    dn = diff[near]
                    hess[near] -= (4.0 * spp / c2 ** 2)[:, None, None] * dn[:, :, None] * dn[:, None, :] \
                        + (2.0 * sp / c2)[:, None, None] * np.eye(d)[None]
        if second:
            return val, grad, hess
        return val, grad

    def kernel_arrays(self, which: str):
        """Flat arrays for the compiled kernels: (centres (g, d), scale**2 (g,), const)."""
        groups, const = self.groups(which)
        pts = [g for g, _ in groups if len(g)]
        sc = [np.full(len(g), c2) for g, c2 in groups if len(g)]
        if pts:
            return np.vstack(pts), np.concatenate(sc), const
        return np.zeros((0, self.d)), np.zeros(0), const


def psi_and_grad(point, which: str, field: PenalisationField):
    """Field value and gradient at one point (or a batch of points)."""
    x = np.asarray(point, dtype=float)
    v, g = field.evaluate(x, which)
    if x.ndim == 1:
        return float(v[0]), g[0]
    return v, g


class FreeRegions(NamedTuple):
    sphere: Callable[[np.ndarray], np.ndarray]
    particle: Callable[[np.ndarray], np.ndarray]


def _outside_all(x: np.ndarray, centres: np.ndarray, radius: float) -> np.ndarray:
    ok = np.ones(len(x), dtype=bool)
    r2 = radius * radius
    for y in centres:
        diff = x - y
        ok &= np.einsum("ij,ij->i", diff, diff) >= r2
    return ok


def free_regions(dom: Domain) -> FreeRegions:
    """Predicates for the regions where each field is flat."""
    c = dom.container
    if not isinstance(c, Ball):
        raise ValueError("penalisation requires ball container")
    ext = c.exterior if c.exterior is not None else Configuration.from_points(d=dom.d)
    R = c.radius

    def inside(x):
        return np.einsum("ij,ij->i", x, x) < R * R

    def sphere(points):
        x = np.atleast_2d(np.asarray(points, dtype=float))
        return (inside(x) & _outside_all(x, ext.spheres, 2 * dom.r_sphere)
                & _outside_all(x, ext.particles, dom.r_dep))

    def particle(points):
        x = np.atleast_2d(np.asarray(points, dtype=float))
        return inside(x) & _outside_all(x, ext.spheres, dom.r_dep)

    return FreeRegions(sphere, particle)


def _random_directions(rng: np.random.Generator, k: int, d: int) -> np.ndarray:
    g = rng.standard_normal((k, d))
    return g / np.linalg.norm(g, axis=1)[:, None]


def complement_mass(field: PenalisationField, which: str, mc_samples: int,
                    rng: np.random.Generator):
    """Monte Carlo estimate of the integral of exp(-field) off the free region.

    The inner part (excluded balls inside B(0, R)) samples uniformly from the
    union of excluded balls, weighting by the inverse coverage multiplicity.
    The outer part samples |x| = R + tau / R^{d+1} with tau ~ Exp(1).
    Returns (estimate, standard error).
    """
    if mc_samples < 1000:
        raise ValueError("mc_samples must be at least 1000")
    d, R = field.d, field.R
    groups, _ = field.groups(which)
    if which == "sphere":
        radii = (2 * field.r_sphere, field.r_dep)
    else:
        radii = (field.r_dep,)
    balls = [(g, r) for (g, _), r in zip(groups, radii) if len(g)]
    n_inner = mc_samples // 2 if balls else 0
    n_outer = mc_samples - n_inner

    inner, inner_se = 0.0, 0.0
    if n_inner:
        vols = np.array([len(g) * unit_ball_volume(d) * r ** d for g, r in balls])
        total = vols.sum()
        pick = rng.choice(len(balls), size=n_inner, p=vols / total)
        x = np.empty((n_inner, d))
        for gi, (g, r) in enumerate(balls):
            sel = np.nonzero(pick == gi)[0]
            if not len(sel):
                continue
            c = g[rng.integers(0, len(g), size=len(sel))]
            rad = r * rng.random(len(sel)) ** (1.0 / d)
            x[sel] = c + rad[:, None] * _random_directions(rng, len(sel), d)
        cover = np.zeros(n_inner)
        for g, r in balls:
            for y in g:
                diff = x - y
                cover += np.einsum("ij,ij->i", diff, diff) < r * r
        cover = np.maximum(cover, 1.0)
        val, _ = field.evaluate(x, which)
        inside = np.einsum("ij,ij->i", x, x) < R * R
        w = np.where(inside, np.exp(-val) * total / cover, 0.0)
        inner = float(w.mean())
        inner_se = float(w.std(ddof=1) / math.sqrt(n_inner))

    scale = R ** (d + 1)
    tau = rng.exponential(size=n_outer)
    rho = R + tau / scale
    x = rho[:, None] * _random_directions(rng, n_outer, d)
    val, _ = field.evaluate(x, which)
    sphere_area = d * unit_ball_volume(d)
    w = np.exp(-val + tau) * rho ** (d - 1) * sphere_area / scale
    outer = float(w.mean())
    outer_se = float(w.std(ddof=1) / math.sqrt(n_outer))
    return inner + outer, math.hypot(inner_se, outer_se)
