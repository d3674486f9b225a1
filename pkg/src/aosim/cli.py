"""Command-line entry point: ``aosim --config run.toml [--seed N] [--workers N] [--out DIR]``.

Exit codes: 0 success, 1 invalid configuration, 2 runtime error, 3 failed verification.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from .config import ConfigError, RunConfig, config_hash, parse_config
from .depletion import DepletionParams, conditional_energy
from .diagnostics import (BadPathSchedule, Report, chain_bound_report, chain_indicators,
                          detect_chain, fast_bound_report, packing_experiment,
                          percolation_clusters, write_curve, write_reports)
from .diagnostics import brownian_oscillation_frequency
from .dynamics import (IntegratorSettings, ProjectionError, run, write_ledger,
                       write_trajectory)
from .geometry import Ball, Box, Domain, is_admissible, read_snapshot, write_snapshot
from .gibbs import GibbsModelParams, GibbsSampler, marginal_equivalence_experiment
from .penalisation import PenalisationField

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_FAILED = 0, 1, 2, 3
log = logging.getLogger("aosim")


def build_domain(cfg: RunConfig) -> Domain:
    dm = cfg.domain
    if dm.container == "ball":
        ext = None
        if dm.exterior:
            ext, _, _ = read_snapshot(dm.exterior)
        container = Ball(dm.radius, ext)
    else:
        container = Box(list(dm.sides), dm.periodic)
    return Domain(dm.d, dm.r_sphere, dm.r_particle, dm.sigma, container)


def build_params(cfg: RunConfig, dom: Domain) -> GibbsModelParams:
    md = cfg.model
    kw = dict(kick=md.kick or None,
              max_spheres=None if md.max_spheres < 0 else md.max_spheres,
              max_particles=None if md.max_particles < 0 else md.max_particles,
              energy_mode=md.energy_mode)
    if md.kind == "two-type-penalised":
        return GibbsModelParams.penalised(dom, md.z_sphere, md.z_particle, **kw)
    boundary = dom.container.exterior if isinstance(dom.container, Ball) else None
    return GibbsModelParams(dom, md.z_sphere, md.z_particle, md.kind, dom.container, boundary, **kw)


def replica_seed(base: int, index: int) -> int:
    return base ^ index


def _map(fn, tasks, workers: int):
    if workers <= 1 or len(tasks) <= 1:
        return [fn(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as ex:
        return list(ex.map(fn, *zip(*tasks)))


def _split(total: int, parts: int):
    base, extra = divmod(total, parts)
    return [base + (i < extra) for i in range(parts)]


# ---------------------------------------------------------------------------
# worker tasks (top level so they pickle)

def _sample_chain(params, burn_in, thin, count, seed):
    s = GibbsSampler(params, np.random.default_rng(seed))
    s.run(burn_in)
    out = []
    for _ in range(count):
        s.run(thin)
        out.append(s.configuration())
    return out, s.acceptance()


def _chain_task(params, alpha, kappas, eps, replicas, burn_in, thin, seed):
    return chain_indicators(params, alpha, kappas, eps, replicas, np.random.default_rng(seed),
                            burn_in, thin)


def _fast_task(d, delta, eps, paths, seed):
    return brownian_oscillation_frequency(d, delta, eps, paths, np.random.default_rng(seed))[1]


# ---------------------------------------------------------------------------
# commands

class _Run:
    def __init__(self, cfg: RunConfig, workers: int):
        self.cfg = cfg
        self.workers = workers
        self.out = Path(cfg.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.header = {"config_hash": config_hash(cfg), "seed": cfg.seed}
        self.dom = build_domain(cfg)

    def path(self, name: str) -> str:
        return str(self.out / name)

    def stage(self, name: str, msg: str) -> None:
        print(f"[{name}] {msg}", flush=True)

    def samples(self, params):
        sp = self.cfg.sampler
        tasks = [(params, sp.burn_in, sp.thin, sp.count, replica_seed(self.cfg.seed, c))
                 for c in range(sp.chains)]
        return _map(_sample_chain, tasks, self.workers)


def cmd_simulate(r: _Run) -> int:
    cfg, dom, it = r.cfg, r.dom, r.cfg.integrator
    rng = np.random.default_rng(cfg.seed)
    settings = IntegratorSettings.default(dom, max_sweeps=it.max_sweeps, tol=it.tol, seed=cfg.seed,
                                          scheme=it.scheme, noise=it.noise,
                                          **({"h": it.h} if it.h > 0 else {}))
    depletion = it.scheme == "depletion-gradient"
    if it.initial:
        initial, _, _ = read_snapshot(it.initial)
        r.stage("initial", f"read {initial.n_spheres} spheres, {initial.n_particles} particles")
    else:
        params = build_params(cfg, dom)
        if depletion:
            params = replace(params, model="one-type-depletion", max_particles=None)
        s = GibbsSampler(params, rng)
        s.run(cfg.sampler.burn_in)
        initial = s.configuration()
        r.stage("initial", f"sampled {initial.n_spheres} spheres, {initial.n_particles} particles")
    write_snapshot(r.path("initial.snapshot"), initial, dom, r.header)
    field = PenalisationField.from_domain(dom) if isinstance(dom.container, Ball) and not depletion else None
    dep = DepletionParams.from_domain(dom, cfg.model.z_particle) if depletion else None
    report = Report("simulate")
    status = EXIT_OK
    try:
        rec = run(initial, dom, settings, it.horizon, it.sample_every, rng=rng, field=field, dep=dep)
    except ProjectionError as exc:
        rec = exc.record
        report.notes.append(f"projection failure: {exc}")
        status = EXIT_RUNTIME
    if rec is not None:
        write_trajectory(r.path("trajectory.csv"), rec, r.header)
        write_ledger(r.path("ledger.csv"), rec, r.header)
        final = rec.configs[-1]
        write_snapshot(r.path("final.snapshot"), final, dom, r.header)
        report.values.update({"scheme": settings.scheme, "h": settings.h, "horizon": it.horizon,
                              "samples": len(rec.times), "final_time": float(rec.times[-1]),
                              "max_sweeps_used": int(rec.max_sweeps_used),
                              "final_admissible": bool(is_admissible(
                                  final, dom, slack=settings.tolerance(dom), include_exterior=False))})
    write_reports(r.path("report.txt"), [report], r.header)
    r.stage("simulate", f"{len(rec.times) if rec else 0} samples written to {r.out}")
    return status


def cmd_sample(r: _Run) -> int:
    params = build_params(r.cfg, r.dom)
    results = r.samples(params)
    (r.out / "samples").mkdir(exist_ok=True)
    ns, nm = [], []
    acc = {}
    for c, (configs, a) in enumerate(results):
        for k, conf in enumerate(configs):
            write_snapshot(r.path(f"samples/chain{c:03d}_{k:06d}.snapshot"), conf, r.dom,
                           {**r.header, "chain": c, "index": k})
            ns.append(conf.n_spheres)
            nm.append(conf.n_particles)
        for key, v in a.items():
            if key.endswith("_rate"):
                continue
            acc[key] = acc.get(key, 0) + v
    rep = Report("sample")
    rep.values.update({"model": params.model, "chains": len(results), "samples": len(ns),
                       "mean_spheres": float(np.mean(ns)), "mean_particles": float(np.mean(nm))})
    for move in ("birth", "death", "translate"):
        p, a = acc[f"{move}_proposed"], acc[f"{move}_accepted"]
        rep.values[f"{move}_acceptance"] = a / p if p else 0.0
    write_reports(r.path("report.txt"), [rep], r.header)
    r.stage("sample", f"{len(ns)} samples, mean spheres {np.mean(ns):.3f}")
    return EXIT_OK


def cmd_analyze(r: _Run) -> int:
    cfg, dom = r.cfg, r.dom
    params = build_params(cfg, dom)
    configs = [c for chain, _ in r.samples(params) for c in chain]
    sc = cfg.schedule
    window = params.window if isinstance(params.window, Box) else None
    lengths = params.periodic_lengths
    frac, span, chains = [], [], {k: 0 for k in sc.kappas}
    for c in configs:
        if c.n_spheres:
            cl = percolation_clusters(c.spheres, 2 * dom.r_dep, window)
            frac.append(cl.max_size / c.n_spheres)
            span.append(cl.spanning)
        for k in sc.kappas:
            if c.n_spheres >= k + 1 and detect_chain(c.spheres, sc.alpha, k, sc.epsilon,
                                                     dom.r_sphere, lengths) is not None:
                chains[k] += 1
    rep = Report("analyze")
    rep.values.update({"samples": len(configs),
                       "mean_spheres": float(np.mean([c.n_spheres for c in configs])),
                       "largest_cluster_fraction": float(np.mean(frac)) if frac else 0.0,
                       "spanning_fraction": float(np.mean(span)) if span else 0.0})
    for k, v in chains.items():
        rep.values[f"chain_kappa{k}_frequency"] = v / len(configs)
    if lengths is not None and dom.pairwise_regime:
        dep = params.depletion
        e = [conditional_energy(c.spheres, np.zeros((0, dom.d)), dep, lengths=lengths) for c in configs]
        rep.values["mean_depletion_energy"] = float(np.mean(e))
    reports = [rep]
    r.stage("analyze", f"{len(configs)} samples, largest cluster fraction "
                       f"{rep.values['largest_cluster_fraction']:.4f}")
    if sc.z_ladder:
        pk = replace(params, model="one-type-depletion", max_particles=None)
        curve = packing_experiment(pk, sc.z_ladder, sc.steps_per_rung, np.random.default_rng(cfg.seed),
                                   replicas=max(2, sc.chains))
        write_curve(r.path("packing.csv"), curve, r.header)
        pr = Report("packing")
        pr.values.update({"rho_star": curve.rho_star, "top_ratio": float(curve.ratio[-1]),
                          "intensity": [float(x) for x in curve.intensity]})
        reports.append(pr)
        r.stage("packing", f"top-of-ladder ratio to close packing {curve.ratio[-1]:.4f}")
    write_reports(r.path("report.txt"), reports, r.header)
    return EXIT_OK


def cmd_verify_bounds(r: _Run) -> int:
    cfg, sc, sp = r.cfg, r.cfg.schedule, r.cfg.sampler
    params = build_params(cfg, r.dom)
    tasks = [(params, sc.alpha, list(sc.kappas), sc.epsilon, n, sp.burn_in, sp.thin,
              replica_seed(cfg.seed, c)) for c, n in enumerate(_split(sc.replicas, sc.chains)) if n]
    parts = _map(_chain_task, tasks, r.workers)
    hits = np.concatenate([h for h, _ in parts], axis=1)
    counts = np.concatenate([n for _, n in parts])
    n_batches = max(2, min(50, hits.shape[1] // 10))
    chain = chain_bound_report(params, sc.alpha, sc.kappas, sc.epsilon, hits, counts, sp.thin,
                               sc.delta, n_batches=n_batches)
    try:
        sched = BadPathSchedule(sc.R, r.dom.r_sphere, sc.epsilon)
        chain.values.update({"schedule_R": sc.R, "schedule_kappa": sched.kappa,
                             "schedule_delta": sched.delta, "schedule_alpha": sched.alpha})
    except ValueError as exc:
        chain.notes.append(f"schedule: {exc}")
    r.stage("chain-bound", _verdict(chain))
    offset = len(tasks)
    ftasks = [(r.dom.d, sc.fast_delta, sc.fast_epsilon, n, replica_seed(cfg.seed, offset + c))
              for c, n in enumerate(_split(sc.fast_paths, sc.chains)) if n]
    fhits = int(sum(_map(_fast_task, ftasks, r.workers)))
    fast = fast_bound_report(r.dom.d, sc.alpha, sc.fast_delta, sc.fast_epsilon, fhits, sc.fast_paths)
    r.stage("fast-bound", _verdict(fast))
    write_reports(r.path("report.txt"), [chain, fast], r.header)
    return EXIT_OK if chain.passed and fast.passed else EXIT_FAILED


def cmd_equivalence(r: _Run) -> int:
    cfg, sp = r.cfg, r.cfg.sampler
    params = build_params(cfg, r.dom)
    res = marginal_equivalence_experiment(params, sp.count, np.random.default_rng(cfg.seed),
                                          burn_in=sp.burn_in, thin=sp.thin,
                                          n_batches=max(2, min(40, sp.count // 10)))
    rep = Report("equivalence", dict(res.values), res.passed)
    write_reports(r.path("report.txt"), [rep], r.header)
    r.stage("equivalence", _verdict(rep))
    return EXIT_OK if res.passed else EXIT_FAILED


def _verdict(rep: Report) -> str:
    keys = [k for k in rep.values if k.endswith("_frequency") or k.endswith("_bound") or k.endswith("_p")]
    body = ", ".join(f"{k}={rep.values[k]:.4g}" for k in keys[:6] if isinstance(rep.values[k], float))
    return f"{'pass' if rep.passed else 'FAIL'} ({body})"


COMMAND_TABLE = {"simulate": cmd_simulate, "sample": cmd_sample, "analyze": cmd_analyze,
                 "verify-bounds": cmd_verify_bounds, "equivalence": cmd_equivalence}


def execute(cfg: RunConfig, workers: int = 1) -> int:
    try:
        r = _Run(cfg, workers)
        return COMMAND_TABLE[cfg.command](r)
    except (ValueError, RuntimeError, OSError) as exc:
        log.error("%s: %s", cfg.command, exc)
        return EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="aosim", description=__doc__.splitlines()[0])
    ap.add_argument("--config", required=True, help="TOML run configuration")
    ap.add_argument("--seed", type=int, help="override the configured seed")
    ap.add_argument("--workers", type=int, default=1, help="parallel replica workers")
    ap.add_argument("--out", help="override the output directory")
    ap.add_argument("--strict", action="store_true", help="reject unknown configuration keys")
    return ap


def main(argv: Optional[list] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    if args.workers < 1:
        log.error("--workers must be >= 1")
        return EXIT_INVALID
    try:
        text = Path(args.config).read_text(encoding="utf-8")
    except OSError as exc:
        log.error("cannot read config: %s", exc)
        return EXIT_INVALID
    try:
        cfg = parse_config(text, strict=args.strict, seed=args.seed)
    except ConfigError as exc:
        for e in exc.errors:
            log.error("config: %s", e)
        return EXIT_INVALID
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    return execute(cfg, args.workers)


if __name__ == "__main__":
    sys.exit(main())
