"""Run configuration: TOML parsing with exhaustive validation, and exact rendering."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, fields, replace
from typing import Optional

import tomli

COMMANDS = ("simulate", "sample", "analyze", "verify-bounds", "equivalence")
REQUIRED_BLOCKS = {
    "simulate": ("domain", "integrator"),
    "sample": ("domain", "model", "sampler"),
    "analyze": ("domain", "model", "sampler"),
    "verify-bounds": ("domain", "model", "schedule"),
    "equivalence": ("domain", "model", "sampler"),
}
REQUIRED_KEYS = {"domain": ("d", "r_sphere", "r_particle"), "model": ("z_sphere", "z_particle")}


class ConfigError(ValueError):
    """Carries every violation found, not just the first."""

    def __init__(self, errors):
        super().__init__("; ".join(errors))
        self.errors = list(errors)


@dataclass
class DomainBlock:
    d: int = 2
    r_sphere: float = 0.5
    r_particle: float = 0.075
    sigma: float = 1.0
    container: str = "box"
    sides: list = field(default_factory=lambda: [6.0, 6.0])
    periodic: bool = True
    radius: float = 8.0
    exterior: str = ""


@dataclass
class ModelBlock:
    z_sphere: float = 0.5
    z_particle: float = 1.0
    kind: str = "two-type-hardcore"
    kick: float = 0.0
    max_spheres: int = -1
    max_particles: int = -1
    energy_mode: str = "pairwise"


@dataclass
class IntegratorBlock:
    h: float = 0.0
    max_sweeps: int = 100
    tol: float = 0.0
    scheme: str = "two-type-penalised"
    horizon: float = 0.01
    sample_every: int = 100
    initial: str = ""
    noise: bool = True


@dataclass
class SamplerBlock:
    burn_in: int = 10_000
    thin: int = 100
    count: int = 10
    chains: int = 1


@dataclass
class ScheduleBlock:
    R: float = 27.0
    epsilon: float = 0.1
    replicas: int = 1000
    alpha: float = 1.0
    kappas: list = field(default_factory=lambda: [2, 3])
    delta: float = 1.0
    fast_delta: float = 0.1
    fast_epsilon: float = 4.0
    fast_paths: int = 1000
    z_ladder: list = field(default_factory=list)
    steps_per_rung: int = 100_000
    chains: int = 1


@dataclass
class RunConfig:
    command: str
    seed: int
    out: str = "out"
    domain: DomainBlock = field(default_factory=DomainBlock)
    model: ModelBlock = field(default_factory=ModelBlock)
    integrator: IntegratorBlock = field(default_factory=IntegratorBlock)
    sampler: SamplerBlock = field(default_factory=SamplerBlock)
    schedule: ScheduleBlock = field(default_factory=ScheduleBlock)


BLOCKS = {"domain": DomainBlock, "model": ModelBlock, "integrator": IntegratorBlock,
          "sampler": SamplerBlock, "schedule": ScheduleBlock}
_LIST_ITEM = {"sides": float, "kappas": int, "z_ladder": float}


def _coerce(name: str, value, target, errors, where: str):
    if target is bool:
        if isinstance(value, bool):
            return value
    elif target is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif target is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif target is str:
        if isinstance(value, str):
            return value
    elif target is list:
        item = _LIST_ITEM[name]
        if isinstance(value, list):
            out = []
            for v in value:
                c = _coerce(name, v, item, errors, where)
                if c is None:
                    return None
                out.append(c)
            return out
    errors.append(f"{where}{name}: expected {target.__name__}, got {type(value).__name__}")
    return None


def _field_types(cls):
    out = {}
    for f in fields(cls):
        t = f.type if not isinstance(f.type, str) else f.type
        out[f.name] = {"int": int, "float": float, "str": str, "bool": bool, "list": list}.get(t, t)
    return out


def parse_config(text: str, strict: bool = True, seed: Optional[int] = None) -> RunConfig:
    """Validated RunConfig; raises ConfigError listing every problem."""
    errors: list = []
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError([f"syntax: {exc}"]) from None
    command = raw.get("command")
    if command is None:
        errors.append("missing required key: command")
    elif command not in COMMANDS:
        errors.append(f"command: must be one of {', '.join(COMMANDS)}")
    if seed is None:
        seed = raw.get("seed")
    if seed is None:
        errors.append("missing required key: seed (no wall-clock default)")
    elif not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2 ** 64:
        errors.append("seed: must be an integer in [0, 2^64)")
    out = raw.get("out", "out")
    if not isinstance(out, str):
        errors.append("out: expected str")
    for key in raw:
        if key not in ("command", "seed", "out") and key not in BLOCKS:
            if strict:
                errors.append(f"unknown key: {key}")
    blocks = {}
    for name, cls in BLOCKS.items():
        data = raw.get(name)
        types = _field_types(cls)
        if data is None:
            blocks[name] = cls()
            continue
        if not isinstance(data, dict):
            errors.append(f"{name}: expected a table")
            blocks[name] = cls()
            continue
        kw = {}
        for k, v in data.items():
            if k not in types:
                if strict:
                    errors.append(f"unknown key: {name}.{k}")
                continue
            c = _coerce(k, v, types[k], errors, f"{name}.")
            if c is not None:
                kw[k] = c
        for req in REQUIRED_KEYS.get(name, ()):
            if req not in data:
                errors.append(f"missing required key: {name}.{req}")
        blocks[name] = cls(**kw)
    if command in REQUIRED_BLOCKS:
        for b in REQUIRED_BLOCKS[command]:
            if b not in raw:
                errors.append(f"missing required block [{b}] for command {command}")
                for req in REQUIRED_KEYS.get(b, ()):
                    errors.append(f"missing required key: {b}.{req}")
    cfg = RunConfig(command if command in COMMANDS else "simulate",
                    seed if isinstance(seed, int) else 0,
                    out if isinstance(out, str) else "out", **blocks)
    errors.extend(validate(cfg))
    if errors:
        raise ConfigError(_dedupe(errors))
    return cfg


def _dedupe(errors):
    seen, out = set(), []
    for e in errors:
        if e not in seen:
            seen.add(e)
            out.append(e)
    return out


def _finite_pos(x) -> bool:
    return isinstance(x, (int, float)) and math.isfinite(x) and x > 0


def validate(cfg: RunConfig) -> list:
    e = []
    dm, md, it, sp, sc = cfg.domain, cfg.model, cfg.integrator, cfg.sampler, cfg.schedule
    if dm.d < 1:
        e.append("domain.d: must be >= 1")
    if not (0 < dm.r_particle < dm.r_sphere):
        e.append("domain: radii must satisfy 0 < r_particle < r_sphere")
    if not _finite_pos(dm.sigma):
        e.append("domain.sigma: must be positive")
    if dm.container not in ("box", "ball"):
        e.append("domain.container: must be 'box' or 'ball'")
    if dm.container == "box":
        if len(dm.sides) != dm.d:
            e.append("domain.sides: need one side per dimension")
        if any(not _finite_pos(s) for s in dm.sides):
            e.append("domain.sides: must be positive")
    if dm.container == "ball" and not dm.radius > 2 * dm.r_sphere:
        e.append("domain.radius: must exceed 2 * r_sphere")
    for name in ("z_sphere", "z_particle"):
        v = getattr(md, name)
        if not (math.isfinite(v) and v >= 0):
            e.append(f"model.{name}: activity must be finite and non-negative")
    if md.kind not in ("two-type-hardcore", "two-type-penalised", "one-type-depletion"):
        e.append("model.kind: unknown model")
    if md.kind == "two-type-penalised" and dm.container != "ball":
        e.append("model.kind: penalised model needs a ball container")
    if md.energy_mode not in ("pairwise", "mc"):
        e.append("model.energy_mode: must be 'pairwise' or 'mc'")
    if md.kick < 0:
        e.append("model.kick: must be >= 0 (0 selects the default)")
    if it.h < 0:
        e.append("integrator.h: must be >= 0 (0 selects the default)")
    if it.tol < 0 or it.tol >= 1e-6 * dm.r_sphere:
        e.append("integrator.tol: must lie in [0, 1e-6 * r_sphere) (0 selects the default)")
    if it.max_sweeps < 1:
        e.append("integrator.max_sweeps: must be >= 1")
    if it.scheme not in ("two-type-penalised", "depletion-gradient"):
        e.append("integrator.scheme: unknown scheme")
    if it.horizon < 0:
        e.append("integrator.horizon: must be >= 0")
    if it.sample_every < 1:
        e.append("integrator.sample_every: must be >= 1")
    if sp.burn_in < 0 or sp.thin < 1 or sp.count < 1 or sp.chains < 1:
        e.append("sampler: need burn_in >= 0, thin >= 1, count >= 1, chains >= 1")
    if not _finite_pos(sc.epsilon):
        e.append("schedule.epsilon: must be positive")
    if sc.replicas < 1 or sc.fast_paths < 1 or sc.chains < 1:
        e.append("schedule: replicas, fast_paths and chains must be >= 1")
    if any(k < 0 for k in sc.kappas):
        e.append("schedule.kappas: must be >= 0")
    if not (_finite_pos(sc.delta) and _finite_pos(sc.fast_delta) and _finite_pos(sc.fast_epsilon)):
        e.append("schedule: delta, fast_delta and fast_epsilon must be positive")
    if any(b < a for a, b in zip(sc.z_ladder, sc.z_ladder[1:])):
        e.append("schedule.z_ladder: must be non-decreasing")
    return e


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        r = repr(v)
        return r if ("." in r or "e" in r or "n" in r) else r + ".0"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot render {type(v).__name__}")


def render_config(cfg: RunConfig) -> str:
    lines = [f"command = {_toml_value(cfg.command)}", f"seed = {cfg.seed}",
             f"out = {_toml_value(cfg.out)}"]
    for name in BLOCKS:
        lines.append("")
        lines.append(f"[{name}]")
        block = getattr(cfg, name)
        for f in fields(block):
            lines.append(f"{f.name} = {_toml_value(getattr(block, f.name))}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    """Digest of the rendered config; the output directory is excluded so that
    reruns into different directories produce identical artifacts."""
    text = render_config(replace(cfg, out=""))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]
