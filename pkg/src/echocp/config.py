"""INI configuration for the benchmark driver.

Sections and keys::

    [problem]  t0, tf, initial_intervals, position_bound, velocity_bound,
               accel_bound, effort_weight, start, goal,
               zones = "north,east,radius; north,east,radius; ..."
    [ech]      zeta, beta, beta_mode, eps_c_tol, eta_tol, max_mr_iterations,
               afp_policy, samples_per_interval, penalty, feas_tol
    [solver]   tol_kkt, tol_primal, max_iter, mu_init, slack_min, mult_min
    [refine]   max_split, max_total_intervals

Values given on the command line take precedence over the file.
"""

from __future__ import annotations

import configparser
from dataclasses import fields, replace
from pathlib import Path
from typing import Optional

from .bench import BenchProblemSpec, NoFlyZone
from .ech import EchConfig


class ConfigError(ValueError):
    pass


def _convert(value: str, default):
    if isinstance(default, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float) or default is None:
        v = value.strip()
        if v.lower() in ("none", ""):
            return None
        try:
            return float(v)
        except ValueError:
            return v
    return value.strip()


def _pairs(text: str) -> tuple:
    return tuple(float(v) for v in text.split(","))


def _section(parser, name, obj, skip=()):
    if not parser.has_section(name):
        return {}
    out = {}
    known = {f.name for f in fields(obj)}
    for key, value in parser.items(name):
        if key in skip:
            continue
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in section [{name}]")
        try:
            out[key] = _convert(value, getattr(obj, key))
        except ValueError as exc:
            raise ConfigError(f"bad value for {name}.{key}: {value!r}") from exc
    return out


def load_config(path: Optional[str]) -> tuple[BenchProblemSpec, EchConfig]:
    """Problem spec and ECH configuration from an INI file (defaults when ``path`` is None)."""
    spec, cfg = BenchProblemSpec(), EchConfig()
    if path is None:
        return spec, cfg
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {path} not found")
    parser = configparser.ConfigParser()
    parser.read(p)
    extra = set(parser.sections()) - {"problem", "ech", "solver", "refine"}
    if extra:
        raise ConfigError(f"unknown sections {sorted(extra)}")
    prob_kw = _section(parser, "problem", spec, skip=("zones", "start", "goal"))
    if parser.has_section("problem"):
        sec = parser["problem"]
        if "zones" in sec:
            text = sec["zones"].strip()
            prob_kw["zones"] = tuple(NoFlyZone(*_pairs(z)) for z in text.split(";") if z.strip())
        for key in ("start", "goal"):
            if key in sec:
                prob_kw[key] = _pairs(sec[key])
    try:
        spec = replace(spec, **prob_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    solver_kw = _section(parser, "solver", cfg.solver)
    refine_kw = _section(parser, "refine", cfg.refine)
    ech_kw = _section(parser, "ech", cfg)
    cfg = apply_overrides(cfg, ech_kw, solver_kw, refine_kw)
    return spec, cfg


def apply_overrides(cfg: EchConfig, ech_kw: dict, solver_kw: Optional[dict] = None,
                    refine_kw: Optional[dict] = None) -> EchConfig:
    ech_kw = {k: v for k, v in ech_kw.items() if v is not None or k in ("beta", "penalty")}
    solver = replace(cfg.solver, **(solver_kw or {}))
    warm = replace(cfg.warm_solver, **{k: v for k, v in (solver_kw or {}).items() if k != "slack_min"})
    refine = replace(cfg.refine, **(refine_kw or {}))
    try:
        return replace(cfg, solver=solver, warm_solver=warm, refine=refine, **ech_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
