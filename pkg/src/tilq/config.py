"""Run configuration files (TOML or YAML; JSON parses as YAML).

Schema (documented in README.md; `schema_version = 1` is mandatory)::

    schema_version = 1
    mode = "lq" | "mv"

    [grid]    horizon, steps
    [lq]      control_dim, noise_dim, A, B, C, D, b, sigma, Q, R,
              G, h, mu1, mu2, x0            (mode = "lq")
    [mv]      noise_dim, r, mu1, mu2, x0    (mode = "mv")
    [mv.premium]
              kind = "deterministic" (theta) |
              kind = "ou" (kappa, mean, vol, y0, theta_bar, loading, component)
    [sim]     paths, inner_paths, seed, epsilons, probe_times, antithetic
    [bsde]    paths, degree, scheme
    [verify]  detune

Coefficients are scalars, vectors, matrices, or piecewise-linear tables
``{times = [...], values = [...]}`` whose breakpoints cover [0, T] and sit
on grid nodes.  `epsilons` and `probe_times` are fractions of the horizon.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .model import (CoefficientPath, DeterministicPremium, MarketSpec,
                    OUPremium, ProblemSpec, TimeGrid)
from .simulate import SimConfig

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class BsdeSettings:
    paths: int = 10000
    degree: int = 3
    scheme: str = "exact"


@dataclass(frozen=True)
class RunConfig:
    mode: str
    spec: Optional[ProblemSpec]
    market: Optional[MarketSpec]
    sim: SimConfig
    bsde: BsdeSettings
    detune: float
    path: str
    sha256: str
    raw: dict

    @property
    def model(self):
        return self.spec if self.mode == "lq" else self.market


def _parse_raw(path: Path) -> dict:
    data = path.read_bytes()
    suffix = path.suffix.lower()
    try:
        if suffix == ".toml":
            return tomllib.loads(data.decode("utf-8"))
        if suffix in (".yaml", ".yml", ".json"):
            out = yaml.safe_load(data.decode("utf-8"))
            if not isinstance(out, dict):
                raise ConfigError(f"{path}: top level must be a mapping")
            return out
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(f"{path}: parse error: {exc}") from exc
    raise ConfigError(f"{path}: unsupported config format {suffix!r} "
                      "(use .toml, .yaml/.yml or .json)")


def _coeff(raw, name: str) -> CoefficientPath:
    if isinstance(raw, dict):
        if set(raw) != {"times", "values"}:
            raise ConfigError(f"{name}: piecewise coefficient needs exactly "
                              "'times' and 'values'")
        try:
            return CoefficientPath.piecewise(raw["times"], raw["values"])
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{name}: {exc}") from exc
    try:
        return CoefficientPath.constant(raw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def _get(section: dict, key: str, default=None, required: bool = False):
    if key in section:
        return section[key]
    if required:
        raise ConfigError(f"missing required key {key!r}")
    return default


def _build_grid(raw: dict) -> TimeGrid:
    grid = raw.get("grid")
    if not isinstance(grid, dict):
        raise ConfigError("missing [grid] section")
    try:
        return TimeGrid.uniform(float(_get(grid, "horizon", required=True)),
                                int(_get(grid, "steps", required=True)))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"grid: {exc}") from exc


def _build_lq(raw: dict, grid: TimeGrid) -> ProblemSpec:
    sec = raw.get("lq")
    if not isinstance(sec, dict):
        raise ConfigError("mode 'lq' needs an [lq] section")
    try:
        l = int(_get(sec, "control_dim", 1))
        d = int(_get(sec, "noise_dim", 1))
        kwargs = {}
        for name in ("A", "B", "C", "D", "b", "sigma", "Q", "R"):
            if name in sec:
                kwargs[name] = _coeff(sec[name], name)
        return ProblemSpec(
            grid=grid, n=int(_get(sec, "state_dim", 1)), l=l, d=d,
            G=float(_get(sec, "G", required=True)),
            h=float(_get(sec, "h", required=True)),
            mu1=float(_get(sec, "mu1", 0.0)), mu2=float(_get(sec, "mu2", 0.0)),
            x0=float(_get(sec, "x0", 1.0)), **kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"lq: {exc}") from exc


def _build_mv(raw: dict, grid: TimeGrid) -> MarketSpec:
    sec = raw.get("mv")
    if not isinstance(sec, dict):
        raise ConfigError("mode 'mv' needs an [mv] section")
    prem_raw = sec.get("premium")
    if not isinstance(prem_raw, dict):
        raise ConfigError("mv: missing [mv.premium] section")
    kind = _get(prem_raw, "kind", required=True)
    try:
        d = int(_get(sec, "noise_dim", 1))
        if kind == "deterministic":
            premium = DeterministicPremium(theta=_coeff(
                _get(prem_raw, "theta", required=True), "theta"))
        elif kind == "ou":
            premium = OUPremium(
                kappa=float(_get(prem_raw, "kappa", required=True)),
                mean=float(_get(prem_raw, "mean", 0.0)),
                vol=float(_get(prem_raw, "vol", required=True)),
                y0=float(_get(prem_raw, "y0", 0.0)),
                theta_bar=np.asarray(_get(prem_raw, "theta_bar", required=True),
                                     dtype=float),
                loading=np.asarray(_get(prem_raw, "loading", required=True),
                                   dtype=float),
                component=int(_get(prem_raw, "component", 0)))
        else:
            raise ConfigError(f"mv.premium: unknown kind {kind!r}")
        sig = sec.get("sigma_matrix")
        return MarketSpec(
            grid=grid, d=d, r=_coeff(_get(sec, "r", 0.0), "r"),
            premium=premium, mu1=float(_get(sec, "mu1", 0.0)),
            mu2=float(_get(sec, "mu2", 0.0)), x0=float(_get(sec, "x0", 1.0)),
            sigma_matrix=None if sig is None else np.asarray(sig, dtype=float))
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"mv: {exc}") from exc


def _build_sim(raw: dict, horizon: float) -> SimConfig:
    sec = raw.get("sim", {})
    if not isinstance(sec, dict):
        raise ConfigError("[sim] must be a section")
    try:
        eps = sec.get("epsilons")
        probes = sec.get("probe_times")
        return SimConfig(
            num_paths=int(_get(sec, "paths", 20000)),
            inner_paths=int(_get(sec, "inner_paths", _get(sec, "paths", 20000))),
            seed=int(_get(sec, "seed", 12345)),
            epsilons=None if eps is None else tuple(float(e) * horizon for e in eps),
            probe_times=None if probes is None
            else tuple(float(p) * horizon for p in probes),
            antithetic=bool(_get(sec, "antithetic", True)),
            feedback_readout=bool(_get(sec, "feedback_readout", False)),
            inconclusive_tol=float(_get(sec, "inconclusive_tol", 1e-6)))
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"sim: {exc}") from exc


def load_config(path) -> RunConfig:
    """Parse and validate a run configuration file."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    raw = _parse_raw(p)
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    mode = raw.get("mode")
    if mode not in ("lq", "mv"):
        raise ConfigError(f"mode must be 'lq' or 'mv', got {mode!r}")
    grid = _build_grid(raw)
    spec = market = None
    if mode == "lq":
        spec = _build_lq(raw, grid)
    else:
        market = _build_mv(raw, grid)
    sim = _build_sim(raw, grid.horizon)
    bs = raw.get("bsde", {})
    bsde = BsdeSettings(paths=int(_get(bs, "paths", 10000)),
                        degree=int(_get(bs, "degree", 3)),
                        scheme=str(_get(bs, "scheme", "exact")))
    ver = raw.get("verify", {})
    detune = float(_get(ver, "detune", 1.0))
    sha = hashlib.sha256(p.read_bytes()).hexdigest()
    return RunConfig(mode=mode, spec=spec, market=market, sim=sim, bsde=bsde,
                     detune=detune, path=str(p), sha256=sha, raw=raw)
