"""Run configuration: flat JSON schema, validation, and object wiring.

A config file is a single flat JSON object.  load_config() rejects unknown
keys by name, fills defaults, and performs every check that does not require
running anything expensive; build_runtime() turns a validated config into the
live objects a run needs (map, target, kernel, resolved step size).
"""

from __future__ import annotations

import json
import numbers
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError
from .kernels import make_kernel
from .mirrors import EntropicSimplexMap, EuclideanMap, make_map
from .targets import (
    Dirichlet,
    MirroredPowerLaw,
    MirroredTarget,
    make_target,
    smoothness_profile,
)
from . import theory

_REQUIRED_KEYS = ("map", "kernel", "target", "particles", "steps", "seed")
_OPTIONAL_KEYS = (
    "gamma",
    "dim",
    "cadence",
    "alpha",
    "out",
    "map_params",
    "kernel_params",
    "target_params",
    "grid_nodes",
    "grid_halfwidth",
)
_ALLOWED_KEYS = frozenset(_REQUIRED_KEYS + _OPTIONAL_KEYS)

# lo/hi are the only map parameters that exist today; everything else about a
# map is determined by its name and the run dimension.
_MAP_PARAM_KEYS = {
    "euclidean": frozenset(),
    "entropic-simplex": frozenset(),
    "entropic-box": frozenset({"lo", "hi"}),
}
_MAP_DOMAIN = {
    "euclidean": "euclidean",
    "entropic-simplex": "simplex",
    "entropic-box": "box",
}


@dataclass(frozen=True)
class RunConfig:
    """Validated run description.  gamma is a positive float or "theorem"."""

    map: str
    kernel: str
    target: str
    particles: int
    steps: int
    seed: int
    gamma: object = "theorem"
    dim: int | None = None
    cadence: int = 10
    alpha: float = 2.0
    out: str | None = None
    map_params: dict = field(default_factory=dict)
    kernel_params: dict = field(default_factory=dict)
    target_params: dict = field(default_factory=dict)
    grid_nodes: int | None = None
    grid_halfwidth: float | None = None

    def to_dict(self) -> dict:
        """Flat JSON-ready form; omits unset optionals, keeps filled defaults."""
        out = {
            "map": self.map,
            "kernel": self.kernel,
            "target": self.target,
            "particles": self.particles,
            "steps": self.steps,
            "seed": self.seed,
            "gamma": self.gamma,
            "cadence": self.cadence,
            "alpha": self.alpha,
        }
        for key in ("dim", "out", "grid_nodes", "grid_halfwidth"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        for key in ("map_params", "kernel_params", "target_params"):
            value = getattr(self, key)
            if value:
                out[key] = dict(value)
        return out


def _as_int(raw: dict, key: str, default=None, minimum=None):
    if key not in raw:
        return default
    value = raw[key]
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise ConfigError(f"config key {key!r} must be an integer, got {value!r}")
    value = int(value)
    if minimum is not None and value < minimum:
        raise ConfigError(f"config key {key!r} must be >= {minimum}, got {value}")
    return value


def _as_number(raw: dict, key: str, default=None, minimum=None, strict=False):
    if key not in raw:
        return default
    value = raw[key]
    if isinstance(value, bool) or not isinstance(value, numbers.Real):
        raise ConfigError(f"config key {key!r} must be a number, got {value!r}")
    value = float(value)
    if minimum is not None and (value < minimum or (strict and value == minimum)):
        op = ">" if strict else ">="
        raise ConfigError(f"config key {key!r} must be {op} {minimum}, got {value}")
    return value


def _as_params(raw: dict, key: str) -> dict:
    value = raw.get(key, {})
    if not isinstance(value, dict):
        raise ConfigError(f"config key {key!r} must be an object, got {value!r}")
    return dict(value)


def config_from_dict(raw: dict) -> RunConfig:
    """Validate a parsed JSON object and return the config it describes."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a single JSON object")
    for key in sorted(raw):
        if key not in _ALLOWED_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
    for key in _REQUIRED_KEYS:
        if key not in raw:
            raise ConfigError(f"config key {key!r} is required")
    for key in ("map", "kernel", "target"):
        if not isinstance(raw[key], str):
            raise ConfigError(f"config key {key!r} must be a string, got {raw[key]!r}")

    gamma = raw.get("gamma", "theorem")
    if isinstance(gamma, str):
        if gamma != "theorem":
            raise ConfigError(
                f"config key 'gamma' must be a positive number or \"theorem\", got {gamma!r}"
            )
    elif isinstance(gamma, bool) or not isinstance(gamma, numbers.Real):
        raise ConfigError(
            f"config key 'gamma' must be a positive number or \"theorem\", got {gamma!r}"
        )
    else:
        gamma = float(gamma)
        if not gamma > 0:
            raise ConfigError(f"config key 'gamma' must be > 0, got {gamma}")

    out = raw.get("out")
    if out is not None and not isinstance(out, str):
        raise ConfigError(f"config key 'out' must be a string, got {out!r}")

    cfg = RunConfig(
        map=raw["map"],
        kernel=raw["kernel"],
        target=raw["target"],
        particles=_as_int(raw, "particles", minimum=1),
        steps=_as_int(raw, "steps", minimum=0),
        seed=_as_int(raw, "seed"),
        gamma=gamma,
        dim=_as_int(raw, "dim", minimum=1),
        cadence=_as_int(raw, "cadence", default=10, minimum=1),
        alpha=_as_number(raw, "alpha", default=2.0, minimum=1.0, strict=True),
        out=out,
        map_params=_as_params(raw, "map_params"),
        kernel_params=_as_params(raw, "kernel_params"),
        target_params=_as_params(raw, "target_params"),
        grid_nodes=_as_int(raw, "grid_nodes", minimum=8),
        grid_halfwidth=_as_number(raw, "grid_halfwidth", minimum=0.0, strict=True),
    )
    # cross-field checks need the actual objects; build them once and discard
    build_runtime(cfg, resolve_gamma=False)
    return cfg


def load_config(path) -> RunConfig:
    """Read and validate a JSON config file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return config_from_dict(raw)


def apply_overrides(cfg: RunConfig, gamma=None, steps=None, seed=None, particles=None) -> RunConfig:
    """Command-line overrides, re-validated through the same path as a file."""
    raw = cfg.to_dict()
    if gamma is not None:
        raw["gamma"] = gamma
    if steps is not None:
        raw["steps"] = steps
    if seed is not None:
        raw["seed"] = seed
    if particles is not None:
        raw["particles"] = particles
    return config_from_dict(raw)


def certified_profile(mirrored: MirroredTarget):
    """Catalog growth constants, or None when only fitted estimates exist.

    Only profiles whose constants hold by derivation may back a "theorem"
    step size; the sampled-envelope fallback in targets.smoothness_profile is
    advisory and deliberately not accepted here.
    """
    base, mp = mirrored.base, mirrored.map
    if isinstance(base, MirroredPowerLaw) and isinstance(mp, EuclideanMap):
        return smoothness_profile(mirrored)
    if isinstance(base, Dirichlet) and isinstance(mp, EntropicSimplexMap):
        return smoothness_profile(mirrored)
    return None


@dataclass
class RuntimeBundle:
    """Live objects for one run, with the step size fully resolved."""

    config: RunConfig
    dim: int
    mirror_map: object
    target: object
    mirrored: MirroredTarget
    kernel: object
    profile: object
    gamma: float | None
    gamma_mode: str
    kl0_upper: float | None = None


def _build_map(cfg: RunConfig, dim: int, target):
    allowed = _MAP_PARAM_KEYS.get(cfg.map)
    if allowed is None:
        raise ConfigError(f"unknown mirror map {cfg.map!r}")
    for key in sorted(cfg.map_params):
        if key not in allowed:
            raise ConfigError(f"unknown map_params key {key!r} for map {cfg.map!r}")
    params = dict(cfg.map_params)
    if cfg.map == "entropic-box":
        target_lo = getattr(target, "lo", None)
        target_hi = getattr(target, "hi", None)
        lo = params.get("lo", target_lo)
        hi = params.get("hi", target_hi)
        if lo is None or hi is None:
            raise ConfigError("entropic-box map needs lo and hi (from map_params or the target)")
        if target_lo is not None:
            if not (np.allclose(lo, target_lo) and np.allclose(hi, target_hi)):
                raise ConfigError("entropic-box map bounds do not match the target's box")
        return make_map("entropic-box", lo=lo, hi=hi)
    try:
        return make_map(cfg.map, dim=dim)
    except DomainError as exc:
        raise ConfigError(str(exc)) from None


def build_runtime(cfg: RunConfig, resolve_gamma: bool = True) -> RuntimeBundle:
    """Wire a validated config into live objects.

    With resolve_gamma=False only the structural checks run (used while
    loading); "theorem" mode is still verified to be available, but the
    quadrature that prices it is deferred to the actual run.
    """
    target = make_target(cfg.target, cfg.target_params)
    dim = target.dim
    if cfg.dim is not None and cfg.dim != dim:
        raise ConfigError(f"config dim {cfg.dim} does not match target dimension {dim}")

    domain = _MAP_DOMAIN.get(cfg.map)
    if domain is None:
        raise ConfigError(f"unknown mirror map {cfg.map!r}")
    if domain != target.domain:
        raise ConfigError(
            f"map {cfg.map!r} expects a {domain} target but {cfg.target!r} lives on a {target.domain}"
        )

    mirror_map = _build_map(cfg, dim, target)
    try:
        kernel = make_kernel(cfg.kernel, cfg.kernel_params, mirror_map=mirror_map)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for kernel {cfg.kernel!r}: {exc}") from None
    mirrored = MirroredTarget(target, mirror_map)
    profile = certified_profile(mirrored)
    if profile is not None and cfg.alpha != profile.alpha:
        profile = profile.with_values("user", alpha=cfg.alpha)

    gamma_mode = "theorem" if cfg.gamma == "theorem" else "explicit"
    if gamma_mode == "theorem":
        if profile is None:
            raise ConfigError(
                "gamma \"theorem\" needs certified growth constants (l0, l1, c_p, p) "
                f"and none are cataloged for target {cfg.target!r} under map {cfg.map!r}; "
                "pass an explicit gamma"
            )
        if kernel.adaptive:
            raise ConfigError(
                "gamma \"theorem\" needs fixed kernel bounds; "
                "a median-heuristic bandwidth changes every step"
            )
        if dim > 2:
            raise ConfigError(
                "gamma \"theorem\" prices its constants by dual-space quadrature, "
                f"available for dim <= 2 only (target has dim {dim})"
            )

    gamma = None if gamma_mode == "theorem" else float(cfg.gamma)
    kl0_upper = None
    if gamma_mode == "theorem" and resolve_gamma:
        if profile.c_pi_p is None:
            moment = theory.c_pi_p(mirrored, profile.p)
            profile = profile.with_values("empirical", c_pi_p=moment)
        kl0_upper = theory.kl0_upper_bound(mirrored, profile, dim=dim)
        gamma = theory.step_size_bound(
            profile, kernel.bounds(), mirror_map.strong_convexity, dim, kl0_upper
        )

    return RuntimeBundle(
        config=cfg,
        dim=dim,
        mirror_map=mirror_map,
        target=target,
        mirrored=mirrored,
        kernel=kernel,
        profile=profile,
        gamma=gamma,
        gamma_mode=gamma_mode,
        kl0_upper=kl0_upper,
    )
