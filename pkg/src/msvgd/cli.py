"""Command-line entry point: particle runs, quadrature verification suites,
and the constants report.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 numeric abort.  Every output directory receives a manifest.json; existing
outputs are never overwritten without --force.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

from . import engine, theory
from .config import apply_overrides, build_runtime, config_from_dict, load_config
from .errors import ConfigError, DomainError, NumericsError
from .gridflow import MirroredFlow, descent_check, fisher_norm_margins
from .targets import smoothness_profile

REPORT_FILE = "report.json"
VERIFY_CSV_FILE = "verify.csv"
THEORY_FILE = "theory.json"

LEMMA_GAP_TOL = 1e-6
NORM_MARGIN_TOL = -1e-8

_PRESET_DIR = Path(__file__).resolve().parents[2] / "presets"


def _resolve_config_path(name: str) -> Path:
    """A literal path, or the name of a preset shipped in presets/."""
    direct = Path(name)
    if direct.is_file():
        return direct
    for candidate in (name, f"{name}.json"):
        preset = _PRESET_DIR / candidate
        if preset.is_file():
            return preset
    raise ConfigError(
        f"no config file or preset named {name!r} "
        f"(presets live in {_PRESET_DIR})"
    )


def _prepare_out_dir(out: str, force: bool, filenames: tuple) -> Path:
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    existing = [name for name in filenames if (out_dir / name).exists()]
    if existing and not force:
        raise ConfigError(
            f"output directory {out_dir} already contains {', '.join(existing)}; "
            "pass --force to overwrite"
        )
    return out_dir


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False)


def _write_json(path: Path, obj) -> None:
    path.write_text(_dump_json(obj) + "\n", encoding="utf-8")


def _write_verify_csv(path: Path, records, gamma: float) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "kl", "stein_fisher", "gamma", "bound_rhs"])
        for rec in records:
            writer.writerow([
                rec["step"],
                repr(rec["kl"]),
                repr(rec["stein_fisher"]),
                repr(gamma),
                repr(-(gamma / 2.0) * rec["stein_fisher"]),
            ])


def _profile_dict(profile) -> dict:
    values = {
        name: getattr(profile, name)
        for name in ("l0", "l1", "c_p", "p", "lam", "c_pi_p", "alpha")
    }
    values["provenance"] = {name: profile.tag(name) for name in values}
    return values


# ---------------------------------------------------------------------------
# run


def _cmd_run(args) -> int:
    cfg = load_config(_resolve_config_path(args.config))
    gamma = args.gamma
    if gamma is not None and gamma != "theorem":
        try:
            gamma = float(gamma)
        except ValueError:
            raise ConfigError(
                f"--gamma must be a positive number or \"theorem\", got {gamma!r}"
            ) from None
    cfg = apply_overrides(cfg, gamma=gamma, steps=args.steps, seed=args.seed,
                          particles=args.particles)
    out_dir = _prepare_out_dir(
        args.out, args.force,
        (engine.TRAJECTORY_FILE, engine.DIAGNOSTICS_FILE, engine.MANIFEST_FILE),
    )
    summary = engine.run(cfg, out_dir)
    print(f"run complete: {summary['steps_completed']} steps, "
          f"{summary['particles']} particles, outputs in {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# verify


def _verify_descent(flow, bundle, gamma: float, steps: int) -> tuple:
    out = flow.run(gamma, steps, keep_densities=True)
    report = descent_check(out["densities"], gamma, bundle.mirrored, bundle.kernel,
                           profile=bundle.profile)
    violations = [
        f"step {row['step']}: KL drop {row['kl_next'] - row['kl']:.6g} exceeds "
        f"bound {row['bound_rhs']:.6g}"
        for row in report["steps"] if not row["ok"]
    ]
    if not report.get("fixed_cap_ok", True):
        violations.append(
            f"step size {gamma:.6g} exceeds the certified fixed cap "
            f"{report['fixed_cap']:.6g}"
        )
    if not report.get("per_step_cap_ok", True):
        worst = min(report["per_step_caps"])
        violations.append(
            f"step size {gamma:.6g} exceeds the smallest per-state cap {worst:.6g}"
        )
    if not report["kl_strictly_decreased"]:
        violations.append("KL did not strictly decrease over the run")
    report["violations"] = violations
    return report, out["records"], bool(report["passed"]) and not violations


def _verify_lemmas(flow, gamma: float, steps: int) -> tuple:
    out = flow.run(gamma, steps, record_every=10, keep_densities=True)
    checks, violations = [], []
    for step in range(0, steps + 1, 10):
        gaps = flow.g_forms_gap(out["densities"][step])
        worst = max(gaps.values())
        ok = worst <= LEMMA_GAP_TOL
        checks.append({"step": step, **gaps, "ok": ok})
        if not ok:
            violations.append(
                f"step {step}: field formulas disagree by {worst:.3g} "
                f"(tolerance {LEMMA_GAP_TOL:g})"
            )
    report = {
        "tolerance": LEMMA_GAP_TOL,
        "gamma": gamma,
        "checks": checks,
        "violations": violations,
        "passed": not violations,
    }
    return report, out["records"], not violations


def _verify_bounds(flow, bundle, gamma: float, steps: int) -> tuple:
    out = flow.run(gamma, steps, record_every=10)
    rows = fisher_norm_margins(out["records"], bundle.kernel.bounds(),
                               flow.map.strong_convexity, flow.grid.dim)
    violations = [
        f"step {row['step']}: field norm {row['field_norm']:.6g} exceeds "
        f"bound {row['bound_rhs']:.6g}"
        for row in rows if row["margin"] < NORM_MARGIN_TOL
    ]
    report = {
        "tolerance": NORM_MARGIN_TOL,
        "gamma": gamma,
        "checks": rows,
        "violations": violations,
        "passed": not violations,
    }
    return report, out["records"], not violations


def _cmd_verify(args) -> int:
    cfg = load_config(_resolve_config_path(args.target))
    bundle = build_runtime(cfg)
    if bundle.kernel.adaptive:
        raise ConfigError(
            "verification suites run in the population limit and need a "
            "fixed-bandwidth kernel, not the median heuristic"
        )
    gamma = float(args.gamma) if args.gamma is not None else bundle.gamma
    gamma *= args.gamma_scale
    if not gamma > 0.0:
        raise ConfigError(f"resolved step size must be positive, got {gamma}")
    steps = cfg.steps if args.steps is None else args.steps
    if steps < 1:
        raise ConfigError(f"verification needs at least one step, got {steps}")

    flow = MirroredFlow(bundle.mirrored, bundle.kernel,
                        nodes=cfg.grid_nodes, halfwidth=cfg.grid_halfwidth)
    started = time.perf_counter()
    if args.suite == "descent":
        report, records, passed = _verify_descent(flow, bundle, gamma, steps)
    elif args.suite == "lemmas":
        report, records, passed = _verify_lemmas(flow, gamma, steps)
    else:
        report, records, passed = _verify_bounds(flow, bundle, gamma, steps)

    report = {
        "suite": args.suite,
        "config": cfg.to_dict(),
        "gamma_scale": args.gamma_scale,
        "grid_nodes": flow.grid.shape,
        **report,
    }
    out_dir = _prepare_out_dir(args.out, args.force,
                               (REPORT_FILE, VERIFY_CSV_FILE, engine.MANIFEST_FILE))
    _write_json(out_dir / REPORT_FILE, report)
    _write_verify_csv(out_dir / VERIFY_CSV_FILE, records, gamma)
    engine.write_manifest(
        out_dir, cfg,
        summary={"suite": args.suite, "passed": passed, "gamma": gamma,
                 "violations": report["violations"]},
        outputs=[REPORT_FILE, VERIFY_CSV_FILE],
        elapsed_s=time.perf_counter() - started,
    )
    if passed:
        print(f"verify {args.suite}: all checks passed, report in {out_dir}")
        return 0
    for line in report["violations"]:
        print(f"verify {args.suite}: {line}", file=sys.stderr)
    return 1


# ---------------------------------------------------------------------------
# theory


def _cmd_theory(args) -> int:
    cfg = load_config(_resolve_config_path(args.target))
    raw = cfg.to_dict()
    if args.map is not None:
        raw["map"] = args.map
        raw.pop("map_params", None)
    if args.kernel is not None:
        raw["kernel"] = args.kernel
        raw.pop("kernel_params", None)
    cfg = config_from_dict(raw)
    bundle = build_runtime(cfg, resolve_gamma=False)
    if bundle.kernel.adaptive:
        raise ConfigError(
            "the median-heuristic bandwidth has no fixed kernel constants; "
            "pick a fixed bandwidth for the constants report"
        )
    profile = bundle.profile
    if profile is None:
        profile = smoothness_profile(bundle.mirrored)
        if profile is not None:
            profile = profile.with_values("user", alpha=cfg.alpha)
    if profile is None:
        raise ConfigError(
            "no growth constants are available for this target; the Hessian "
            "growth bound does not hold, so there is nothing to report"
        )
    if args.p is not None and args.p != profile.p:
        raise ConfigError(
            f"growth exponent p={args.p} does not match the target's "
            f"exponent {profile.p}"
        )
    if args.lam is not None:
        profile = profile.with_values("user", lam=args.lam)
    if profile.c_pi_p is None:
        profile = profile.with_values(
            "empirical", c_pi_p=theory.c_pi_p(bundle.mirrored, profile.p)
        )

    dim = bundle.dim
    kernel_bounds = bundle.kernel.bounds()
    strong_convexity = bundle.mirror_map.strong_convexity
    w_p = theory.w_p_to_point_mass(profile.p, dim)
    kl0 = theory.kl0_upper_bound(bundle.mirrored, profile, dim=dim)
    gamma_general = theory.step_size_bound(
        profile, kernel_bounds, strong_convexity, dim, kl0
    )
    gamma_tp = None
    iters_tp = None
    if profile.lam is not None:
        gamma_tp = theory.step_size_bound_tp(
            profile, kernel_bounds, strong_convexity, dim, kl0
        )
        iters_tp = theory.iteration_estimate(profile, args.eps, dim, mode="tp")

    report = {
        "target": cfg.target,
        "map": cfg.map,
        "kernel": cfg.kernel,
        "dim": dim,
        "profile": _profile_dict(profile),
        "kernel_bounds": {"b1": kernel_bounds[0], "b2": kernel_bounds[1]},
        "strong_convexity": strong_convexity,
        "w_p_point_mass": w_p,
        "kl0_upper_bound": kl0,
        "gamma": {"general": gamma_general, "tp": gamma_tp},
        "eps": args.eps,
        "iterations": {
            "general": theory.iteration_estimate(profile, args.eps, dim, mode="general"),
            "tp": iters_tp,
            "note": "order estimate; hidden leading constants set to 1",
        },
    }
    print(_dump_json(report))
    if args.out is not None:
        started = time.perf_counter()
        out_dir = _prepare_out_dir(args.out, args.force,
                                   (THEORY_FILE, engine.MANIFEST_FILE))
        _write_json(out_dir / THEORY_FILE, report)
        engine.write_manifest(
            out_dir, cfg,
            summary={"gamma_general": gamma_general, "gamma_tp": gamma_tp},
            outputs=[THEORY_FILE],
            elapsed_s=time.perf_counter() - started,
        )
    return 0


# ---------------------------------------------------------------------------
# wiring


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msvgd",
        description="Constrained sampling via mirrored kernel updates: "
                    "particle runs, quadrature verification, and step-size constants.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="finite-particle run from a config file")
    run.add_argument("--config", required=True,
                     help="config JSON path or preset name")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--gamma", default=None,
                     help="override step size (number or \"theorem\")")
    run.add_argument("--steps", type=int, default=None, help="override step count")
    run.add_argument("--seed", type=int, default=None, help="override seed")
    run.add_argument("--particles", type=int, default=None,
                     help="override particle count")
    run.add_argument("--force", action="store_true",
                     help="overwrite existing outputs")
    run.set_defaults(func=_cmd_run)

    verify = sub.add_parser("verify", help="population-limit checks on a grid")
    verify.add_argument("--suite", required=True,
                        choices=("descent", "lemmas", "bounds"))
    verify.add_argument("--target", required=True,
                        help="config JSON path or preset name")
    verify.add_argument("--out", required=True, help="output directory")
    verify.add_argument("--gamma", type=float, default=None,
                        help="absolute step-size override")
    verify.add_argument("--gamma-scale", type=float, default=1.0,
                        help="multiplier on the resolved step size")
    verify.add_argument("--steps", type=int, default=None,
                        help="override the config's step count")
    verify.add_argument("--force", action="store_true",
                        help="overwrite existing outputs")
    verify.set_defaults(func=_cmd_verify)

    theo = sub.add_parser("theory", help="constants and step-size bounds as JSON")
    theo.add_argument("--target", required=True,
                      help="config JSON path or preset name")
    theo.add_argument("--map", default=None, help="override the mirror map name")
    theo.add_argument("--kernel", default=None, help="override the kernel name")
    theo.add_argument("-p", type=float, default=None,
                      help="growth exponent (must match the target's)")
    theo.add_argument("--lambda", dest="lam", type=float, default=None,
                      help="transport inequality constant")
    theo.add_argument("--eps", type=float, default=1e-2,
                      help="accuracy for the iteration estimates")
    theo.add_argument("--out", default=None,
                      help="also write theory.json into this directory")
    theo.add_argument("--force", action="store_true",
                      help="overwrite existing outputs")
    theo.set_defaults(func=_cmd_theory)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DomainError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericsError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
