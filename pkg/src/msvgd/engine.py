"""Finite-particle mirrored-flow stepper.

Particles are tracked in both charts: primal positions live inside the
constraint set, dual positions in the unconstrained space where the kernel
update is applied.  A step perturbs the dual cloud by the averaged kernel
field and maps back through the conjugate gradient, so feasibility is
automatic.  With the Euclidean map the whole scheme collapses to standard
SVGD, which is the reduction the tests pin.

Reductions over the particle index use fixed-order einsum paths, so a fixed
seed gives bit-identical trajectories.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import theory
from .config import RunConfig, RuntimeBundle, build_runtime
from .errors import NumericsError

TRAJECTORY_FILE = "trajectory.csv"
DIAGNOSTICS_FILE = "diagnostics.csv"
MANIFEST_FILE = "manifest.json"


@dataclass
class ParticleEnsemble:
    """Matched primal/dual particle clouds at one step.

    primal is (n, d) and strictly interior; dual is (n, d) with
    dual[i] = grad_psi(primal[i]) up to conjugate round-trip error (the
    stepper always derives primal from dual, never the other way).
    """

    primal: np.ndarray
    dual: np.ndarray
    step_index: int = 0

    def __post_init__(self):
        self.primal = np.asarray(self.primal, dtype=float)
        self.dual = np.asarray(self.dual, dtype=float)
        if self.primal.shape != self.dual.shape or self.primal.ndim != 2:
            raise ValueError("primal and dual must be matched (n, d) arrays")

    @property
    def size(self) -> int:
        return self.primal.shape[0]

    @property
    def dim(self) -> int:
        return self.primal.shape[1]


def init_ensemble(particles: int, dim: int, mirror_map, seed: int) -> ParticleEnsemble:
    """Standard-normal dual cloud from a seeded generator, mapped to primal."""
    rng = np.random.default_rng(seed)
    dual = rng.standard_normal((particles, dim))
    primal = mirror_map.grad_psi_star(dual)
    return ParticleEnsemble(primal=primal, dual=dual, step_index=0)


def update_field(ensemble: ParticleEnsemble, target, mirror_map, kernel) -> np.ndarray:
    """Averaged dual-space velocity field evaluated at every particle.

    velocity[i] = (1/n) sum_j [ k(t_i, t_j) (Hinv(t_j) s(t_j) + div Hinv(t_j))
                                + Hinv(t_j) grad1 k(t_j, t_i) ]

    with t the primal positions, s the primal score.  The second term is the
    product-rule remainder of the kernel-smoothed divergence; together they
    make the field a pure average of certified primal primitives.
    """
    theta = ensemble.primal
    n = theta.shape[0]
    score = np.asarray(target.grad_log_density(theta), dtype=float)
    hinv = np.asarray(mirror_map.hess_psi_inv(theta), dtype=float)
    div = np.asarray(mirror_map.div_hess_psi_inv(theta), dtype=float)
    operand = np.einsum("jde,je->jd", hinv, score) + div

    gram = kernel.gram(theta, theta)
    grad1 = kernel.grad1_gram(theta, theta)  # grad1[j, i] = d/dt_j k(t_j, t_i)
    drift = np.einsum("ij,jd->id", gram, operand)
    repulsion = np.einsum("jde,jie->id", hinv, grad1)
    return (drift + repulsion) / float(n)


def msvgd_step(ensemble: ParticleEnsemble, target, mirror_map, kernel, gamma: float) -> ParticleEnsemble:
    """One explicit step: refresh adaptive kernel state, move dual, map back."""
    if kernel.adaptive:
        kernel.update_bandwidth(ensemble.primal)
    velocity = update_field(ensemble, target, mirror_map, kernel)
    finite = np.isfinite(velocity).all(axis=1)
    if not finite.all():
        particle = int(np.argmin(finite))
        raise NumericsError(
            f"non-finite velocity for particle {particle}",
            step=ensemble.step_index,
            particle=particle,
        )
    dual = ensemble.dual + gamma * velocity
    try:
        primal = mirror_map.grad_psi_star(dual)
    except NumericsError as exc:
        raise NumericsError(str(exc), step=ensemble.step_index + 1,
                            particle=exc.particle) from exc
    return ParticleEnsemble(primal=primal, dual=dual, step_index=ensemble.step_index + 1)


def _fmt(value) -> str:
    """Shortest round-trip decimal form; plain ints stay plain."""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


class _RunWriter:
    """Owns the two CSV files and the logging cadence of a run."""

    def __init__(self, out_dir: Path, dim: int):
        self.trajectory_path = out_dir / TRAJECTORY_FILE
        self.diagnostics_path = out_dir / DIAGNOSTICS_FILE
        self._traj_fh = open(self.trajectory_path, "w", newline="", encoding="utf-8")
        self._diag_fh = open(self.diagnostics_path, "w", newline="", encoding="utf-8")
        self._traj = csv.writer(self._traj_fh)
        self._diag = csv.writer(self._diag_fh)
        names = [f"theta{k + 1}" for k in range(dim)] + [f"x{k + 1}" for k in range(dim)]
        self._traj.writerow(["step", "i"] + names)
        self._diag.writerow(["step", "stein_fisher", "a_n", "gamma", "bandwidth", "wallclock_ms"])
        self.logged_steps: list[int] = []

    def log(self, ensemble: ParticleEnsemble, record: theory.DiagnosticsRecord,
            bandwidth: float, wallclock_ms: float) -> None:
        step = ensemble.step_index
        for i in range(ensemble.size):
            row = [str(step), str(i)]
            row += [_fmt(v) for v in ensemble.primal[i]]
            row += [_fmt(v) for v in ensemble.dual[i]]
            self._traj.writerow(row)
        self._diag.writerow([
            str(step),
            _fmt(record.stein_fisher),
            _fmt(record.a_n),
            _fmt(record.gamma),
            _fmt(bandwidth),
            f"{wallclock_ms:.3f}",
        ])
        self.logged_steps.append(step)

    def close(self) -> None:
        self._traj_fh.close()
        self._diag_fh.close()


def run(cfg: RunConfig, out_dir, bundle: RuntimeBundle | None = None) -> dict:
    """Execute a configured run, writing trajectory and diagnostics CSVs.

    Rows are written at step 0, every cadence-th step, and the final step;
    steps=0 produces header-only files.  A numeric abort still flushes the
    last valid state and a manifest before the error propagates.  Returns a
    summary dict (also serialized into the manifest).
    """
    started = time.perf_counter()
    if bundle is None:
        bundle = build_runtime(cfg)
    elif bundle.gamma is None:
        bundle = build_runtime(cfg)
    gamma = bundle.gamma
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    kernel = bundle.kernel
    target = bundle.target
    mirror_map = bundle.mirror_map
    ensemble = init_ensemble(cfg.particles, bundle.dim, mirror_map, cfg.seed)
    if kernel.adaptive:
        kernel.update_bandwidth(ensemble.primal)

    writer = _RunWriter(out_dir, bundle.dim)
    first_sf = last_sf = None
    abort = None

    def snapshot(ens: ParticleEnsemble) -> float:
        sf = theory.stein_fisher_particles(ens, target, mirror_map, kernel)
        if bundle.profile is not None:
            an = theory.a_n(ens, bundle.mirrored, bundle.profile)
        else:
            an = float("nan")
        record = theory.DiagnosticsRecord(step=ens.step_index, stein_fisher=sf,
                                          a_n=an, gamma=gamma)
        bandwidth = getattr(kernel, "bandwidth", float("nan"))
        elapsed_ms = (time.perf_counter() - started) * 1000.0
        writer.log(ens, record, bandwidth, elapsed_ms)
        return sf

    try:
        if cfg.steps > 0:
            first_sf = last_sf = snapshot(ensemble)
        step = 0
        while step < cfg.steps:
            try:
                ensemble = msvgd_step(ensemble, target, mirror_map, kernel, gamma)
            except NumericsError as exc:
                if ensemble.step_index not in writer.logged_steps:
                    last_sf = snapshot(ensemble)
                abort = {
                    "step": exc.step,
                    "particle": exc.particle,
                    "message": str(exc),
                }
                raise
            step = ensemble.step_index
            if step % cfg.cadence == 0 or step == cfg.steps:
                last_sf = snapshot(ensemble)
    finally:
        writer.close()
        summary = {
            "steps_completed": ensemble.step_index,
            "particles": cfg.particles,
            "dim": bundle.dim,
            "gamma": gamma,
            "gamma_mode": bundle.gamma_mode,
            "kl0_upper": bundle.kl0_upper,
            "stein_fisher_first": first_sf,
            "stein_fisher_final": last_sf,
            "logged_steps": list(writer.logged_steps),
            "abort": abort,
        }
        write_manifest(out_dir, cfg, summary=summary,
                       outputs=[TRAJECTORY_FILE, DIAGNOSTICS_FILE],
                       elapsed_s=time.perf_counter() - started)
    return summary


def write_manifest(out_dir, cfg: RunConfig | None, summary: dict, outputs: list,
                   elapsed_s: float) -> Path:
    """Drop a manifest.json describing what was produced and from what."""
    from . import __version__

    manifest = {
        "build": {
            "package": "msvgd",
            "version": __version__,
            "numpy": np.__version__,
        },
        "config": None if cfg is None else cfg.to_dict(),
        "outputs": sorted(outputs),
        "summary": summary,
        "wallclock": {
            "elapsed_s": elapsed_s,
            "written_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        },
    }
    path = Path(out_dir) / MANIFEST_FILE
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
