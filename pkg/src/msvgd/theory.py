"""Constants, growth functions, and admissible step sizes for the mirrored flow.

Almost everything here evaluates a closed-form expression: moments of the
standard normal start, an upper bound on its KL divergence from the target,
the largest step size under which the descent inequality is certified, and
iteration-count estimates at unit leading constants.  The exponential-moment
constant ``c_pi_p`` is the exception: it is bounded from above by 1D/2D
quadrature, with an explicit tail-decay test standing in for the moment
assumption it encodes.  Upper bounds are the safe direction throughout: a
larger ``c_pi_p`` or initial-KL bound only shrinks the certified step size.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ConfigError, DomainError, NumericsError

PROVENANCE_TAGS = ("analytic", "empirical", "user")

_PROFILE_FIELDS = ("l0", "l1", "c_p", "p", "lam", "c_pi_p", "alpha")


@dataclass(frozen=True)
class SmoothnessProfile:
    """Growth constants of a mirrored potential V.

    ``l0``/``l1`` bound the Hessian through ||hess V|| <= l0 + l1 ||grad V||;
    ``c_p`` and ``p`` bound the gradient through
    ||grad V(x)|| <= c_p (||x||^p + 1).  ``lam`` is an optional transport
    inequality constant (W_p^2 <= 2 KL / lam, usable for p in [1, 2]),
    ``c_pi_p`` an optional exponential-moment constant, and ``alpha`` > 1 the
    free split parameter of the step-size formula.  ``provenance`` tags each
    field "analytic", "empirical", or "user" (the default for untagged
    fields).
    """

    l0: float
    l1: float
    c_p: float
    p: float
    lam: float | None = None
    c_pi_p: float | None = None
    alpha: float = 2.0
    provenance: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        checks = (
            (self.l0 >= 0.0, "l0 must be >= 0"),
            (self.l1 >= 0.0, "l1 must be >= 0"),
            (self.c_p > 0.0, "c_p must be > 0"),
            (self.p >= 1.0, "p must be >= 1"),
            (self.lam is None or self.lam > 0.0, "lam must be > 0 when given"),
            (self.c_pi_p is None or self.c_pi_p >= 0.0, "c_pi_p must be >= 0 when given"),
            (self.alpha > 1.0, "alpha must be > 1"),
        )
        for ok, message in checks:
            if not ok:
                raise ConfigError(f"smoothness profile: {message}")
        for name, tag in self.provenance.items():
            if name not in _PROFILE_FIELDS:
                raise ConfigError(f"smoothness profile: provenance for unknown field {name!r}")
            if tag not in PROVENANCE_TAGS:
                raise ConfigError(
                    f"smoothness profile: provenance tag {tag!r} for {name!r} "
                    f"not one of {PROVENANCE_TAGS}"
                )

    def tag(self, name: str) -> str:
        if name not in _PROFILE_FIELDS:
            raise ConfigError(f"smoothness profile: unknown field {name!r}")
        return self.provenance.get(name, "user")

    def with_values(self, tag: str, **updates: float) -> "SmoothnessProfile":
        """Copy with updated constants, tagging each updated field with `tag`."""
        provenance = dict(self.provenance)
        provenance.update({name: tag for name in updates})
        return dataclasses.replace(self, provenance=provenance, **updates)


@dataclass
class DiagnosticsRecord:
    """One logged row of a run: current step, Stein-Fisher estimate, local
    smoothness level, step size, and (quadrature runs only) the KL value and
    per-bound margins."""

    step: int
    stein_fisher: float
    a_n: float
    gamma: float
    kl: float | None = None
    margins: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        # The estimator is a nonnegative quadratic form; anything below the
        # roundoff floor means the estimate itself is broken.
        if self.stein_fisher < -1e-10:
            raise NumericsError(
                f"stein_fisher estimate {self.stein_fisher!r} below the roundoff floor",
                step=self.step,
            )


def g_p(x: float, p: float) -> float:
    """Growth function x**(1/p) + (x/2)**(1/(2p)), increasing in x >= 0.

    Converts a KL value into the transport-distance scale it certifies.
    """
    if p < 1.0:
        raise DomainError(f"g_p requires p >= 1, got {p!r}")
    if x < 0.0:
        raise DomainError(f"g_p requires x >= 0, got {x!r}")
    return x ** (1.0 / p) + (0.5 * x) ** (0.5 / p)


def gaussian_moment(p: float, d: int) -> float:
    """E ||X||^(p+1) for X ~ N(0, I_d): 2^((p+1)/2) Gamma((p+d+1)/2) / Gamma(d/2).

    Evaluated through log-gamma so large (p, d) stay finite in float64.
    """
    if d < 1:
        raise DomainError(f"gaussian_moment requires d >= 1, got {d!r}")
    if p <= -d - 1:
        raise DomainError(f"gaussian_moment requires p > -d-1, got p={p!r} at d={d}")
    return math.exp(
        0.5 * (p + 1.0) * math.log(2.0)
        + math.lgamma(0.5 * (p + d + 1.0))
        - math.lgamma(0.5 * d)
    )


def w_p_to_point_mass(p: float, d: int) -> float:
    """p-Wasserstein distance from N(0, I_d) to a point mass at the origin.

    Equals the p-th moment root (E ||X||^p)^(1/p); the coupling to a point
    mass is forced, so this is exact, not a bound.
    """
    if p < 1.0:
        raise DomainError(f"w_p_to_point_mass requires p >= 1, got {p!r}")
    return gaussian_moment(p - 1.0, d) ** (1.0 / p)


def _reciprocal_or_inf(z: float) -> float:
    return math.inf if z == 0.0 else 1.0 / z


def step_size_cap(
    x: float,
    profile: SmoothnessProfile,
    kernel_bounds: tuple[float, float],
    strong_convexity: float,
    dim: int,
) -> float:
    """Largest certified step size when the mean mirrored-gradient norm is at
    most ``x``.  Nonincreasing in ``x``.

    Degenerate constants (l1 = 0, or a vanishing kernel-derivative bound)
    send individual pieces to infinity, and they drop out of the min; the
    result is finite whenever b1 > 0 and l0 + l1 x > 0.
    """
    if x < 0.0:
        raise DomainError(f"step_size_cap requires x >= 0, got {x!r}")
    b1, b2 = (float(b) for b in kernel_bounds)
    k = float(strong_convexity)
    d = float(dim)
    a = profile.alpha
    lead = min(_reciprocal_or_inf(b1 * profile.l1), (a - 1.0) * k * _reciprocal_or_inf(a * b2 * d))
    first = lead * (k * _reciprocal_or_inf(k * b1 * x + b2 * d))
    second = k * k * _reciprocal_or_inf(
        a * a * b2 * b2 * d * d
        + k * k * b1 * b1 * (math.e - 1.0) * (profile.l1 * x + profile.l0)
    )
    return min(first, second)


def step_size_cap_exact(
    field_norm: float,
    growth_stat: float,
    profile: SmoothnessProfile,
    kernel_bounds: tuple[float, float],
    strong_convexity: float,
    dim: int,
) -> float:
    """Per-state admissible step size from the measured quantities directly:
    the RKHS norm of the update field and the statistic l0 + l1 E||grad V||.

    step_size_cap is this formula with both arguments replaced by their
    worst-case bounds in terms of x, so
    step_size_cap(x) == step_size_cap_exact(b1 x + b2 d / K, l0 + l1 x).
    """
    if field_norm < 0.0 or growth_stat < 0.0:
        raise DomainError("step_size_cap_exact requires nonnegative arguments")
    b1, b2 = (float(b) for b in kernel_bounds)
    k = float(strong_convexity)
    d = float(dim)
    a = profile.alpha
    first = (a - 1.0) * k * _reciprocal_or_inf(a * b2 * d * field_norm)
    second = _reciprocal_or_inf(b1 * field_norm * profile.l1)
    third = k * k * _reciprocal_or_inf(
        a * a * b2 * b2 * d * d + k * k * b1 * b1 * (math.e - 1.0) * growth_stat
    )
    return min(first, second, third)


def exp_grad_bound(
    kl_n_upper: float,
    kl0_upper: float,
    w_p_mu0: float,
    profile: SmoothnessProfile,
    mode: str = "general",
) -> float:
    """Upper bound on the mean mirrored-gradient norm at step n, given KL
    upper bounds at step n and step 0.

    The KL arguments are floored at zero: the initial-KL formula can dip
    below zero for small dimension, and a negative divergence certifies the
    same zero transport distance.
    """
    kl_n = max(float(kl_n_upper), 0.0)
    kl_0 = max(float(kl0_upper), 0.0)
    w = float(w_p_mu0)
    if w < 0.0:
        raise DomainError(f"exp_grad_bound requires w_p_mu0 >= 0, got {w!r}")
    p = profile.p
    if mode == "general":
        if profile.c_pi_p is None:
            raise ConfigError(
                "profile has no c_pi_p exponential-moment constant; compute one "
                "with c_pi_p() or use the transport-inequality mode (lam)"
            )
        reach = profile.c_pi_p * (g_p(kl_n, p) + g_p(kl_0, p))
    elif mode == "tp":
        if profile.lam is None:
            raise ConfigError("transport-inequality mode requires lam in the profile")
        if not 1.0 <= p <= 2.0:
            raise ConfigError(f"transport-inequality mode requires 1 <= p <= 2, got p={p!r}")
        reach = math.sqrt(2.0 * kl_n / profile.lam) + math.sqrt(2.0 * kl_0 / profile.lam)
    else:
        raise ConfigError(f"unknown mode {mode!r}; expected 'general' or 'tp'")
    return profile.c_p * (reach + w) ** p + profile.c_p


def step_size_bound(
    profile: SmoothnessProfile,
    kernel_bounds: tuple[float, float],
    strong_convexity: float,
    dim: int,
    kl0_upper: float,
    w_p_mu0: float | None = None,
) -> float:
    """Fixed step size certified for every step of a run started at N(0, I).

    Evaluates the cap at the worst-case gradient-norm bound, with the KL at
    step n replaced by its step-0 upper bound; descent keeps that replacement
    valid, so one γ serves the whole run.
    """
    if w_p_mu0 is None:
        w_p_mu0 = w_p_to_point_mass(profile.p, dim)
    x = exp_grad_bound(kl0_upper, kl0_upper, w_p_mu0, profile, mode="general")
    return step_size_cap(x, profile, kernel_bounds, strong_convexity, dim)


def step_size_bound_tp(
    profile: SmoothnessProfile,
    kernel_bounds: tuple[float, float],
    strong_convexity: float,
    dim: int,
    kl0_upper: float,
    w_p_mu0: float | None = None,
) -> float:
    """Fixed certified step size in the transport-inequality regime (needs
    ``lam`` and 1 <= p <= 2 in the profile)."""
    if w_p_mu0 is None:
        w_p_mu0 = w_p_to_point_mass(profile.p, dim)
    x = exp_grad_bound(kl0_upper, kl0_upper, w_p_mu0, profile, mode="tp")
    return step_size_cap(x, profile, kernel_bounds, strong_convexity, dim)


def iteration_estimate(profile: SmoothnessProfile, eps: float, d: int, mode: str = "general") -> int:
    """Order-of-magnitude iteration count to drive the averaged Stein-Fisher
    value below ``eps``, with every hidden leading constant set to 1.

    An order estimate, not a guarantee: the 1/eps scaling and the dimension
    exponent are the meaningful content.
    """
    if eps <= 0.0:
        raise ConfigError(f"iteration_estimate requires eps > 0, got {eps!r}")
    p = profile.p
    if mode == "general":
        if profile.c_pi_p is None:
            raise ConfigError("iteration_estimate mode 'general' requires c_pi_p in the profile")
        log_n = (
            p * math.log(8.0)
            + p * math.log(profile.c_pi_p)
            + 2.0 * (math.lgamma(0.5 * (p + d + 1.0)) - math.lgamma(0.5 * d))
            - 2.0 * math.log(p + 1.0)
            - math.log(eps)
        )
    elif mode == "tp":
        if profile.lam is None:
            raise ConfigError("iteration_estimate mode 'tp' requires lam in the profile")
        log_n = (
            0.25 * (p + 2.0) * (p + 1.0) * math.log(float(d))
            - 0.5 * p * math.log(profile.lam)
            - math.log(eps)
        )
    else:
        raise ConfigError(f"unknown mode {mode!r}; expected 'general' or 'tp'")
    if log_n > 700.0:
        raise NumericsError(f"iteration estimate overflows float64 (log value {log_n:.1f})")
    return max(1, math.ceil(math.exp(log_n)))


def a_n(ensemble, mirrored_target, profile: SmoothnessProfile) -> float:
    """Smoothness level along the current cloud: l0 + l1 * mean ||grad V||.

    Accepts a particle ensemble (its dual positions are used) or a bare
    (n, d) array of dual points.
    """
    if profile.l1 == 0.0:
        return profile.l0
    dual = np.asarray(getattr(ensemble, "dual", ensemble), dtype=float)
    grad = np.asarray(mirrored_target.grad_potential(dual), dtype=float)
    return profile.l0 + profile.l1 * float(np.mean(np.sqrt(np.sum(grad * grad, axis=1))))


def stein_fisher_particles(ensemble, target, mirror_map, kernel, chunk: int = 256) -> float:
    """Squared kernel-space norm of the update field over the ensemble: the
    V-statistic of the score-plus-divergence operand.

    Reduces in fixed block order, so a given ensemble always produces the
    same float.  Nonnegative up to roundoff.  A point mass still scores
    positive through the kernel-derivative block; the statistic detects
    non-convergence, not mere stationarity of the velocity.
    """
    theta = np.asarray(getattr(ensemble, "primal", ensemble), dtype=float)
    n, _ = theta.shape
    score = np.asarray(target.grad_log_density(theta), dtype=float)
    hinv = np.asarray(mirror_map.hess_psi_inv(theta), dtype=float)
    operand = np.einsum("nde,ne->nd", hinv, score)
    operand += np.asarray(mirror_map.div_hess_psi_inv(theta), dtype=float)
    total = 0.0
    for start in range(0, n, chunk):
        rows = slice(start, min(start + chunk, n))
        gram = kernel.gram(theta[rows], theta)
        grad1 = kernel.grad1_gram(theta[rows], theta)
        grad12 = kernel.grad12_gram(theta[rows], theta)
        total += float(np.einsum("bj,bd,jd->", gram, operand[rows], operand))
        # The two cross blocks are equal after summing over all pairs, so one
        # of them is evaluated and doubled.
        total += 2.0 * float(np.einsum("jd,bde,bje->", operand, hinv[rows], grad1))
        total += float(np.einsum("bde,bjef,jfd->", hinv[rows], grad12, hinv))
    return total / float(n * n)


def _grid_1d(nodes: int, halfwidth: float) -> tuple[np.ndarray, np.ndarray]:
    ax = np.linspace(-halfwidth, halfwidth, nodes)
    logw = np.full(nodes, math.log(ax[1] - ax[0]))
    logw[0] -= math.log(2.0)
    logw[-1] -= math.log(2.0)
    return ax[:, None], logw


def _grid_2d(nodes: int, halfwidth: float) -> tuple[np.ndarray, np.ndarray]:
    ax = np.linspace(-halfwidth, halfwidth, nodes)
    w = np.full(nodes, ax[1] - ax[0])
    w[0] *= 0.5
    w[-1] *= 0.5
    logw1 = np.log(w)
    pts = np.stack(np.meshgrid(ax, ax, indexing="ij"), axis=-1).reshape(-1, 2)
    return pts, (logw1[:, None] + logw1[None, :]).reshape(-1)


def _tail_clears(vals: np.ndarray, dim: int, nodes: int, drop: float) -> bool:
    peak = float(np.max(vals))
    if not np.isfinite(peak):
        return False
    if dim == 1:
        edge = max(float(vals[0]), float(vals[-1]))
        return edge <= peak - drop and vals[0] <= vals[1] and vals[-1] <= vals[-2]
    square = vals.reshape(nodes, nodes)
    border = max(
        float(np.max(square[0, :])),
        float(np.max(square[-1, :])),
        float(np.max(square[:, 0])),
        float(np.max(square[:, -1])),
    )
    return border <= peak - drop


def _rays_keep_falling(logf, dim: int, halfwidth: float, doublings: int = 12) -> bool:
    # A dip-then-rise integrand (say s|x|^3 against a Gaussian tail) can look
    # converged on a small box; probe geometrically spaced radii along fixed
    # rays and demand the log-integrand keeps falling out to 2^12 box widths.
    if dim == 1:
        rays = np.array([[1.0], [-1.0]])
    else:
        diag = math.sqrt(0.5)
        rays = np.array(
            [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0],
             [diag, diag], [diag, -diag], [-diag, diag], [-diag, -diag]]
        )
    radii = halfwidth * 2.0 ** np.arange(1, doublings + 1)
    pts = (radii[:, None, None] * rays[None, :, :]).reshape(-1, dim)
    vals = np.asarray(logf(pts), dtype=float).reshape(len(radii), len(rays))
    return bool(np.all(np.diff(vals, axis=0) <= 0.0))


def _expand_until_decay(logf, dim: int, nodes: int, start: float, drop: float = 45.0,
                        max_doublings: int = 14):
    """Grow a centered box until the log-integrand at its edge sits `drop`
    nats under the interior peak and keeps falling along rays far beyond the
    box.  Returns (points, log-weights, values), or None when no bracketed
    box passes (a divergent integrand)."""
    halfwidth = float(start)
    for _ in range(max_doublings + 1):
        pts, logw = (_grid_1d if dim == 1 else _grid_2d)(nodes, halfwidth)
        vals = np.asarray(logf(pts), dtype=float)
        if _tail_clears(vals, dim, nodes, drop) and _rays_keep_falling(logf, dim, halfwidth):
            return pts, logw, vals
        halfwidth *= 2.0
    return None


def _default_nodes(dim: int) -> int:
    return 4096 if dim == 1 else 256


def _target_grid(target, nodes: int | None):
    dim = int(target.dim)
    if dim > 2:
        raise ConfigError(f"quadrature constants support dim <= 2, got dim={dim}")
    nodes = int(nodes) if nodes is not None else _default_nodes(dim)
    got = _expand_until_decay(
        lambda q: -np.asarray(target.potential(q), dtype=float), dim, nodes, start=8.0
    )
    if got is None:
        raise NumericsError("target density does not decay on any bracketed box")
    return dim, nodes, got


def dual_log_partition(target, nodes: int | None = None) -> float:
    """log of the unnormalized mass of exp(-V) over the dual space, by
    trapezoid quadrature on an automatically bracketed box (dim <= 2)."""
    _, _, (_, logw, vals) = _target_grid(target, nodes)
    return float(np.logaddexp.reduce(np.sort(vals + logw)))


def kl0_upper_bound(target, profile: SmoothnessProfile, dim: int | None = None,
                    log_partition: float | None = None) -> float:
    """Upper bound on KL(N(0, I_d) | normalized dual density of the target).

    The formula needs the potential of the *normalized* density at the
    origin; ``log_partition`` (computed by quadrature when not supplied) is
    added to ``target.potential(0)`` to normalize it.  The value can be
    negative in small dimension; consumers floor it at zero.
    """
    d = int(dim) if dim is not None else int(target.dim)
    if log_partition is None:
        log_partition = dual_log_partition(target)
    v0 = float(np.asarray(target.potential(np.zeros((1, d))), dtype=float).reshape(-1)[0])
    v0 += float(log_partition)
    p, c = profile.p, profile.c_p
    moment_term = (c / (p + 1.0)) * (
        gaussian_moment(p, d) + (p + 1.0) * gaussian_moment(0.0, d)
    )
    return -0.5 * d * math.log(2.0 * math.pi * math.e) + v0 + moment_term


def c_pi_p(target, p: float, num_s: int = 64, s_min: float = 1e-3, s_max: float = 100.0,
           nodes: int | None = None) -> float:
    """Upper bound on the exponential-moment transport constant of the
    target's dual density at growth exponent ``p``.

    Minimizes 2 * ((3/2 + log E exp(s ||x - x0||^p)) / s)^(1/p) over a fixed
    log-spaced grid of s, with x0 at the quadrature mean.  Grid values whose
    integrand fails the tail-decay test are excluded; if every s fails, the
    exponential-moment assumption does not hold for this (target, p) and a
    domain error is raised.  The result is an upper bound on the infimum,
    never the infimum itself, which is the conservative direction for step
    sizes.
    """
    if p < 1.0:
        raise DomainError(f"c_pi_p requires p >= 1, got {p!r}")
    dim, nodes, (pts, logw, vals) = _target_grid(target, nodes)
    log_mass = float(np.logaddexp.reduce(np.sort(vals + logw)))
    weights = np.exp(vals + logw - log_mass)
    center = weights @ pts
    base_half = float(np.max(np.abs(pts)))

    def log_integrand(s):
        def inner(q):
            shift = np.sqrt(np.sum((q - center) ** 2, axis=1))
            return s * shift ** p - np.asarray(target.potential(q), dtype=float)
        return inner

    best = math.inf
    for s in np.logspace(math.log10(s_min), math.log10(s_max), num_s):
        got = _expand_until_decay(log_integrand(float(s)), dim, nodes, start=base_half)
        if got is None:
            continue
        _, logw_s, vals_s = got
        log_moment = float(np.logaddexp.reduce(np.sort(vals_s + logw_s))) - log_mass
        # The moment is >= 1 pointwise, so its log is >= 0; the floor only
        # absorbs quadrature roundoff.
        log_moment = max(log_moment, 0.0)
        best = min(best, ((1.5 + log_moment) / float(s)) ** (1.0 / p))
    if not math.isfinite(best):
        raise DomainError(
            f"exponential moment at exponent p={p!r} diverges for every sampled "
            f"growth rate in [{s_min!r}, {s_max!r}]"
        )
    return 2.0 * best
