"""Population-limit mirrored flow on dual-space grids.

Everything here works with densities on a fixed truncated grid instead of
particles: the update field is computed by quadrature, one step pushes the
density through x - gamma * g with the change-of-variables formula, and KL
and the smoothed Fisher value are read off the same grid.  This is the
verification side of the package: the descent inequality and the two-formula
identities for g are checked here at quadrature accuracy, in d <= 2.

Densities are carried in log space throughout.  Targets like exp(-x^4) reach
log values around -4000 on a grid wide enough to hold the standard-normal
start, so linear-space storage would underflow to exact zeros and poison the
finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import theory
from .errors import ConfigError, DomainError, NumericsError
from .targets import MirroredTarget

DEFAULT_NODES_1D = 4096
# Per-axis 2-d default stays inside the kernel precompute budget: streaming
# rebuilds the gram blocks every step and is orders of magnitude slower.
DEFAULT_NODES_2D = 48
TAIL_DROP_NATS = 45.0
# nodes whose density sits this far (nats) below the peak are excluded from
# finite differences in the primal chart, where the grid spacing collapses
PRIMAL_FD_DROP_NATS = 40.0
# precompute the kernel matrices over the grid when they fit in memory
PRECOMPUTE_BYTES = 700_000_000

G_FORMS = ("score", "dual", "primal")


# ---------------------------------------------------------------------------
# grids and densities


@dataclass(frozen=True)
class Grid:
    """Uniform tensor grid over a dual-space box."""

    axes: tuple

    def __post_init__(self):
        axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        if not 1 <= len(axes) <= 2:
            raise ConfigError(f"grids support 1 or 2 dimensions, got {len(axes)}")
        for a in axes:
            if a.ndim != 1 or a.size < 8:
                raise ConfigError("each grid axis needs at least 8 nodes")
            steps = np.diff(a)
            if not np.allclose(steps, steps[0], rtol=1e-12, atol=0.0):
                raise ConfigError("grid axes must be uniformly spaced")
        object.__setattr__(self, "axes", axes)

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple:
        return tuple(a.size for a in self.axes)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def spacing(self) -> tuple:
        return tuple(float(a[1] - a[0]) for a in self.axes)

    def nodes(self) -> np.ndarray:
        """All grid points, flattened in row-major order, shape (size, dim)."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def weights(self) -> np.ndarray:
        """Flat trapezoid quadrature weights matching nodes()."""
        parts = []
        for a in self.axes:
            w = np.full(a.size, a[1] - a[0])
            w[0] *= 0.5
            w[-1] *= 0.5
            parts.append(w)
        if self.dim == 1:
            return parts[0]
        return np.outer(parts[0], parts[1]).ravel()

    def refined(self) -> "Grid":
        """Same box with the spacing halved (for quadrature sanity checks)."""
        return Grid(tuple(np.linspace(a[0], a[-1], 2 * a.size - 1) for a in self.axes))


def _boundary_mask(shape: tuple) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    if len(shape) == 1:
        mask[0] = mask[-1] = True
    else:
        mask[0, :] = mask[-1, :] = True
        mask[:, 0] = mask[:, -1] = True
    return mask.ravel()


def grid_for_target(target, nodes: int | None = None, halfwidth: float | None = None) -> Grid:
    """Symmetric box wide enough that the tails of both the dual target and
    the standard-normal start carry less than 1e-12 mass.

    The criterion is a 45-nat drop of the unnormalized dual log density from
    its on-grid peak at every boundary node; the halfwidth starts at 8.0
    (which already pins the standard-normal tail) and doubles until the drop
    holds.
    """
    dim = target.dim
    if dim > 2:
        raise ConfigError(f"grid flows support dim <= 2, got dim={dim}")
    if nodes is None:
        nodes = DEFAULT_NODES_1D if dim == 1 else DEFAULT_NODES_2D
    if halfwidth is not None:
        if not halfwidth > 0:
            raise ConfigError(f"grid halfwidth must be positive, got {halfwidth}")
        return Grid(tuple(np.linspace(-halfwidth, halfwidth, nodes) for _ in range(dim)))

    half = 8.0
    for _ in range(13):
        grid = Grid(tuple(np.linspace(-half, half, nodes) for _ in range(dim)))
        logpi = -np.asarray(target.potential(grid.nodes()), dtype=float)
        peak = float(np.max(logpi))
        if float(np.max(logpi[_boundary_mask(grid.shape)])) <= peak - TAIL_DROP_NATS:
            return grid
        half *= 2.0
    raise NumericsError(
        "could not find a grid that contains the dual target's mass; "
        "its tails do not decay within the probed boxes"
    )


class GridDensity:
    """Probability density on a Grid, stored as flat log values."""

    def __init__(self, grid: Grid, log_density: np.ndarray):
        log_density = np.asarray(log_density, dtype=float).ravel()
        if log_density.size != grid.size:
            raise ConfigError(
                f"log density has {log_density.size} values for a grid of {grid.size} nodes"
            )
        if np.any(np.isnan(log_density)) or np.any(log_density == np.inf):
            raise DomainError("log density must be finite or -inf")
        self.grid = grid
        self.log_density = log_density

    @classmethod
    def from_density(cls, grid: Grid, density: np.ndarray) -> "GridDensity":
        density = np.asarray(density, dtype=float).ravel()
        if np.any(density <= 0.0):
            node = int(np.argmin(density))
            raise DomainError(
                f"density is not positive at node {node}; its log is undefined there"
            )
        return cls(grid, np.log(density))

    @property
    def density(self) -> np.ndarray:
        return np.exp(self.log_density)

    @property
    def log_mass(self) -> float:
        logs = self.log_density + np.log(self.grid.weights())
        return float(np.logaddexp.reduce(np.sort(logs)))

    @property
    def mass(self) -> float:
        return math.exp(self.log_mass)

    def renormalized(self) -> "GridDensity":
        return GridDensity(self.grid, self.log_density - self.log_mass)

    def expectation(self, values: np.ndarray) -> float:
        """Trapezoid integral of node values against this density."""
        return float(np.dot(self.grid.weights() * self.density, values))


def standard_normal_density(grid: Grid) -> GridDensity:
    nodes = grid.nodes()
    logrho = -0.5 * np.einsum("nd,nd->n", nodes, nodes) - 0.5 * grid.dim * math.log(2.0 * math.pi)
    return GridDensity(grid, logrho).renormalized()


# ---------------------------------------------------------------------------
# finite differences


def fornberg_weights(points: np.ndarray, center: float, order: int) -> np.ndarray:
    """Stencil weights w with sum(w * f(points)) approximating the order-th
    derivative of f at center, by Fornberg's recursion."""
    points = np.asarray(points, dtype=float)
    n = points.size
    if order >= n:
        raise ConfigError("stencil too short for the requested derivative order")
    c = np.zeros((n, order + 1))
    c[0, 0] = 1.0
    c1 = 1.0
    for i in range(1, n):
        c2 = 1.0
        mn = min(i, order)
        for j in range(i):
            c3 = points[i] - points[j]
            c2 *= c3
            if j == i - 1:
                for m in range(mn, 0, -1):
                    c[i, m] = c1 * (m * c[i - 1, m - 1] - (points[i - 1] - center) * c[i - 1, m]) / c2
                c[i, 0] = -c1 * (points[i - 1] - center) * c[i - 1, 0] / c2
            for m in range(mn, 0, -1):
                c[j, m] = ((points[i] - center) * c[j, m] - m * c[j, m - 1]) / c3
            c[j, 0] = (points[i] - center) * c[j, 0] / c3
        c1 = c2
    return c[:, order]


def _fd4_uniform(values: np.ndarray, h: float) -> np.ndarray:
    """Fourth-order first derivative along the last axis of a uniform grid,
    one-sided five-point stencils at the edges."""
    v = values
    out = np.empty_like(v)
    out[..., 2:-2] = (v[..., :-4] - 8.0 * v[..., 1:-3] + 8.0 * v[..., 3:-1] - v[..., 4:]) / (12.0 * h)
    offsets = np.arange(5.0)
    for row, center in ((0, 0.0), (1, 1.0), (-2, 3.0), (-1, 4.0)):
        w = fornberg_weights(offsets, center, 1) / h
        chunk = v[..., :5] if center < 2.5 else v[..., -5:]
        out[..., row] = np.dot(chunk, w)
    return out


def log_density_gradient(density: GridDensity) -> np.ndarray:
    """Gradient of log density at every node, shape (size, dim)."""
    if np.any(np.isneginf(density.log_density)):
        node = int(np.argmin(density.log_density))
        raise DomainError(
            f"density is zero at node {node}; the log gradient is undefined there"
        )
    grid = density.grid
    logrho = density.log_density.reshape(grid.shape)
    if grid.dim == 1:
        return _fd4_uniform(logrho, grid.spacing[0])[:, None]
    d0 = _fd4_uniform(logrho.T, grid.spacing[0]).T
    d1 = _fd4_uniform(logrho, grid.spacing[1])
    return np.stack([d0.ravel(), d1.ravel()], axis=1)


def nonuniform_gradient(points: np.ndarray, values: np.ndarray) -> np.ndarray:
    """First derivative on a strictly increasing 1D point set, five-point
    Fornberg stencils shifted one-sided at the ends."""
    points = np.asarray(points, dtype=float)
    values = np.asarray(values, dtype=float)
    n = points.size
    if n < 5:
        raise ConfigError("nonuniform_gradient needs at least 5 points")
    out = np.empty(n)
    for i in range(n):
        lo = min(max(i - 2, 0), n - 5)
        w = fornberg_weights(points[lo:lo + 5], points[i], 1)
        out[i] = float(np.dot(w, values[lo:lo + 5]))
    return out


# ---------------------------------------------------------------------------
# interpolation


def _hermite_pieces(x: np.ndarray, q: np.ndarray):
    h = x[1] - x[0]
    idx = np.clip(np.searchsorted(x, q, side="right") - 1, 0, x.size - 2)
    t = (q - x[idx]) / h
    return idx, t, h


def _hermite_value(x, v, m, q, extend: str):
    idx, t, h = _hermite_pieces(x, q)
    t2, t3 = t * t, t * t * t
    val = ((2 * t3 - 3 * t2 + 1) * v[idx] + (t3 - 2 * t2 + t) * h * m[idx]
           + (-2 * t3 + 3 * t2) * v[idx + 1] + (t3 - t2) * h * m[idx + 1])
    below, above = q < x[0], q > x[-1]
    if extend == "constant":
        val = np.where(below, v[0], val)
        val = np.where(above, v[-1], val)
    else:
        val = np.where(below, v[0] + m[0] * (q - x[0]), val)
        val = np.where(above, v[-1] + m[-1] * (q - x[-1]), val)
    return val


def _hermite_slope(x, v, m, q, extend: str):
    idx, t, h = _hermite_pieces(x, q)
    t2 = t * t
    val = ((6 * t2 - 6 * t) * v[idx] / h + (3 * t2 - 4 * t + 1) * m[idx]
           + (-6 * t2 + 6 * t) * v[idx + 1] / h + (3 * t2 - 2 * t) * m[idx + 1])
    below, above = q < x[0], q > x[-1]
    if extend == "constant":
        val = np.where(below | above, 0.0, val)
    else:
        val = np.where(below, m[0], val)
        val = np.where(above, m[-1], val)
    return val


def _bilinear(grid: Grid, flat_values: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of node values (trailing dims preserved),
    constant beyond the box."""
    ax0, ax1 = grid.axes
    vals = flat_values.reshape(grid.shape + flat_values.shape[1:])
    q0 = np.clip(q[:, 0], ax0[0], ax0[-1])
    q1 = np.clip(q[:, 1], ax1[0], ax1[-1])
    i = np.clip(np.searchsorted(ax0, q0, side="right") - 1, 0, ax0.size - 2)
    j = np.clip(np.searchsorted(ax1, q1, side="right") - 1, 0, ax1.size - 2)
    pad = (...,) + (None,) * (vals.ndim - 2)
    t = ((q0 - ax0[i]) / (ax0[1] - ax0[0]))[pad]
    u = ((q1 - ax1[j]) / (ax1[1] - ax1[0]))[pad]
    return ((1 - t) * (1 - u) * vals[i, j] + t * (1 - u) * vals[i + 1, j]
            + (1 - t) * u * vals[i, j + 1] + t * u * vals[i + 1, j + 1])


class FieldOnGrid:
    """Vector field sampled on a grid together with its nodal Jacobians.

    1D evaluation is cubic Hermite (the nodal derivatives are part of the
    data, not re-estimated) and constant beyond the box, which keeps the flow
    map injective out there.  2D evaluation is bilinear.
    """

    def __init__(self, grid: Grid, values: np.ndarray, derivs: np.ndarray):
        self.grid = grid
        self.values = np.asarray(values, dtype=float)
        self.derivs = np.asarray(derivs, dtype=float)
        expect_v = (grid.size, grid.dim)
        expect_d = (grid.size, grid.dim, grid.dim)
        if self.values.shape != expect_v or self.derivs.shape != expect_d:
            raise ConfigError(
                f"field shapes {self.values.shape}/{self.derivs.shape} do not match "
                f"expected {expect_v}/{expect_d}"
            )

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if self.grid.dim == 1:
            v = _hermite_value(self.grid.axes[0], self.values[:, 0],
                               self.derivs[:, 0, 0], points[:, 0], "constant")
            return v[:, None]
        return _bilinear(self.grid, self.values, points)

    def jacobian(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if self.grid.dim == 1:
            s = _hermite_slope(self.grid.axes[0], self.values[:, 0],
                               self.derivs[:, 0, 0], points[:, 0], "constant")
            return s[:, None, None]
        return _bilinear(self.grid, self.derivs, points)

    def max_stretch(self) -> tuple:
        """Largest nodal Jacobian magnitude (max row sum) and its node."""
        if self.grid.dim == 1:
            mags = np.abs(self.derivs[:, 0, 0])
        else:
            mags = np.abs(self.derivs).sum(axis=2).max(axis=1)
        node = int(np.argmax(mags))
        return float(mags[node]), node


# ---------------------------------------------------------------------------
# the flow


class MirroredFlow:
    """Quadrature-side mirrored flow for one (target, kernel) pair.

    The target must expose the dual potential and its gradient plus the
    primal-chart pieces (a MirroredTarget does).  Kernel cross matrices over
    the grid are precomputed when they fit in memory, since the grid never
    moves; otherwise field evaluations stream over column blocks.
    """

    def __init__(self, mirrored: MirroredTarget, kernel, grid: Grid | None = None,
                 nodes: int | None = None, halfwidth: float | None = None):
        self.target = mirrored
        self.map = mirrored.map
        self.kernel = kernel
        self.grid = grid if grid is not None else grid_for_target(mirrored, nodes, halfwidth)
        if self.grid.dim != mirrored.dim:
            raise ConfigError(
                f"grid dimension {self.grid.dim} does not match target dimension {mirrored.dim}"
            )

        x = self.grid.nodes()
        self.nodes = x
        self.weights = self.grid.weights()
        self.potential = np.asarray(mirrored.potential(x), dtype=float)
        self.grad_potential = np.asarray(mirrored.grad_potential(x), dtype=float)
        self.log_partition = float(
            np.logaddexp.reduce(np.sort(-self.potential + np.log(self.weights)))
        )
        self.log_pi = -self.potential - self.log_partition

        self.theta = self.map.grad_psi_star(x)
        self.hinv = np.asarray(self.map.hess_psi_inv(self.theta), dtype=float)
        self.div_hinv = np.asarray(self.map.div_hess_psi_inv(self.theta), dtype=float)
        self.primal_score = np.asarray(
            mirrored.base.grad_log_density(self.theta), dtype=float
        )
        # integrated-by-parts operand: Hinv score + div Hinv, the same vector
        # the particle engine averages
        self.operand = np.einsum("nde,ne->nd", self.hinv, self.primal_score) + self.div_hinv

        d = self.grid.dim
        need = self.grid.size * self.grid.size * (1 + d + d * d) * 8
        self._precomputed = need <= PRECOMPUTE_BYTES
        if self._precomputed:
            self._K = kernel.gram(self.theta, self.theta)
            self._K1 = kernel.grad1_gram(self.theta, self.theta)
            self._K12 = kernel.grad12_gram(self.theta, self.theta)

    # -- densities ----------------------------------------------------------

    def pi_density(self) -> GridDensity:
        return GridDensity(self.grid, self.log_pi)

    def initial_density(self) -> GridDensity:
        return standard_normal_density(self.grid)

    def dual_score_ratio(self, density: GridDensity) -> np.ndarray:
        """grad log(mu/pi) at every node in the dual chart: finite-difference
        log mu plus the exact potential gradient."""
        return log_density_gradient(density) + self.grad_potential

    # -- field --------------------------------------------------------------

    def _blocks(self, cols: slice):
        """Kernel matrices between all nodes (rows) and a column block: the
        gram block, the first-slot gradient, the same gradient with the block
        in the first slot (the evaluation-side derivative, by symmetry of the
        kernel), and the mixed second derivative."""
        if self._precomputed:
            return self._K[:, cols], self._K1[:, cols], self._K1[cols], self._K12[:, cols]
        theta_c = self.theta[cols]
        return (
            self.kernel.gram(self.theta, theta_c),
            self.kernel.grad1_gram(self.theta, theta_c),
            self.kernel.grad1_gram(theta_c, self.theta),
            self.kernel.grad12_gram(self.theta, theta_c),
        )

    def _block_size(self) -> int:
        if self._precomputed:
            return self.grid.size
        return max(1, (1 << 23) // max(self.grid.size, 1))

    def g_field(self, density: GridDensity, form: str = "score") -> FieldOnGrid:
        """Kernel-smoothed score difference on the grid, with exact nodal
        derivatives for the pushforward Jacobian.

        form "score" integrates by parts so only exact target quantities
        appear under the integral; "dual" uses the finite-difference dual
        score ratio; "primal" differentiates in the primal chart on the
        mapped (nonuniform) point set, d=1 only.  The three agree to
        quadrature accuracy; flows are driven by "score".
        """
        if form not in G_FORMS:
            raise ConfigError(f"unknown g form {form!r}; expected one of {G_FORMS}")
        grid, d = self.grid, self.grid.dim
        wrho = self.weights * density.density

        if form == "score":
            op, sign = self.operand, -1.0
        elif form == "dual":
            op, sign = self.dual_score_ratio(density), 1.0
        else:
            op, sign = self._primal_operand(density), 1.0
        q = wrho[:, None] * op                      # (P, d)
        u = wrho[:, None, None] * self.hinv         # (P, d, d), score form only

        values = np.empty((grid.size, d))
        derivs = np.empty((grid.size, d, d))
        block = self._block_size()
        for start in range(0, grid.size, block):
            cols = slice(start, min(start + block, grid.size))
            K, K1, K1rev, K12 = self._blocks(cols)
            # value at column j: sum_i K[i,j] q[i] (+ kernel-gradient term)
            vals = K.T @ q
            # derivative wrt the evaluation slot, before the chart chain rule
            dvals = np.stack([K1rev[:, :, c] @ q for c in range(d)], axis=2)
            if form == "score":
                for e in range(d):
                    vals += K1[:, :, e].T @ u[:, :, e]
                    for c in range(d):
                        dvals[:, :, c] += K12[:, :, e, c].T @ u[:, :, e]
            values[cols] = sign * vals
            derivs[cols] = sign * np.einsum("jdc,jcf->jdf", dvals, self.hinv[cols])
        return FieldOnGrid(grid, values, derivs)

    def _primal_operand(self, density: GridDensity) -> np.ndarray:
        if self.grid.dim != 1:
            raise ConfigError("the primal-chart form is implemented for d=1 only")
        theta = self.theta[:, 0]
        log_det = np.asarray(self.map.log_det_hess_inv(self.theta), dtype=float)
        log_mu_primal = density.log_density - log_det
        keep = density.log_density >= density.log_density.max() - PRIMAL_FD_DROP_NATS
        idx = np.flatnonzero(keep)
        lo, hi = int(idx[0]), int(idx[-1])
        if hi - lo + 1 < 5:
            raise NumericsError("density support too narrow for the primal-chart stencils")
        ratio = np.zeros_like(theta)
        dlog = nonuniform_gradient(theta[lo:hi + 1], log_mu_primal[lo:hi + 1])
        ratio[lo:hi + 1] = dlog - self.primal_score[lo:hi + 1, 0]
        out = np.einsum("nde,ne->nd", self.hinv, ratio[:, None])
        out[lo:hi + 1][~keep[lo:hi + 1]] = 0.0
        out[:lo] = 0.0
        out[hi + 1:] = 0.0
        return out

    def g_forms_gap(self, density: GridDensity) -> dict:
        """Sup-norm disagreements between the three field formulas."""
        fields = {form: self.g_field(density, form=form).values for form in G_FORMS}
        return {
            "score_vs_dual": float(np.max(np.abs(fields["score"] - fields["dual"]))),
            "score_vs_primal": float(np.max(np.abs(fields["score"] - fields["primal"]))),
            "dual_vs_primal": float(np.max(np.abs(fields["dual"] - fields["primal"]))),
        }

    # -- scalar diagnostics ---------------------------------------------------

    def kl(self, density: GridDensity) -> float:
        """KL(mu | pi) by quadrature against the shared grid normalizer."""
        rho = density.density
        support = rho > 0.0
        gap = density.log_density - self.log_pi
        if np.any(~np.isfinite(gap[support])):
            return math.inf
        integrand = np.zeros_like(rho)
        integrand[support] = rho[support] * gap[support]
        value = float(np.dot(self.weights, integrand))
        if value < -1e-9:
            raise NumericsError(f"KL quadrature returned {value}, below the -1e-9 floor")
        return value

    def mean_grad_potential_norm(self, density: GridDensity) -> float:
        norms = np.sqrt(np.einsum("nd,nd->n", self.grad_potential, self.grad_potential))
        return density.expectation(norms)

    def stein_fisher(self, density: GridDensity, field: FieldOnGrid | None = None) -> float:
        """Smoothed relative Fisher value via the pairing of the field with
        the dual score ratio; equals the squared kernel-space norm of the
        field up to quadrature error."""
        if field is None:
            field = self.g_field(density, form="score")
        ratio = self.dual_score_ratio(density)
        wrho = self.weights * density.density
        return float(np.einsum("n,nd,nd->", wrho, field.values, ratio))

    def stein_fisher_double(self, density: GridDensity) -> float:
        """The same value as an explicit double integral of the kernel
        against both score ratios (the definition-shaped estimate)."""
        ratio = self.dual_score_ratio(density)
        q = (self.weights * density.density)[:, None] * ratio
        total = 0.0
        block = self._block_size()
        for start in range(0, self.grid.size, block):
            cols = slice(start, min(start + block, self.grid.size))
            K = self._blocks(cols)[0]
            total += float(np.einsum("id,ij,jd->", q, K, q[cols]))
        return total

    # -- stepping -------------------------------------------------------------

    def step(self, density: GridDensity, gamma: float,
             field: FieldOnGrid | None = None) -> GridDensity:
        if field is None:
            field = self.g_field(density, form="score")
        return pushforward_step(density, field, gamma)

    def run(self, gamma: float, steps: int, density: GridDensity | None = None,
            record_every: int = 1, keep_densities: bool = False) -> dict:
        """Flow for a fixed number of steps, recording scalar diagnostics at
        step 0, every record_every-th step, and the final step."""
        if density is None:
            density = self.initial_density()
        records = []
        densities = [density] if keep_densities else None

        def record(state: GridDensity, step: int) -> None:
            field = self.g_field(state, form="score")
            fisher = self.stein_fisher(state, field)
            records.append({
                "step": step,
                "kl": self.kl(state),
                "stein_fisher": fisher,
                "field_norm": math.sqrt(max(fisher, 0.0)),
                "mean_grad_norm": self.mean_grad_potential_norm(state),
                "gamma": gamma,
            })

        record(density, 0)
        for n in range(1, steps + 1):
            density = self.step(density, gamma)
            if keep_densities:
                densities.append(density)
            if n % record_every == 0 or n == steps:
                if records[-1]["step"] != n:
                    record(density, n)
        return {"records": records, "densities": densities, "final": density}


# ---------------------------------------------------------------------------
# pushforward


def pushforward_step(density: GridDensity, field: FieldOnGrid, gamma: float) -> GridDensity:
    """Push the density through x - gamma * field(x) by change of variables.

    The map must stay injective: gamma times the largest nodal field stretch
    below one.  gamma = 0 returns the density unchanged, bit for bit.
    """
    if gamma == 0.0:
        return density
    grid = density.grid
    stretch, node = field.max_stretch()
    if gamma * stretch >= 1.0 - 1e-9:
        raise NumericsError(
            "pushforward map is not injective: gamma * |field stretch| = "
            f"{gamma * stretch:.6g} at node {node}",
            particle=node,
        )
    inverse = _invert_1d(grid, field, gamma) if grid.dim == 1 else _invert_2d(grid, field, gamma)
    jac = np.eye(grid.dim) - gamma * field.jacobian(inverse)
    if grid.dim == 1:
        det = jac[:, 0, 0]
    else:
        det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
    log_rho_at = _interp_log_density(density, inverse)
    return GridDensity(grid, log_rho_at - np.log(det)).renormalized()


def _interp_log_density(density: GridDensity, points: np.ndarray) -> np.ndarray:
    grid = density.grid
    if grid.dim == 1:
        slopes = log_density_gradient(density)[:, 0]
        return _hermite_value(grid.axes[0], density.log_density, slopes,
                              points[:, 0], "linear")
    return _bilinear(grid, density.log_density, points)


def _invert_1d(grid: Grid, field: FieldOnGrid, gamma: float) -> np.ndarray:
    targets = grid.nodes()[:, 0]
    reach = abs(gamma) * float(np.max(np.abs(field.values))) + 1.0
    lo = np.full_like(targets, grid.axes[0][0] - reach)
    hi = np.full_like(targets, grid.axes[0][-1] + reach)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        too_low = mid - gamma * field(mid[:, None])[:, 0] < targets
        lo = np.where(too_low, mid, lo)
        hi = np.where(too_low, hi, mid)
        if float(np.max(hi - lo)) <= 1e-12:
            break
    return (0.5 * (lo + hi))[:, None]


def _invert_2d(grid: Grid, field: FieldOnGrid, gamma: float) -> np.ndarray:
    targets = grid.nodes()
    y = targets.copy()
    for _ in range(80):
        residual = y - gamma * field(y) - targets
        if float(np.max(np.abs(residual))) <= 1e-12:
            break
        jac = np.eye(2) - gamma * field.jacobian(y)
        det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
        step0 = (jac[:, 1, 1] * residual[:, 0] - jac[:, 0, 1] * residual[:, 1]) / det
        step1 = (-jac[:, 1, 0] * residual[:, 0] + jac[:, 0, 0] * residual[:, 1]) / det
        y = y - np.stack([step0, step1], axis=1)
    return y


# ---------------------------------------------------------------------------
# free-function forms and the descent report


def _as_flow(density: GridDensity, target, kernel) -> MirroredFlow:
    return MirroredFlow(target, kernel, grid=density.grid)


def g_field(density: GridDensity, target, kernel, form: str = "score") -> FieldOnGrid:
    return _as_flow(density, target, kernel).g_field(density, form=form)


def kl_quadrature(density: GridDensity, target) -> float:
    """KL of a grid density against the dual target, both normalized on the
    density's own grid; +inf when the density puts mass where the target has
    none."""
    grid = density.grid
    potential = np.asarray(target.potential(grid.nodes()), dtype=float)
    weights = grid.weights()
    log_z = float(np.logaddexp.reduce(np.sort(-potential + np.log(weights))))
    log_pi = -potential - log_z
    rho = density.density
    support = rho > 0.0
    gap = density.log_density - log_pi
    if np.any(~np.isfinite(gap[support])):
        return math.inf
    integrand = np.zeros_like(rho)
    integrand[support] = rho[support] * gap[support]
    value = float(np.dot(weights, integrand))
    if value < -1e-9:
        raise NumericsError(f"KL quadrature returned {value}, below the -1e-9 floor")
    return value


def stein_fisher_quadrature(density: GridDensity, target, kernel) -> float:
    return _as_flow(density, target, kernel).stein_fisher(density)


def fisher_norm_margins(records, kernel_bounds, strong_convexity: float, dim: int):
    """Margin of the kernel-norm bound sqrt(fisher) <= b1 E||grad V|| + b2 d / K
    for every record; nonnegative margins certify the bound."""
    b1, b2 = (float(b) for b in kernel_bounds)
    rows = []
    for rec in records:
        rhs = b1 * rec["mean_grad_norm"] + b2 * dim / float(strong_convexity)
        rows.append({
            "step": rec["step"],
            "field_norm": rec["field_norm"],
            "bound_rhs": rhs,
            "margin": rhs - rec["field_norm"],
        })
    return rows


def descent_check(densities, gamma: float, target, kernel, profile=None,
                  tol: float = 1e-7) -> dict:
    """Per-step descent report for a density trajectory.

    Checks KL(n+1) - KL(n) <= -(gamma/2) * fisher(n) + tol at every step.
    When growth constants are supplied, gamma is also checked for
    admissibility in both regimes: against the fixed worst-case cap priced
    exactly the way a "theorem" step size is (initial-KL upper bound formula,
    not the measured KL), and against the per-state cap from the measured
    field norm and growth statistic.
    """
    if len(densities) < 1:
        raise ConfigError("descent_check needs at least one density")
    flow = MirroredFlow(target, kernel, grid=densities[0].grid)
    kls, fishers, caps = [], [], []
    for density in densities:
        field = flow.g_field(density, form="score")
        fisher = flow.stein_fisher(density, field)
        kls.append(flow.kl(density))
        fishers.append(fisher)
        if profile is not None:
            growth = profile.l0 + profile.l1 * flow.mean_grad_potential_norm(density)
            caps.append(theory.step_size_cap_exact(
                math.sqrt(max(fisher, 0.0)), growth, profile,
                kernel.bounds(), flow.map.strong_convexity, flow.grid.dim,
            ))

    rows, all_pass = [], True
    for n in range(len(densities) - 1):
        drop = kls[n + 1] - kls[n]
        rhs = -(gamma / 2.0) * fishers[n]
        margin = rhs + tol - drop
        ok = bool(margin >= 0.0)
        all_pass = all_pass and ok
        rows.append({
            "step": n,
            "kl": kls[n],
            "kl_next": kls[n + 1],
            "stein_fisher": fishers[n],
            "bound_rhs": rhs,
            "margin": margin,
            "ok": ok,
        })

    report = {
        "gamma": gamma,
        "tolerance": tol,
        "steps": rows,
        "kl_first": kls[0],
        "kl_last": kls[-1],
        "kl_strictly_decreased": bool(kls[-1] < kls[0]) if len(kls) > 1 else True,
        "descent_ok": all_pass,
    }
    if profile is not None:
        if profile.c_pi_p is None:
            profile = profile.with_values(
                "empirical", c_pi_p=theory.c_pi_p(target, profile.p)
            )
        kl0_upper = theory.kl0_upper_bound(target, profile, dim=flow.grid.dim)
        fixed_cap = theory.step_size_bound(
            profile, kernel.bounds(), flow.map.strong_convexity, flow.grid.dim, kl0_upper
        )
        report["kl0_upper"] = kl0_upper
        report["fixed_cap"] = fixed_cap
        report["fixed_cap_ok"] = bool(gamma <= fixed_cap * (1.0 + 1e-12))
        report["per_step_caps"] = caps
        report["per_step_cap_ok"] = bool(all(gamma <= c * (1.0 + 1e-12) for c in caps))
        report["passed"] = bool(
            all_pass and report["fixed_cap_ok"] and report["per_step_cap_ok"]
        )
    else:
        report["passed"] = all_pass
    return report
