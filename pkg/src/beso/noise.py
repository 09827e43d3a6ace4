"""Finite-mode multiplicative Wiener noise and its multiplier constants.

The driving field is a finite sum ``W(t, xi) = sum_j mu_j e_j(xi) beta_j(t)``
of independent scalar Brownian motions ``beta_j`` against fixed spatial
multiplier fields ``e_j``.  The module computes the per-mode bounds
``gamma_j``, the aggregate intensity ``nu = sum mu_j^2 gamma_j^2``, the
correction field ``mu = (1/2) sum mu_j^2 e_j^2``, and samples paths
deterministically from a seed.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import BesoError, HypothesisViolation, PathUnusable
from .grids import LinearMap, SpaceGrid1D, TimeGrid

__all__ = [
    "Mode",
    "NoiseSpec",
    "MultiplierBounds",
    "WienerPath",
    "basis_field",
    "compute_gamma",
    "compute_gamma_dual",
    "compute_nu",
    "compute_mu_field",
    "multiplier_bounds",
    "sample_path",
    "sample_ensemble",
    "coarsen_path",
    "exp_multiplier",
    "path_z_bound",
    "eta",
    "delta_of",
]

DEFAULT_OVERFLOW_CAP = 50.0


@dataclass(frozen=True)
class Mode:
    """One noise mode: scalar intensity ``mu`` and spatial field ``e``."""

    mu: float
    e: np.ndarray


def basis_field(grid, kind, **params):
    """Construct a multiplier field on the grid from a named basis kind.

    Kinds: ``constant`` (value, default 1), ``sine`` (n; L2-normalised),
    ``indicator`` (a, b), ``tabulated`` (values).
    """
    xi = grid.nodes
    if kind == "constant":
        return np.full(grid.M, float(params.get("value", 1.0)))
    if kind == "sine":
        n = int(params["n"])
        return np.sqrt(2.0 / grid.L) * np.sin(n * np.pi * xi / grid.L)
    if kind == "indicator":
        a, b = float(params["a"]), float(params["b"])
        return ((xi >= a) & (xi <= b)).astype(float)
    if kind == "tabulated":
        vals = np.asarray(params["values"], dtype=float)
        if vals.shape != (grid.M,):
            raise BesoError(f"tabulated field needs {grid.M} values, got {vals.shape}")
        return vals
    raise BesoError(f"unknown basis kind {kind!r}")


class NoiseSpec:
    """A finite list of modes over a space grid."""

    def __init__(self, modes, grid):
        self.grid = grid
        clean = []
        for m in modes:
            e = np.asarray(m.e, dtype=float)
            if e.shape != (grid.M,):
                raise BesoError("mode field shape does not match grid")
            if not np.all(np.isfinite(e)):
                raise BesoError("mode field must be finite on the grid")
            clean.append(Mode(float(m.mu), e))
        self.modes = tuple(clean)

    @property
    def n_modes(self):
        return len(self.modes)

    def mu_values(self):
        return np.array([m.mu for m in self.modes])

    def fields(self):
        if not self.modes:
            return np.zeros((0, self.grid.M))
        return np.stack([m.e for m in self.modes])


@dataclass
class MultiplierBounds:
    """Per-mode bounds and aggregate constants for one spatial metric."""

    gamma: np.ndarray
    nu: float
    mu_field: np.ndarray
    grid: SpaceGrid1D
    z_bound: float | None = None


def compute_gamma(spec):
    """Per-mode multiplier bound: ``max(max|e_j|, sqrt(max e_j^2), 1)``.

    For diagonal multiplication on the grid the operator norm is the
    pointwise sup, so the first two clauses coincide; the max-with-1 clause
    is part of the definition.
    """
    if spec.grid.M < 1:
        raise BesoError("empty grid")
    out = []
    for m in spec.modes:
        a = np.max(np.abs(m.e))
        b = np.sqrt(np.max(m.e**2))
        out.append(max(a, b, 1.0))
    return np.array(out)


def compute_gamma_dual(spec, lap):
    """Per-mode bounds in the dual (H^{-1}-type) metric of ``lap``.

    The operator norm of pointwise multiplication is no longer the sup in
    this metric; it is computed densely from the generalized eigenproblem.
    Used by the porous-media instance; reported alongside the pointwise
    bounds.
    """
    a = lap.dense()
    a_inv = np.linalg.inv(a)
    # metric matrix S = lap^{-1} (up to the h factor, which cancels in norms)
    chol = np.linalg.cholesky(a_inv)
    chol_inv = np.linalg.inv(chol)
    out = []
    for m in spec.modes:
        for power in (1, 2):
            d = np.diag(m.e**power)
            t = chol_inv @ d @ chol
            s = np.linalg.norm(t, 2)
            if power == 1:
                n1 = s
            else:
                n2 = np.sqrt(s)
        out.append(max(n1, n2, 1.0))
    return np.array(out)


def compute_nu(spec, gamma):
    """Aggregate noise intensity ``sum_j mu_j^2 gamma_j^2``."""
    mus = spec.mu_values()
    gamma = np.asarray(gamma, dtype=float)
    if mus.shape != gamma.shape:
        raise BesoError("gamma length does not match mode list")
    return float(np.sum(mus**2 * gamma**2))


def compute_mu_field(spec):
    """Pointwise correction field ``(1/2) sum_j mu_j^2 e_j^2``."""
    out = np.zeros(spec.grid.M)
    for m in spec.modes:
        out += 0.5 * m.mu**2 * m.e**2
    return out


def multiplier_bounds(spec, lap=None):
    """Assemble :class:`MultiplierBounds`; dual metric when ``lap`` given."""
    gamma = compute_gamma(spec) if lap is None else compute_gamma_dual(spec, lap)
    return MultiplierBounds(
        gamma=gamma,
        nu=compute_nu(spec, gamma),
        mu_field=compute_mu_field(spec),
        grid=spec.grid,
    )


@dataclass
class WienerPath:
    """Sampled Brownian coordinates and the assembled field on the grids."""

    times: np.ndarray  # (N+1,)
    beta: np.ndarray  # (J, N+1)
    w: np.ndarray  # (N+1, M)
    seed: int

    @property
    def n_steps(self):
        return self.times.size - 1

    def max_abs_w(self):
        return float(np.max(np.abs(self.w))) if self.w.size else 0.0


def _assemble_w(spec, beta):
    fields = spec.fields()
    mus = spec.mu_values()
    if spec.n_modes == 0:
        return np.zeros((beta.shape[-1], spec.grid.M))
    # (J,N+1)^T (J,M) with mu weights
    return np.einsum("j,jk,jm->km", mus, beta, fields)


def sample_path(spec, time_grid, seed):
    """Sample one path: independent Gaussian walks with variance ``dt``.

    Deterministic given ``seed``; starts at zero; the field satisfies
    ``w[k] = sum_j mu_j e_j beta_j(t_k)`` exactly on the grid.
    """
    if not isinstance(time_grid, TimeGrid):
        time_grid = TimeGrid(time_grid)
    rng = np.random.default_rng(seed)
    dts = time_grid.dt
    beta = np.zeros((spec.n_modes, time_grid.n_steps + 1))
    if spec.n_modes:
        inc = rng.standard_normal((spec.n_modes, time_grid.n_steps)) * np.sqrt(dts)
        beta[:, 1:] = np.cumsum(inc, axis=1)
    return WienerPath(times=time_grid.nodes.copy(), beta=beta, w=_assemble_w(spec, beta), seed=int(seed))


def sample_ensemble(spec, time_grid, base_seed, n_paths):
    """Sample ``n_paths`` independent paths from one generator.

    Batch counterpart of :func:`sample_path` for Monte Carlo estimates;
    returns arrays ``beta (S, J, N+1)`` and ``w (S, N+1, M)``.  The draws
    are deterministic in ``(base_seed, n_paths)`` but are not elementwise
    identical to per-seed :func:`sample_path` calls.
    """
    if not isinstance(time_grid, TimeGrid):
        time_grid = TimeGrid(time_grid)
    rng = np.random.default_rng(base_seed)
    dts = time_grid.dt
    n1 = time_grid.n_steps + 1
    beta = np.zeros((n_paths, spec.n_modes, n1))
    if spec.n_modes:
        inc = rng.standard_normal((n_paths, spec.n_modes, time_grid.n_steps)) * np.sqrt(dts)
        beta[:, :, 1:] = np.cumsum(inc, axis=2)
    fields = spec.fields()
    mus = spec.mu_values()
    if spec.n_modes:
        w = np.einsum("j,sjk,jm->skm", mus, beta, fields)
    else:
        w = np.zeros((n_paths, n1, spec.grid.M))
    return beta, w


def coarsen_path(path, spec, factor):
    """Restrict a path to every ``factor``-th time node (nested grids).

    The Brownian coordinates are subsampled, so the coarse path is exactly
    the fine path seen on the coarse grid; used for strong-convergence
    studies with coupled resolutions.
    """
    factor = int(factor)
    if (path.times.size - 1) % factor != 0:
        raise BesoError("coarsening factor must divide the step count")
    sl = slice(None, None, factor)
    return WienerPath(
        times=path.times[sl].copy(),
        beta=path.beta[:, sl].copy(),
        w=path.w[sl].copy(),
        seed=path.seed,
    )


def exp_multiplier(path, k, sign, cap=DEFAULT_OVERFLOW_CAP):
    """Diagonal multiplication by ``exp(sign * W(t_k, .))``.

    Raises :class:`PathUnusable` when the path exceeds the overflow cap
    anywhere, so that both signs stay invertible in floating point.
    """
    if sign not in (+1, -1):
        raise BesoError("sign must be +1 or -1")
    if not 0 <= k < path.times.size:
        raise BesoError("time index out of range")
    if path.max_abs_w() > cap:
        raise PathUnusable(f"|W| exceeds overflow cap {cap}")
    diag = np.exp(sign * path.w[k])
    m = diag.size
    return LinearMap(m, m, lambda v: diag * v, lambda v: diag * v)


def path_z_bound(path, cap=DEFAULT_OVERFLOW_CAP):
    """Discrete multiplier bound ``max_i exp(|W|)`` over the whole path."""
    m = path.max_abs_w()
    if m > cap:
        raise PathUnusable(f"|W| exceeds overflow cap {cap}")
    return float(np.exp(m))


def eta(z, bounds, delta):
    """Quadratic form ``(nu + delta)|z|^2 - (1/2) sum_j mu_j^2 |z e_j|^2``.

    The mode sum collapses pointwise to the correction field, so only
    ``mu_field`` is needed; coercive with modulus ``nu/2 + delta``.
    """
    if delta <= 0:
        raise BesoError("delta must be positive")
    z = np.asarray(z, dtype=float)
    g = bounds.grid
    return float((bounds.nu + delta) * g.norm2(z) - g.inner(bounds.mu_field * z, z))


def delta_of(lam, nu):
    """Margin ``(lam - nu)/2``; the model requires ``lam > nu``."""
    if lam <= nu:
        raise HypothesisViolation(
            f"damping lambda={lam} must exceed the noise intensity "
            f"nu=sum(mu_j^2 gamma_j^2)={nu}"
        )
    return 0.5 * (lam - nu)
