"""Exponential change of variables and the affine drift operator.

The state equation is rewritten pathwise through ``X = exp(W) (y + x)``.
The drift operator acting on the shifted variable is

    (B y)(t_k) = (y_k - y_{k-1}) / dt_k + (mu + nu + delta) (y_k + x),

with backward differences and ``y_0 = 0``.  The module also provides the
weak (tested) form of the drift with a free terminal value, and the energy
identity of its quadratic part as a Monte Carlo cross-check.
"""

from dataclasses import dataclass

import numpy as np

from .errors import BesoError, PathUnusable
from .grids import L2Metric, TimeGrid
from .noise import (
    DEFAULT_OVERFLOW_CAP,
    MultiplierBounds,
    delta_of,
    multiplier_bounds,
    sample_ensemble,
)

__all__ = [
    "TransformContext",
    "DiscreteProcess",
    "forward_transform",
    "inverse_transform",
    "apply_B",
    "control_from_process",
    "apply_B_weak",
    "EnergyCheck",
    "bform_energy_check",
]


@dataclass
class DiscreteProcess:
    """Shifted state at ``t_1..t_N`` plus a separate terminal trace value.

    ``y[k-1]`` holds the value at ``t_k``; the value at ``t_0`` is zero by
    construction.  ``y1`` usually equals ``y[-1]`` but is carried as its own
    variable: the coupling constraint absorbs a mismatch into the last
    control cell, and the duality gap picks up the exact quadratic penalty
    ``|exp(W_N) (y1 - y_N)|^2 / 2``.
    """

    y: np.ndarray
    y1: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.y1 = np.asarray(self.y1, dtype=float)
        if self.y.ndim != 2 or self.y1.shape != (self.y.shape[1],):
            raise BesoError("process shapes inconsistent")
        if not (np.all(np.isfinite(self.y)) and np.all(np.isfinite(self.y1))):
            raise BesoError("process entries must be finite")

    @classmethod
    def from_y(cls, y):
        y = np.asarray(y, dtype=float)
        return cls(y=y, y1=y[-1].copy())

    @classmethod
    def zeros(cls, n_steps, n_nodes):
        return cls(y=np.zeros((n_steps, n_nodes)), y1=np.zeros(n_nodes))


class TransformContext:
    """Per-path bundle: initial datum, constants, sampled noise, metric."""

    def __init__(self, x, lam, bounds: MultiplierBounds, path, time_grid, metric=None,
                 cap=DEFAULT_OVERFLOW_CAP):
        self.grid = bounds.grid
        self.x = np.asarray(x, dtype=float)
        if self.x.shape != (self.grid.M,):
            raise BesoError("initial datum shape does not match grid")
        self.lam = float(lam)
        self.bounds = bounds
        self.nu = bounds.nu
        self.delta = delta_of(lam, bounds.nu)
        self.mu_field = bounds.mu_field
        self.path = path
        self.time_grid = time_grid if isinstance(time_grid, TimeGrid) else TimeGrid(time_grid)
        if path.times.shape != self.time_grid.nodes.shape or not np.allclose(
            path.times, self.time_grid.nodes
        ):
            raise BesoError("path and time grid disagree")
        self.metric = metric if metric is not None else L2Metric(self.grid)
        self.cap = float(cap)
        if path.max_abs_w() > self.cap:
            raise PathUnusable(f"|W| exceeds overflow cap {self.cap}")
        # cached exponential weights at the N+1 nodes
        self.exp_w = np.exp(path.w)
        self.exp_w_neg = np.exp(-path.w)
        # one-step growth factors G_k = exp(W_k - W_{k-1}), k = 1..N
        self.growth = self.exp_w[1:] / self.exp_w[:-1]

    @property
    def n_steps(self):
        return self.time_grid.n_steps

    @property
    def drift_field(self):
        """The coefficient ``mu + nu + delta`` in front of ``y + x``."""
        return self.mu_field + self.nu + self.delta

    def transformed_state(self, proc):
        """Node values ``Y_k = exp(W_k)(y_k + x)`` for ``k = 0..N``."""
        out = np.empty((self.n_steps + 1, self.grid.M))
        out[0] = self.exp_w[0] * self.x
        out[1:] = self.exp_w[1:] * (proc.y + self.x)
        return out

    def terminal_state(self, proc):
        """``Y1 = exp(W_N)(y1 + x)``, the free terminal trace."""
        return self.exp_w[-1] * (proc.y1 + self.x)


def forward_transform(ctx, proc):
    """Map the shifted process to the state trajectory ``(N+1, M)``.

    Row 0 is the initial datum (the noise field vanishes at ``t_0``).
    """
    return ctx.transformed_state(proc)


def inverse_transform(ctx, x_traj):
    """Inverse of :func:`forward_transform`; drops the ``t_0`` row."""
    x_traj = np.asarray(x_traj, dtype=float)
    if x_traj.shape != (ctx.n_steps + 1, ctx.grid.M):
        raise BesoError("trajectory shape inconsistent with context")
    y = ctx.exp_w_neg[1:] * x_traj[1:] - ctx.x
    return DiscreteProcess.from_y(y)


def apply_B(ctx, proc):
    """Backward-difference drift ``(y_k - y_{k-1})/dt_k + c (y_k + x)``."""
    y = proc.y
    dts = ctx.time_grid.dt[:, None]
    prev = np.vstack([np.zeros((1, ctx.grid.M)), y[:-1]])
    return (y - prev) / dts + ctx.drift_field * (y + ctx.x)


def control_from_process(ctx, proc):
    """The control paired with the process by the affine constraint.

    ``u_k = -exp(W_k) (B y)_k`` for interior steps; a terminal mismatch
    ``y1 != y_N`` is absorbed into the last cell as an extra
    ``-exp(W_N)(y1 - y_N)/dt_N``, which is the discrete trace coupling.
    """
    u = -ctx.exp_w[1:] * apply_B(ctx, proc)
    jump = proc.y1 - proc.y[-1]
    if np.any(jump != 0.0):
        u[-1] -= ctx.exp_w[-1] * jump / ctx.time_grid.dt[-1]
    return u


def apply_B_weak(ctx, proc, theta):
    """Weak drift form against a test process ``theta`` on all nodes.

    Discrete summation by parts of the tested strong form: terminal pairing
    with the free trace, a source term, and a pairing of the state with the
    increments of the weighted test function,

        (exp(W_N) y1, theta_N)
      + sum_k dt_k (exp(W_k) c (y_k + x), theta_k)
      - sum_{k<N} (y_k, d_{k+1} - d_k),   d_k := exp(W_k) * riesz(theta_k).

    For ``y1 = y_N`` this equals ``sum_k dt_k (exp(W_k)(B y)_k, theta_k)``
    exactly (same floating-point algebra, no quadrature defect).
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (ctx.n_steps + 1, ctx.grid.M):
        raise BesoError("test process must live on all time nodes")
    n = ctx.n_steps
    metric = ctx.metric
    # Euclidean representers of theta_k in the spatial metric
    d = ctx.exp_w * metric.pair_vector(theta)
    total = float(np.sum(ctx.exp_w[-1] * proc.y1 * metric.pair_vector(theta[-1])))
    dts = ctx.time_grid.dt
    src = ctx.drift_field * (proc.y + ctx.x)
    total += float(np.sum(dts[:, None] * ctx.exp_w[1:] * src * metric.pair_vector(theta[1:])))
    if n > 1:
        total -= float(np.sum(proc.y[:-1] * (d[2:] - d[1:-1])))
    return total


@dataclass
class EnergyCheck:
    """Monte Carlo comparison of the drift quadratic form with its identity."""

    lhs: float
    rhs_identity: float
    rhs_bound: float
    se: float  # standard error of lhs - rhs_identity


def bform_energy_check(spec, lam, time_grid, y_builder, n_paths=1000, base_seed=0):
    """Check the energy identity of the drift's quadratic part.

    ``y_builder(w, times)`` must map sampled fields ``w (S, N+1, M)`` to an
    adapted process ``y (S, N, M)`` with bounded increments (a discrete
    absolutely continuous construction).  Returns the Monte Carlo averages

      lhs          midpoint-paired quadratic form of B (without the datum)
      rhs_identity  (1/2)|exp(W_N) y_N|^2 + (nu+delta)|y|^2 - mode correction
      rhs_bound     (1/2)|exp(W_N) y_N|^2 + (lam/2)|y|^2

    With no noise the identity is exact; with noise the defect is O(dt)
    plus sampling error.
    """
    tg = time_grid if isinstance(time_grid, TimeGrid) else TimeGrid(time_grid)
    bounds = multiplier_bounds(spec)
    delta = delta_of(lam, bounds.nu)
    h = spec.grid.h
    dts = tg.dt
    _, w = sample_ensemble(spec, tg, base_seed, n_paths)
    y = np.asarray(y_builder(w, tg.nodes), dtype=float)
    if y.shape != (n_paths, tg.n_steps, spec.grid.M):
        raise BesoError("y_builder returned wrong shape")
    e2 = np.exp(2.0 * w)  # (S, N+1, M)
    prev = np.concatenate([np.zeros((n_paths, 1, spec.grid.M)), y[:, :-1]], axis=1)
    c = bounds.mu_field + bounds.nu + delta
    mid = 0.5 * (y + prev)
    lhs_s = h * np.sum(e2[:, 1:] * (y - prev) * mid, axis=(1, 2))
    lhs_s += h * np.einsum("k,skm->s", dts, e2[:, 1:] * c * y * y)
    term_s = 0.5 * h * np.sum(e2[:, -1] * y[:, -1] ** 2, axis=-1)
    hnorm_s = h * np.einsum("k,skm->s", dts, e2[:, 1:] * y * y)
    corr_s = h * np.einsum("k,skm->s", dts, e2[:, 1:] * bounds.mu_field * y * y)
    rhs_id_s = term_s + (bounds.nu + delta) * hnorm_s - corr_s
    rhs_bd_s = term_s + 0.5 * lam * hnorm_s
    diff = lhs_s - rhs_id_s
    se = float(np.std(diff, ddof=1) / np.sqrt(n_paths)) if n_paths > 1 else 0.0
    return EnergyCheck(
        lhs=float(np.mean(lhs_s)),
        rhs_identity=float(np.mean(rhs_id_s)),
        rhs_bound=float(np.mean(rhs_bd_s)),
        se=se,
    )
