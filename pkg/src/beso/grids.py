"""Time and 1-D space discretisation with homogeneous Dirichlet boundaries.

All spatial fields live on the ``M`` interior nodes of the interval
``(0, L)``; the two boundary values are implicit zeros (ghost nodes).  The
discrete L2 inner product carries the cell weight ``h``, so that adjointness
and energy identities hold exactly in floating point up to roundoff.
"""

import numpy as np
from scipy.linalg import cholesky_banded, cho_solve_banded, eigvalsh_tridiagonal

from .errors import BesoError

__all__ = [
    "TimeGrid",
    "SpaceGrid1D",
    "LinearMap",
    "gradient1d",
    "divergence1d",
    "gradient_map",
    "laplacian_dirichlet",
    "hminus1_inner",
    "L2Metric",
    "HMinus1Metric",
    "operator_norm",
]


class TimeGrid:
    """Strictly increasing time nodes ``t_0 = 0 < t_1 < ... < t_N = T``."""

    def __init__(self, nodes):
        nodes = np.asarray(nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size < 2:
            raise BesoError("time grid needs at least two nodes")
        if nodes[0] != 0.0:
            raise BesoError("time grid must start at t=0")
        if np.any(np.diff(nodes) <= 0.0):
            raise BesoError("time grid must be strictly increasing")
        self.nodes = nodes

    @classmethod
    def uniform(cls, horizon, steps):
        return cls(np.linspace(0.0, float(horizon), int(steps) + 1))

    @property
    def n_steps(self):
        return self.nodes.size - 1

    @property
    def horizon(self):
        return float(self.nodes[-1])

    @property
    def dt(self):
        """Step sizes ``t_k - t_{k-1}``, one per step."""
        return np.diff(self.nodes)

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and np.array_equal(self.nodes, other.nodes)

    def __repr__(self):
        return f"TimeGrid(N={self.n_steps}, T={self.horizon})"


class SpaceGrid1D:
    """Interior nodes of ``(0, L)`` with uniform spacing and Dirichlet ends."""

    def __init__(self, n_nodes, length):
        n_nodes = int(n_nodes)
        if n_nodes < 1:
            raise BesoError("space grid needs at least one interior node")
        if length <= 0.0:
            raise BesoError("domain length must be positive")
        self.M = n_nodes
        self.L = float(length)
        self.h = self.L / (n_nodes + 1)
        self.nodes = self.h * np.arange(1, n_nodes + 1)

    def inner(self, u, v):
        """Discrete L2 product ``h * sum(u v)`` (last axis)."""
        return self.h * np.sum(np.asarray(u) * np.asarray(v), axis=-1)

    def norm2(self, u):
        return self.inner(u, u)

    def __eq__(self, other):
        return isinstance(other, SpaceGrid1D) and self.M == other.M and self.L == other.L

    def __repr__(self):
        return f"SpaceGrid1D(M={self.M}, L={self.L})"


class LinearMap:
    """A linear operator given by its action and adjoint action.

    The adjoint is with respect to the plain Euclidean products of the input
    and output coordinate vectors; any grid weights must be baked into the
    two callables consistently.
    """

    def __init__(self, shape_out, shape_in, apply, apply_adjoint):
        self.shape_out = int(shape_out)
        self.shape_in = int(shape_in)
        self._apply = apply
        self._adjoint = apply_adjoint

    def apply(self, v):
        return self._apply(np.asarray(v, dtype=float))

    def apply_adjoint(self, w):
        return self._adjoint(np.asarray(w, dtype=float))

    def norm_estimate(self, iters=200, tol=1e-6, seed=0):
        return operator_norm(self, iters=iters, tol=tol, seed=seed)


def gradient1d(v, h):
    """Forward differences with zero ghost values at both boundaries.

    Maps ``M`` node values to ``M+1`` cell-edge values; the first and last
    edges see the Dirichlet zeros.
    """
    v = np.asarray(v, dtype=float)
    out = np.empty(v.shape[:-1] + (v.shape[-1] + 1,), dtype=float)
    out[..., 0] = v[..., 0] / h
    out[..., 1:-1] = np.diff(v, axis=-1) / h
    out[..., -1] = -v[..., -1] / h
    return out


def divergence1d(w, h):
    """Negative adjoint of :func:`gradient1d` under the h-weighted products."""
    w = np.asarray(w, dtype=float)
    return np.diff(w, axis=-1) / h


def gradient_map(grid):
    """The Dirichlet gradient as a :class:`LinearMap` in h-weighted metrics.

    Adjointness convention: with the node metric ``h*I`` and edge metric
    ``h*I``, the metric adjoint of ``grad`` is ``-div``; in plain coordinates
    both metrics carry the same weight ``h`` so the coordinate adjoint is
    also ``-div``.
    """
    h = grid.h
    return LinearMap(
        grid.M + 1,
        grid.M,
        lambda v: gradient1d(v, h),
        lambda w: -divergence1d(w, h),
    )


class _DirichletLaplacian(LinearMap):
    """Standard 3-point stencil ``(-1, 2, -1)/h^2`` with Dirichlet ends."""

    def __init__(self, n_nodes, h):
        self.M = int(n_nodes)
        self.h = float(h)
        main = np.full(self.M, 2.0 / h**2)
        off = np.full(self.M - 1, -1.0 / h**2)
        self.diag_main = main
        self.diag_off = off
        ab = np.zeros((2, self.M))
        ab[0, 1:] = off
        ab[1, :] = main
        self._cho = cholesky_banded(ab, lower=False)
        super().__init__(self.M, self.M, self._matvec, self._matvec)

    def _matvec(self, v):
        out = 2.0 * v
        out[..., :-1] -= v[..., 1:]
        out[..., 1:] -= v[..., :-1]
        return out / self.h**2

    def solve(self, rhs):
        """Solve ``A z = rhs`` with the prefactored Cholesky decomposition.

        Batched over leading axes (the solve runs on the last axis).
        """
        rhs = np.asarray(rhs, dtype=float)
        if rhs.ndim == 1:
            return cho_solve_banded((self._cho, False), rhs)
        flat = rhs.reshape(-1, rhs.shape[-1])
        out = cho_solve_banded((self._cho, False), flat.T).T
        return out.reshape(rhs.shape)

    def dense(self):
        a = np.diag(self.diag_main) + np.diag(self.diag_off, 1) + np.diag(self.diag_off, -1)
        return a

    def eigenvalues(self):
        return eigvalsh_tridiagonal(self.diag_main, self.diag_off)


def laplacian_dirichlet(n_nodes, h):
    """Symmetric positive definite discrete ``-d^2/dxi^2`` on ``M`` nodes.

    The closed-form spectrum is ``4/h^2 * sin^2(k*pi / (2*(M+1)))`` for
    ``k = 1..M``.
    """
    return _DirichletLaplacian(n_nodes, h)


def hminus1_inner(u, v, lap, h=1.0):
    """Dual-space inner product ``h * <lap^{-1} u, v>`` via a banded solve.

    ``lap`` must be a :func:`laplacian_dirichlet` map.  Symmetric and positive
    definite because the Laplacian is.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    return h * np.sum(lap.solve(u) * v, axis=-1)


class L2Metric:
    """The h-weighted Euclidean product on interior node values."""

    kind = "l2"

    def __init__(self, grid):
        self.grid = grid
        self.h = grid.h

    def inner(self, u, v):
        return self.h * np.sum(np.asarray(u) * np.asarray(v), axis=-1)

    def norm2(self, u):
        return self.inner(u, u)

    def pair_vector(self, theta):
        """Euclidean representer: ``inner(a, theta) = dot(a, pair_vector)``."""
        return self.h * np.asarray(theta, dtype=float)


class HMinus1Metric:
    """Dual metric ``h <lap^{-1} u, v>`` induced by a Dirichlet Laplacian."""

    kind = "hminus1"

    def __init__(self, grid, lap=None):
        self.grid = grid
        self.h = grid.h
        self.lap = lap if lap is not None else laplacian_dirichlet(grid.M, grid.h)

    def inner(self, u, v):
        return self.h * np.sum(self.lap.solve(np.asarray(u, dtype=float)) * np.asarray(v), axis=-1)

    def norm2(self, u):
        return self.inner(u, u)

    def pair_vector(self, theta):
        return self.h * self.lap.solve(np.asarray(theta, dtype=float))


def operator_norm(op, iters=200, tol=1e-6, seed=0):
    """Power-iteration estimate of the spectral norm of ``op``.

    Runs on ``op^T op`` until the Rayleigh quotient stagnates below ``tol``
    relative change, or ``iters`` iterations.
    """
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(op.shape_in)
    nv = np.linalg.norm(v)
    if nv == 0.0:
        return 0.0
    v /= nv
    sigma = 0.0
    for _ in range(iters):
        w = op.apply_adjoint(op.apply(v))
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        new_sigma = np.sqrt(nw)
        v = w / nw
        if sigma > 0.0 and abs(new_sigma - sigma) <= tol * sigma:
            sigma = new_sigma
            break
        sigma = new_sigma
    return float(sigma)
