"""Inner resolvent engines shared by the dual evaluation and the steppers.

Three strongly convex single-time-slice problems recur everywhere:

* gradient-composed integrand plus diagonal quadratic (parabolic family),
* monotone pointwise slope under a Laplacian (porous media),
* quadratic-over-cone inclusions (variational inequalities).

All engines are batched over a leading row axis and certify their output
with a first-order or primal-dual-gap residual.
"""

import numpy as np
from scipy.linalg import solve_banded

from .convex import Quadratic
from .errors import ConvergenceFailure
from .grids import divergence1d, gradient1d

__all__ = ["elliptic_grad_prox", "porous_step", "resolvent_vi"]


def _tridiag_solve(main, upper, lower, rhs):
    ab = np.zeros((3, main.size))
    ab[0, 1:] = upper
    ab[1, :] = main
    ab[2, :-1] = lower
    return solve_banded((1, 1), ab, rhs)


def elliptic_grad_prox(j, grid, quad_diag, v_rows, edge_weight, tol=1e-12, max_iters=50000):
    """Minimise ``sum_e w_e j((Dz)_e) + (1/2)(q z, z)_h - (v, z)_h`` rowwise.

    ``quad_diag`` is the positive field ``q`` (scalar or per-node), and
    ``edge_weight`` the scalar weight ``w_e`` on the edge integrand (it may
    be a per-row column to batch different time steps).  Returns
    ``(z, s, gap)`` with ``s`` the optimal edge flux (a subgradient
    selection of ``j`` at ``Dz``) and ``gap`` the per-row primal-dual gap.

    Uses the strongly convex accelerated primal-dual iteration; quadratic
    integrands short-circuit to one banded solve.
    """
    h = grid.h
    v_rows = np.atleast_2d(np.asarray(v_rows, dtype=float))
    rows, m = v_rows.shape
    q = np.broadcast_to(np.asarray(quad_diag, dtype=float), (m,)).astype(float)
    w = np.broadcast_to(np.asarray(edge_weight, dtype=float), (rows, 1)).astype(float)

    if isinstance(j, Quadratic):
        # closed form: (w c A + h q) z = h v with A the Dirichlet Laplacian
        c = j.c
        main = h * q[None, :] + (w / h) * 2.0 * c / h
        off = -(w / h) * c / h * np.ones((rows, m))
        z = np.empty_like(v_rows)
        for r in range(rows):
            z[r] = _tridiag_solve(main[r].copy(), off[r, :-1], off[r, :-1], h * v_rows[r])
        s = c * gradient1d(z, h)
        return z, s, np.zeros(rows)

    norm_k = 2.0 / h
    tau = 1.0 / norm_k
    sigma = 1.0 / norm_k
    gamma = h * float(np.min(q))
    z = np.zeros((rows, m))
    zbar = z.copy()
    s = np.zeros((rows, m + 1))
    scale = 1.0 + np.abs(_primal_value(j, grid, q, v_rows, w, z))
    gap = np.full(rows, np.inf)
    check_every = 50
    for it in range(1, max_iters + 1):
        # dual ascent on the edge flux
        arg = s + sigma * gradient1d(zbar, h)
        cw = w  # rowwise edge weight
        s = arg - sigma * j.prox(arg / sigma, cw / sigma)
        # primal descent on the nodes
        rhs = z / tau + h * v_rows + divergence1d(s, h)
        z_new = rhs / (1.0 / tau + h * q[None, :])
        theta = 1.0 / np.sqrt(1.0 + 2.0 * gamma * tau)
        zbar = z_new + theta * (z_new - z)
        z = z_new
        tau *= theta
        sigma /= theta
        if it % check_every == 0 or it == max_iters:
            gap = _pd_gap(j, grid, q, v_rows, w, z, s)
            if np.all(gap <= tol * scale):
                break
    if not np.all(gap <= 10.0 * tol * scale):
        raise ConvergenceFailure(
            f"elliptic inner solve: gap {np.max(gap / scale):.3e} after {max_iters} iterations"
        )
    # hand back the unweighted flux selection a = s / w with a in dj(Dz)
    return z, s / w, gap


def _primal_value(j, grid, q, v, w, z):
    h = grid.h
    g = gradient1d(z, h)
    return (
        np.sum(w * j.eval(g), axis=-1)
        + 0.5 * h * np.sum(q * z * z, axis=-1)
        - h * np.sum(v * z, axis=-1)
    )


def _pd_gap(j, grid, q, v, w, z, s):
    """Primal-dual gap of the slice problem; independent certificate."""
    h = grid.h
    primal = _primal_value(j, grid, q, v, w, z)
    with np.errstate(over="ignore", invalid="ignore"):
        fstar = np.sum(w * j.conjugate_eval(s / w), axis=-1)
    resid = h * v + divergence1d(s, h)  # = -K^T s + h v
    dual = -fstar - 0.5 * np.sum(resid * resid / (h * q), axis=-1)
    return primal - dual


def porous_step(potential, lap, alpha_field, kappa, v_rows, tol=1e-11, max_iters=80):
    """Solve ``alpha z + kappa * lap(beta(z)) = v`` rowwise by damped Newton.

    ``beta`` is the monotone slope of ``potential``; the Jacobian
    ``diag(alpha) + kappa L diag(beta'(z))`` is banded and nonsingular for
    ``alpha > 0``.  Backtracks on the Euclidean residual.
    """
    v_rows = np.atleast_2d(np.asarray(v_rows, dtype=float))
    rows, m = v_rows.shape
    alpha = np.broadcast_to(np.asarray(alpha_field, dtype=float), (m,)).astype(float)
    h = lap.h
    out = np.empty_like(v_rows)
    for r in range(rows):
        v = v_rows[r]
        z = v / alpha
        target = tol * (1.0 + np.linalg.norm(v))
        for _ in range(max_iters):
            res = alpha * z + kappa * lap.apply(potential.beta(z)) - v
            nr = np.linalg.norm(res)
            if nr <= target:
                break
            bp = potential.beta_derivative(z)
            main = alpha + kappa * (2.0 / h**2) * bp
            upper = -kappa / h**2 * bp[1:]
            lower = -kappa / h**2 * bp[:-1]
            step = _tridiag_solve(main, upper, lower, res)
            t = 1.0
            for _ in range(40):
                z_try = z - t * step
                res_try = alpha * z_try + kappa * lap.apply(potential.beta(z_try)) - v
                if np.linalg.norm(res_try) <= (1.0 - 1e-4 * t) * nr:
                    break
                t *= 0.5
            z = z - t * step
        else:
            raise ConvergenceFailure("porous resolvent: Newton did not converge")
        out[r] = z
    return out


def resolvent_vi(quad_apply, lipschitz, modulus, project, w_rows, tol=1e-10, max_iters=50000):
    """Solve ``Q z + N_K(z) ∋ w`` rowwise; ``Q`` SPD with modulus included.

    Accelerated projected gradient with the constant-momentum scheme for
    strongly convex objectives.  Returns ``(z, residual)`` where the
    residual is the scaled projected-gradient map
    ``L * |z - P_K(z - (Qz - w)/L)|_inf`` per row.
    """
    w_rows = np.atleast_2d(np.asarray(w_rows, dtype=float))
    lip = float(lipschitz)
    mom = (np.sqrt(lip) - np.sqrt(modulus)) / (np.sqrt(lip) + np.sqrt(modulus))
    z = project(w_rows / lip)
    y = z.copy()
    scale = 1.0 + np.max(np.abs(w_rows))
    res = None
    for it in range(1, max_iters + 1):
        grad = quad_apply(y) - w_rows
        z_new = project(y - grad / lip)
        y = z_new + mom * (z_new - z)
        z = z_new
        if it % 40 == 0 or it == max_iters:
            gmap = z - project(z - (quad_apply(z) - w_rows) / lip)
            res = lip * np.max(np.abs(gmap), axis=-1)
            if np.all(res <= tol * scale):
                break
    if res is None or not np.all(res <= 10.0 * tol * scale):
        raise ConvergenceFailure("vi resolvent: projected gradient did not converge")
    return z, res
