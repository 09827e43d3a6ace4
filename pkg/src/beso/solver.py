"""Per-path primal-dual solver with an independently certified duality gap.

The per-path program is minimised over the transformed state rows
``Y_k = exp(W_k)(y_k + x)`` jointly with an auxiliary flux ``w`` that
parametrises the conjugate term by infimal convolution:

    psi*_k(u) = inf_w [ R_k(w) + C_k(u - T w) ],

with ``R`` a pointwise conjugate integrand (or a support function) and
``C`` a fixed quadratic.  Splitting blocks: the quadratic part of the
state functional is a prefactored sparse prox; the potential and the
coupling are dualised, so every dual update is a pointwise integrand prox
or a prefactored banded quadratic prox.  Termination is driven by a cheap
upper bound on the duality gap; the returned pair is then certified by an
independent :func:`beso.functional.eval_gap` evaluation, which is the only
criterion trusted.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve, cholesky_banded, cho_solve_banded, \
    eigvalsh_tridiagonal
from scipy.sparse.linalg import splu

from ._inner import resolvent_vi as _resolvent_vi_rows
from .convex import Quadratic
from .errors import BesoError, PathUnusable
from .functional import (
    FiniteDimVI,
    ObstacleVI,
    Parabolic,
    PathProgram,
    PorousMedia,
    ScalarLinear,
    eval_gap,
)
from .grids import LinearMap, divergence1d, gradient1d, operator_norm
from .transform import DiscreteProcess, control_from_process

__all__ = [
    "SolverConfig",
    "SaddleState",
    "SolveReport",
    "solve_path",
    "resolvent_vi",
    "solve_expectation",
    "ExpectationReport",
]


@dataclass
class SolverConfig:
    """Knobs of the outer splitting and the inner resolvent engines."""

    max_iters: int = 60000
    tol_gap: float = 1e-6  # relative: gap <= tol_gap * (1 + |G1|)
    tol_residual: float = 1e-8
    step_sizes: tuple | str = "auto"  # (tau, sigma) or "auto"
    step_balance: float = 1.0
    inner_max_iters: int = 50000
    inner_tol: float = 1e-11
    check_every: int = 50
    init: str = "state"  # "state" | "zero"
    deterministic: bool = True  # fixed power-iteration seed, ordered reductions

    def __post_init__(self):
        if self.tol_gap <= 0 or self.tol_residual <= 0:
            raise BesoError("tolerances must be positive")


@dataclass
class SaddleState:
    """Iterate bundle of the splitting; exposed for diagnostics."""

    y: np.ndarray
    w: np.ndarray
    dual_flux: np.ndarray | None
    dual_coupling: np.ndarray
    iters: int = 0
    gap_history: list = field(default_factory=list)


@dataclass
class SolveReport:
    """Outcome of one per-path solve."""

    seed: int
    iters: int
    g1: float
    g2: float
    gap: float
    gap_rel: float
    certified: bool
    feasible_residual: float
    quad_min_eig: float | None
    inner_residual: float
    gap_history: list
    message: str = ""


class _QuadBlock:
    """Quadratic-plus-linear part of the state functional, prox prefactored."""

    def __init__(self, prog, inst, tau):
        ctx = prog.ctx
        n, m = prog.n_steps, ctx.grid.M
        h = ctx.grid.h
        dts = prog.dts
        g = prog.growth
        c = prog.c
        self.n, self.m = n, m
        self.min_eig = None

        if isinstance(inst, PorousMedia):
            mh = h * np.linalg.inv(inst.lap().dense())
        else:
            mh = None  # diagonal metric h * I

        diag_blocks = []
        for k in range(n):
            if mh is None:
                a_kk = h * np.diag(1.0 + dts[k] * (c + 0.5 * ctx.delta))
                if isinstance(inst, ScalarLinear):
                    a_kk += h * np.diag(np.full(m, 0.5 * dts[k] * inst.a))
                if isinstance(inst, ObstacleVI):
                    a_kk = a_kk + dts[k] * 0.5 * h * inst.lap().dense()
                if isinstance(inst, FiniteDimVI):
                    a_kk = a_kk + dts[k] * 0.5 * inst.a0
            else:
                a_kk = mh + dts[k] * (np.diag(c) @ mh) + dts[k] * 0.5 * ctx.delta * mh
            diag_blocks.append(a_kk + a_kk.T)

        hq = sp.lil_matrix((n * m, n * m))
        for k in range(n):
            hq[k * m:(k + 1) * m, k * m:(k + 1) * m] = diag_blocks[k]
            if k >= 1:
                gk = np.diag(g[k])
                cross = -(gk @ mh) if mh is not None else -h * gk
                hq[(k - 1) * m:k * m, k * m:(k + 1) * m] = cross
                hq[k * m:(k + 1) * m, (k - 1) * m:k * m] = cross.T
        self.hessian = hq.tocsc()
        self._lu = splu((self.hessian + sp.identity(n * m, format="csc") / tau).tocsc())

        self.lin = np.zeros((n, m))
        g0x = g[0] * prog.y0_state
        self.lin[0] = -(mh @ g0x) if mh is not None else -h * g0x

        # convexity certificate of the pathwise quadratic, where cheap
        if mh is None and not isinstance(inst, (ObstacleVI, FiniteDimVI)):
            extra = inst.a if isinstance(inst, ScalarLinear) else 0.0
            diag = 2.0 * h * (1.0 + dts[None, :] * (c[:, None] + 0.5 * (ctx.delta + extra)))
            off = -h * g.T[:, 1:]
            self.min_eig = float(
                min(eigvalsh_tridiagonal(diag[i], off[i])[0] for i in range(m))
            )

    def prox(self, point, tau):
        rhs = point / tau - self.lin
        return self._lu.solve(rhs.reshape(-1)).reshape(self.n, self.m)


class _Blocks:
    """Instance-specific operators and proxes consumed by the outer loop."""

    def __init__(self, inst, prog):
        ctx = prog.ctx
        self.inst = inst
        self.prog = prog
        self.ctx = ctx
        n, m = prog.n_steps, ctx.grid.M
        h = ctx.grid.h
        self.n, self.m, self.h = n, m, h
        self.dts = prog.dts
        dts_col = self.dts[:, None]
        self.offsets = np.zeros((n, m))
        self.offsets[0] = prog.growth[0] * prog.y0_state
        self.growth_next = np.vstack([prog.growth[1:], np.ones((1, m))])

        if isinstance(inst, Parabolic):
            self.flux_shape = (n, m + 1)
            self.j = inst.j
            self.apply_T = lambda w: -divergence1d(w, h)
            self.apply_Tt = lambda p: gradient1d(p, h)
            self.flux_K = lambda y: gradient1d(y, h)
            self.flux_Kt = lambda s: -divergence1d(s, h)
        elif isinstance(inst, PorousMedia):
            self.flux_shape = (n, m)
            self.j = inst.potential
            lap = inst.lap()
            self.apply_T = lambda w: lap.apply(w)
            self.apply_Tt = lambda p: lap.apply(p)
            self.flux_K = lambda y: np.asarray(y)
            self.flux_Kt = lambda s: np.asarray(s)
        elif isinstance(inst, (ObstacleVI, FiniteDimVI)):
            self.flux_shape = (n, m)
            self.j = None
            self.apply_T = lambda w: np.asarray(w)
            self.apply_Tt = lambda p: np.asarray(p)
            self.flux_K = lambda y: np.asarray(y)
            self.flux_Kt = lambda s: np.asarray(s)
        elif isinstance(inst, ScalarLinear):
            self.flux_shape = (n, m)
            self.j = Quadratic(inst.a)
            self.apply_T = lambda w: np.asarray(w)
            self.apply_Tt = lambda p: np.asarray(p)
            self.flux_K = None  # the quadratic potential sits in the smooth block
            self.flux_Kt = None
        else:
            raise BesoError(f"no solver blocks for instance kind {inst.kind!r}")

        self.has_flux_dual = self.flux_K is not None
        self.jw = dts_col * h
        self._p_factor = None
        if isinstance(inst, ObstacleVI):
            self._p_kind = "banded"
            self._p_mat = inst.lap().dense() + ctx.delta * np.eye(m)
        elif isinstance(inst, FiniteDimVI):
            self._p_kind = "dense"
            self._p_mat = inst.a0 + ctx.delta * np.eye(m)
        elif isinstance(inst, PorousMedia):
            self._p_kind = "banded"
            self._p_mat = ctx.delta * inst.lap().dense()
        else:
            self._p_kind = "scalar"
            self._p_mat = None

    def prepare(self, sigma):
        """Prefactor the coupling dual proxes for a fixed step size."""
        if self._p_kind == "scalar":
            self._p_scale = 1.0 + sigma * self.ctx.delta * self.dts[:, None] / self.h
            return
        self._p_factor = []
        for k in range(self.n):
            a = np.eye(self.m) + (sigma * self.dts[k] / self.h) * self._p_mat
            if self._p_kind == "banded":
                ab = np.zeros((2, self.m))
                ab[1] = np.diag(a)
                ab[0, 1:] = np.diag(a, 1)
                self._p_factor.append(cholesky_banded(ab, lower=False))
            else:
                self._p_factor.append(cho_factor(a))

    # -- linear coupling ----------------------------------------------------

    def u_hat_lin(self, y):
        prev = np.vstack([np.zeros((1, self.m)), y[:-1]])
        return -(y - self.prog.growth * prev + self.dts[:, None] * self.prog.c * y)

    def u_hat_lin_adjoint(self, p):
        nxt = np.vstack([p[1:], np.zeros((1, self.m))])
        return -(p + self.dts[:, None] * self.prog.c * p) + self.growth_next * nxt

    def coupling_rows(self, y, w):
        return self.u_hat_lin(y) + self.offsets - self.dts[:, None] * self.apply_T(w)

    # -- dual and primal proxes ----------------------------------------------

    def prox_fstar_flux(self, zeta, sigma):
        inst = self.inst
        if isinstance(inst, ObstacleVI):
            return np.minimum(zeta, 0.0)
        if isinstance(inst, FiniteDimVI):
            return zeta - sigma * np.stack(
                [inst.constraint_set.project(r) for r in zeta / sigma]
            )
        return zeta - sigma * self.j.prox(zeta / sigma, self.jw / sigma)

    def prox_fstar_coupling(self, zeta, sigma):
        if self._p_kind == "scalar":
            return zeta / self._p_scale
        out = np.empty_like(zeta)
        for k in range(self.n):
            if self._p_kind == "banded":
                out[k] = cho_solve_banded((self._p_factor[k], False), zeta[k])
            else:
                out[k] = cho_solve(self._p_factor[k], zeta[k])
        return out

    def prox_w(self, v, tau):
        inst = self.inst
        if isinstance(inst, ObstacleVI):
            return np.minimum(v, 0.0)
        if isinstance(inst, FiniteDimVI):
            out = np.empty_like(v)
            for k in range(self.n):
                cw = tau * self.dts[k]
                out[k] = v[k] - cw * inst.constraint_set.project(v[k] / cw)
            return out
        cw = tau * self.jw
        return v - cw * self.j.prox(v / cw, 1.0 / cw)

    # -- feasibility projections and the cheap gap bound ---------------------

    def project_state(self, y):
        inst = self.inst
        if isinstance(inst, ObstacleVI):
            return np.maximum(y, 0.0)
        if isinstance(inst, FiniteDimVI):
            return np.stack([inst.constraint_set.project(r) for r in y])
        return y

    def project_flux(self, w):
        if isinstance(self.inst, ObstacleVI):
            return np.minimum(w, 0.0)
        return w

    def conjugate_rows(self, w):
        inst = self.inst
        if isinstance(inst, ObstacleVI):
            return np.where(np.max(w, axis=-1) <= 1e-12, 0.0, np.inf)
        if isinstance(inst, FiniteDimVI):
            return inst.constraint_set.support_finite(w)
        with np.errstate(over="ignore", invalid="ignore"):
            return self.h * np.sum(self.j.conjugate_eval(w), axis=-1)

    def coupling_value_rows(self, resid):
        ctx = self.ctx
        if self._p_kind == "scalar":
            return self.h * np.sum(resid * resid, axis=-1) / (2.0 * ctx.delta)
        if isinstance(self.inst, PorousMedia):
            sol = self.inst.lap().solve(resid)
            return self.h * np.sum(sol * resid, axis=-1) / (2.0 * ctx.delta)
        sol = np.linalg.solve(self._p_mat, resid.T).T
        return self.h * np.sum(sol * resid, axis=-1) / 2.0


def _stacked_norm(blocks):
    n, m = blocks.n, blocks.m
    flux = int(np.prod(blocks.flux_shape))
    has_flux = blocks.has_flux_dual
    flux_rows = flux if has_flux else 0

    def fwd(x):
        y = x[: n * m].reshape(n, m)
        w = x[n * m:].reshape(blocks.flux_shape)
        parts = []
        if has_flux:
            parts.append(blocks.flux_K(y).reshape(-1))
        parts.append(
            (blocks.u_hat_lin(y) - blocks.dts[:, None] * blocks.apply_T(w)).reshape(-1)
        )
        return np.concatenate(parts)

    def adj(z):
        ofs = 0
        y_acc = np.zeros((n, m))
        w_acc = np.zeros(blocks.flux_shape)
        if has_flux:
            s = z[:flux].reshape(blocks.flux_shape)
            y_acc += blocks.flux_Kt(s)
            ofs = flux
        p = z[ofs:].reshape(n, m)
        y_acc += blocks.u_hat_lin_adjoint(p)
        w_acc += -blocks.dts[:, None] * blocks.apply_Tt(p)
        return np.concatenate([y_acc.reshape(-1), w_acc.reshape(-1)])

    return operator_norm(LinearMap(flux_rows + n * m, n * m + flux, fwd, adj))


def _gap_upper(blocks, y, w):
    """Certified upper bound on the duality gap at a projected candidate."""
    y_c = blocks.project_state(y)
    w_c = blocks.project_flux(w)
    prog = blocks.prog
    u_hat = blocks.u_hat_lin(y_c) + blocks.offsets
    u = u_hat / blocks.dts[:, None]
    psi = prog.psi_rows(y_c)
    rbar = blocks.conjugate_rows(w_c)
    resid = u - blocks.apply_T(w_c)
    cval = blocks.coupling_value_rows(resid)
    pair = prog.metric.inner(u, y_c)
    vals = blocks.dts * (psi + rbar + cval - pair)
    return float(np.sum(vals)), y_c


def _g1_proxy(blocks, y_c):
    psi = blocks.prog.psi_rows(y_c)
    vals = blocks.dts * np.where(np.isfinite(psi), psi, 0.0)
    return abs(float(np.sum(vals)))


def _certify(inst, ctx, blocks, y_states, cfg, quad_min, iters, history):
    y = ctx.exp_w_neg[1:] * y_states - ctx.x
    proc = DiscreteProcess.from_y(y)
    u = control_from_process(ctx, proc)
    rep = eval_gap(inst, ctx, proc, u, tol_feasible=cfg.tol_residual,
                   tol_inner=cfg.inner_tol)
    scale = 1.0 + abs(rep.g1)
    certified = bool(np.isfinite(rep.gap) and rep.gap <= cfg.tol_gap * scale)
    report = SolveReport(
        seed=ctx.path.seed,
        iters=iters,
        g1=rep.g1,
        g2=rep.g2,
        gap=rep.gap,
        gap_rel=rep.gap / scale if np.isfinite(rep.gap) else np.inf,
        certified=certified,
        feasible_residual=0.0,
        quad_min_eig=quad_min,
        inner_residual=float(np.max(rep.psi_star.residual)) if rep.psi_star is not None else 0.0,
        gap_history=list(history),
    )
    return proc, u, report


def solve_path(inst, ctx_or_path, cfg=None):
    """Minimise the per-path program; returns ``(proc, u, SolveReport)``.

    Accepts either a prebuilt transform context or a sampled path.  The
    splitting runs until a cheap gap bound passes the target, then the
    candidate is certified with the independent gap evaluator; on budget
    exhaustion the best candidate seen is returned flagged non-certified.
    Deterministic for fixed ``(instance, path, config)``.
    """
    cfg = cfg or SolverConfig()
    ctx = ctx_or_path if hasattr(ctx_or_path, "exp_w") else inst.make_context(ctx_or_path)
    prog = PathProgram(inst, ctx)
    blocks = _Blocks(inst, prog)
    n, m = blocks.n, blocks.m

    if cfg.step_sizes == "auto":
        norm_k = max(_stacked_norm(blocks), 1e-12)
        tau = cfg.step_balance * 0.95 / norm_k
        sigma = 0.95 / (cfg.step_balance * norm_k)
    else:
        tau, sigma = cfg.step_sizes
    blocks.prepare(sigma)
    quad = _QuadBlock(prog, inst, tau)

    y = np.broadcast_to(prog.y0_state, (n, m)).copy() if cfg.init == "state" \
        else np.zeros((n, m))
    y = blocks.project_state(y)
    w = np.zeros(blocks.flux_shape)
    s = np.zeros(blocks.flux_shape) if blocks.has_flux_dual else None
    p = np.zeros((n, m))
    y_bar, w_bar = y.copy(), w.copy()

    history = []
    best = None
    target_factor = 1.0
    for it in range(1, cfg.max_iters + 1):
        if blocks.has_flux_dual:
            s = blocks.prox_fstar_flux(s + sigma * blocks.flux_K(y_bar), sigma)
        p = blocks.prox_fstar_coupling(p + sigma * blocks.coupling_rows(y_bar, w_bar), sigma)
        grad_y = blocks.u_hat_lin_adjoint(p)
        if blocks.has_flux_dual:
            grad_y = grad_y + blocks.flux_Kt(s)
        y_new = quad.prox(y - tau * grad_y, tau)
        w_new = blocks.prox_w(w + tau * blocks.dts[:, None] * blocks.apply_Tt(p), tau)
        y_bar = 2.0 * y_new - y
        w_bar = 2.0 * w_new - w
        y, w = y_new, w_new

        if it % cfg.check_every == 0 or it == cfg.max_iters:
            gap_up, y_c = _gap_upper(blocks, y, w)
            history.append(gap_up)
            if best is None or gap_up < best[0]:
                best = (gap_up, y_c.copy())
            if gap_up <= cfg.tol_gap * target_factor * (1.0 + _g1_proxy(blocks, y_c)):
                proc, u, report = _certify(inst, ctx, blocks, y_c, cfg,
                                           quad.min_eig, it, history)
                if report.certified:
                    return proc, u, report
                target_factor *= 0.25
    y_c = best[1] if best is not None else blocks.project_state(y)
    proc, u, report = _certify(inst, ctx, blocks, y_c, cfg, quad.min_eig,
                               cfg.max_iters, history)
    if not report.certified:
        report.message = "max iterations reached without certified gap"
    return proc, u, report


def resolvent_vi(a0, constraint_set, delta, w, tol=1e-10, max_iters=50000):
    """Solve ``A0 z + delta z + N_K(z) ∋ w`` by accelerated projected gradient.

    ``a0`` is a symmetric positive semidefinite matrix or a LinearMap with a
    norm estimate; ``delta > 0`` is the strong-convexity modulus.  Returns
    ``(z, residual)`` with the scaled projected-gradient residual.
    """
    if delta <= 0:
        raise BesoError("delta must be positive")
    if isinstance(a0, np.ndarray):
        lip = float(np.max(np.linalg.eigvalsh(a0))) + delta

        def quad(zr):
            return zr @ a0.T + delta * zr
    else:
        lip = a0.norm_estimate() + delta

        def quad(zr):
            return a0.apply(zr) + delta * zr

    w = np.asarray(w, dtype=float)
    single = w.ndim == 1
    z, res = _resolvent_vi_rows(quad, lip, delta, constraint_set.project,
                                np.atleast_2d(w), tol=tol, max_iters=max_iters)
    return (z[0], float(res[0])) if single else (z, res)


@dataclass
class ExpectationReport:
    """Aggregate over sampled paths with a fixed reduction order."""

    reports: list
    rejected_seeds: list
    mean_gap: float
    mean_g1: float
    mean_g2: float
    all_certified: bool
    mean_terminal_energy: float
    second_moment: np.ndarray  # E |X(t_k)|_H^2 at every node
    trajectories: list | None = None


def solve_expectation(inst, cfg=None, n_paths=8, base_seed=0, keep_trajectories=False):
    """Run :func:`solve_path` over seeds ``base_seed + i`` and aggregate.

    Overflow-capped paths are excluded and reported; reductions run in path
    order so results are bit-stable for fixed inputs.
    """
    cfg = cfg or SolverConfig()
    reports, rejected, trajs = [], [], []
    metric = inst.metric()
    second = None
    energies = []
    for i in range(n_paths):
        seed = base_seed + i
        path = inst.sample(seed)
        try:
            ctx = inst.make_context(path)
        except PathUnusable:
            rejected.append(seed)
            continue
        proc, u, rep = solve_path(inst, ctx, cfg)
        reports.append(rep)
        x_rows = PathProgram(inst, ctx).states(proc)
        full = np.vstack([ctx.exp_w[0][None, :] * ctx.x, x_rows])
        if keep_trajectories:
            trajs.append(full)
        mom = metric.norm2(full)
        second = mom if second is None else second + mom
        energies.append(0.5 * metric.norm2(full[-1]))
    if not reports:
        raise PathUnusable("all sampled paths exceeded the overflow cap")
    k = len(reports)
    return ExpectationReport(
        reports=reports,
        rejected_seeds=rejected,
        mean_gap=float(sum(r.gap for r in reports) / k),
        mean_g1=float(sum(r.g1 for r in reports) / k),
        mean_g2=float(sum(r.g2 for r in reports) / k),
        all_certified=all(r.certified for r in reports),
        mean_terminal_energy=float(sum(energies) / k),
        second_moment=second / k,
        trajectories=trajs if keep_trajectories else None,
    )
