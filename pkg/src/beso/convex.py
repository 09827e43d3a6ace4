"""Proper convex integrands: evaluation, subgradients, proximal maps, conjugates.

Every catalog integrand is a scalar convex function applied elementwise to
numpy arrays.  All of them attain their minimum 0 at the origin, which the
generic proximal and conjugate machinery exploits for bracketing.  Extended
real arithmetic uses ``np.inf`` honestly; no silent clipping.
"""

import numpy as np

from .errors import BesoError, ConvergenceFailure

__all__ = [
    "ConvexIntegrand",
    "Quadratic",
    "PowerNorm",
    "AbsValue",
    "LogEntropy",
    "ExpGrowth",
    "IndicatorBox",
    "indicator_nonneg",
    "PorousPotential",
    "MoreauEnvelope",
    "prox",
    "conjugate_eval",
    "fenchel_young_gap",
    "moreau_identity_check",
    "moreau_envelope_grad",
]

_EXP_CAP = 700.0  # exp overflow guard for float64


def _monotone_root(g, lo, hi, dg=None, iters=90, atol=1e-14):
    """Vectorized root of an increasing function on the bracket ``[lo, hi]``.

    Safeguarded Newton: candidate steps falling outside the current bracket
    (or with no derivative available) are replaced by bisection.  ``g`` must
    satisfy ``g(lo) <= 0 <= g(hi)`` elementwise.
    """
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    z = 0.5 * (lo + hi)
    scale = 1.0 + np.maximum(np.abs(lo), np.abs(hi))
    for _ in range(iters):
        gz = g(z)
        neg = gz <= 0.0
        lo = np.where(neg, z, lo)
        hi = np.where(neg, hi, z)
        if np.all(np.abs(gz) <= atol * scale) or np.all(hi - lo <= 1e-16 * scale):
            break
        if dg is not None:
            d = dg(z)
            with np.errstate(divide="ignore", invalid="ignore"):
                step = np.where(d > 0.0, gz / np.where(d > 0.0, d, 1.0), np.inf)
            cand = z - step
            ok = np.isfinite(cand) & (cand > lo) & (cand < hi)
            z = np.where(ok, cand, 0.5 * (lo + hi))
        else:
            z = 0.5 * (lo + hi)
    return 0.5 * (lo + hi)


class ConvexIntegrand:
    """Behavioral contract for a proper convex scalar integrand.

    Subclasses implement ``eval``/``subgradient`` and, where available,
    closed-form ``prox`` and ``conjugate_eval``; otherwise the safeguarded
    Newton fallbacks below apply.  ``subgradient`` returns the minimal-norm
    element; ``subgradient_interval`` exposes the full 1-D subdifferential
    at kinks.
    """

    closed_form_conjugate = False
    smooth = False

    def eval(self, z):
        raise NotImplementedError

    def subgradient(self, z):
        raise NotImplementedError

    def subgradient_interval(self, z):
        g = self.subgradient(z)
        return g, g

    def subgradient_derivative(self, z):
        """Second derivative where it exists; used to accelerate Newton."""
        return None

    # -- proximal map -----------------------------------------------------

    def prox(self, v, tau):
        """Pointwise ``argmin_z eval(z) + (z - v)^2 / (2 tau)``."""
        v = np.asarray(v, dtype=float)
        lo0, hi0 = self.subgradient_interval(np.zeros_like(v))
        at_zero = (v >= tau * lo0) & (v <= tau * hi0)
        lo = np.minimum(0.0, v)
        hi = np.maximum(0.0, v)

        def g(z):
            return z - v + tau * self.subgradient(z)

        d2 = self.subgradient_derivative
        dg = None
        if d2(np.zeros(1)) is not None:
            dg = lambda z: 1.0 + tau * d2(z)
        z = _monotone_root(g, lo, hi, dg=dg)
        return np.where(at_zero, 0.0, z)

    # -- conjugate --------------------------------------------------------

    def _conjugate_witness(self, v):
        """Solve ``subgradient(z) = v``; returns (z, attained) elementwise."""
        v = np.asarray(v, dtype=float)
        hi = np.full(v.shape, 1.0)
        # expand until the slope bracket contains v (or give up -> +inf)
        attained_hi = self.subgradient(hi) >= v
        attained_lo = self.subgradient(-hi) <= v
        for _ in range(200):
            if np.all(attained_hi & attained_lo):
                break
            hi = np.where(attained_hi & attained_lo, hi, hi * 2.0)
            if np.any(hi > 1e300):
                break
            attained_hi = self.subgradient(hi) >= v
            attained_lo = self.subgradient(-hi) <= v
        attained = attained_hi & attained_lo

        def g(z):
            return self.subgradient(z) - v

        z = _monotone_root(g, -hi, hi, dg=self.subgradient_derivative if self.smooth else None)
        return z, attained

    def conjugate_eval(self, v):
        """Pointwise ``sup_z (v z - eval(z))``; ``+inf`` off the domain."""
        v = np.asarray(v, dtype=float)
        z, attained = self._conjugate_witness(v)
        val = v * z - self.eval(z)
        # kinks make eval(z*) exact even if subgradient(z*) != v; the value
        # v*z - eval(z) at the safeguarded root is correct to bracket width
        return np.where(attained, val, np.inf)

    def conjugate_subgradient(self, v):
        """Minimal-norm element of the conjugate's subdifferential (argmax z)."""
        z, attained = self._conjugate_witness(v)
        return np.where(attained, z, np.nan)

    def conjugate_prox(self, v, tau):
        """Prox of the conjugate, computed on the conjugate itself.

        Closed forms override this; the fallback solves the strictly
        monotone inclusion ``p + tau * (f*)'(p) = v`` with the conjugate
        subgradient evaluated by inner inversion.  Kept independent of
        ``prox`` so the Moreau-identity check exercises two genuine routes.
        """
        v = np.asarray(v, dtype=float)

        def g(p):
            return p - v + tau * self.conjugate_subgradient(p)

        lo = np.minimum(0.0, v) - tau * np.abs(self.subgradient(np.zeros_like(v)))
        hi = np.maximum(0.0, v) + tau * np.abs(self.subgradient(np.zeros_like(v)))
        # conjugate minimized where 0 in subdifferential of f* <=> v=... use
        # generic bracket [min(0,v), max(0,v)] shifted by the slope at 0
        return _monotone_root(g, lo, hi)

    # -- test support ------------------------------------------------------

    def sample_domain(self, rng, n):
        return rng.standard_normal(n)

    def sample_conjugate_domain(self, rng, n):
        return self.subgradient(self.sample_domain(rng, n))


class Quadratic(ConvexIntegrand):
    """``c z^2 / 2`` with ``c > 0``; self-conjugate family."""

    closed_form_conjugate = True
    smooth = True

    def __init__(self, c=1.0):
        if c <= 0:
            raise BesoError("quadratic coefficient must be positive")
        self.c = float(c)

    def eval(self, z):
        return 0.5 * self.c * np.square(z)

    def subgradient(self, z):
        return self.c * np.asarray(z, dtype=float)

    def subgradient_derivative(self, z):
        return np.full_like(np.asarray(z, dtype=float), self.c)

    def prox(self, v, tau):
        return np.asarray(v, dtype=float) / (1.0 + tau * self.c)

    def conjugate_eval(self, v):
        return np.square(v) / (2.0 * self.c)

    def conjugate_subgradient(self, v):
        return np.asarray(v, dtype=float) / self.c

    def conjugate_prox(self, v, tau):
        return np.asarray(v, dtype=float) / (1.0 + tau / self.c)


class PowerNorm(ConvexIntegrand):
    """``|z|^p / p`` with ``p > 1``; conjugate is ``|v|^q / q``."""

    closed_form_conjugate = True
    smooth = True

    def __init__(self, p):
        if p <= 1:
            raise BesoError("power integrand needs p > 1")
        self.p = float(p)
        self.q = self.p / (self.p - 1.0)

    def eval(self, z):
        return np.abs(z) ** self.p / self.p

    def subgradient(self, z):
        z = np.asarray(z, dtype=float)
        return np.sign(z) * np.abs(z) ** (self.p - 1.0)

    def subgradient_derivative(self, z):
        z = np.abs(np.asarray(z, dtype=float))
        with np.errstate(divide="ignore"):
            d = (self.p - 1.0) * z ** (self.p - 2.0)
        return np.where(z == 0.0, np.inf if self.p < 2 else (1.0 if self.p == 2 else 0.0), d)

    def conjugate_eval(self, v):
        return np.abs(v) ** self.q / self.q

    def conjugate_subgradient(self, v):
        v = np.asarray(v, dtype=float)
        return np.sign(v) * np.abs(v) ** (self.q - 1.0)

    def conjugate_prox(self, v, tau):
        return PowerNorm(self.q).prox(v, tau)


class AbsValue(ConvexIntegrand):
    """``|z|``; proximal map is the soft threshold, conjugate the box gauge."""

    closed_form_conjugate = True

    def eval(self, z):
        return np.abs(z)

    def subgradient(self, z):
        return np.sign(z)

    def subgradient_interval(self, z):
        z = np.asarray(z, dtype=float)
        s = np.sign(z)
        return np.where(z == 0.0, -1.0, s), np.where(z == 0.0, 1.0, s)

    def prox(self, v, tau):
        v = np.asarray(v, dtype=float)
        return np.sign(v) * np.maximum(np.abs(v) - tau, 0.0)

    def conjugate_eval(self, v):
        v = np.asarray(v, dtype=float)
        return np.where(np.abs(v) <= 1.0 + 1e-15, 0.0, np.inf)

    def conjugate_subgradient(self, v):
        return np.zeros_like(np.asarray(v, dtype=float))

    def conjugate_prox(self, v, tau):
        return np.clip(v, -1.0, 1.0)

    def sample_conjugate_domain(self, rng, n):
        return rng.uniform(-1.0, 1.0, n)


class LogEntropy(ConvexIntegrand):
    """``|z| log(|z| + 1)``: superlinear with sub-polynomial slope growth.

    The slope is the true derivative ``(log(|z|+1) + |z|/(|z|+1)) sign z``,
    which is what the potential's differentiation gives; it vanishes at the
    origin, so the integrand is C^1.
    """

    smooth = True

    def eval(self, z):
        a = np.abs(z)
        return a * np.log1p(a)

    def subgradient(self, z):
        z = np.asarray(z, dtype=float)
        a = np.abs(z)
        return np.sign(z) * (np.log1p(a) + a / (a + 1.0))

    def subgradient_derivative(self, z):
        a = np.abs(np.asarray(z, dtype=float))
        return 1.0 / (a + 1.0) + 1.0 / (a + 1.0) ** 2


class ExpGrowth(ConvexIntegrand):
    """Primitive of the odd slope ``a0 sign(z) exp(a1 |z|^p)``.

    Superlinear on both rays.  For ``p = 1`` the primitive is closed form;
    otherwise it is evaluated by a fixed-panel Simpson rule, with overflow
    mapped to ``+inf``.
    """

    def __init__(self, a0=1.0, a1=1.0, p=1.0):
        if a0 <= 0 or a1 <= 0 or p < 1:
            raise BesoError("exp-growth integrand needs a0, a1 > 0 and p >= 1")
        self.a0, self.a1, self.p = float(a0), float(a1), float(p)

    def _slope_abs(self, a):
        e = self.a1 * a**self.p
        return np.where(e > _EXP_CAP, np.inf, self.a0 * np.exp(np.minimum(e, _EXP_CAP)))

    def eval(self, z):
        a = np.abs(np.asarray(z, dtype=float))
        if self.p == 1.0:
            e = self.a1 * a
            return np.where(e > _EXP_CAP, np.inf, (self.a0 / self.a1) * np.expm1(np.minimum(e, _EXP_CAP)))
        # Simpson on [0, a] with 256 panels, elementwise
        n = 256
        s = a[..., None] * (np.arange(n + 1) / n)
        f = self._slope_abs(s)
        w = np.full(n + 1, 2.0)
        w[1::2] = 4.0
        w[0] = w[-1] = 1.0
        val = (a / (3.0 * n)) * np.einsum("...k,k->...", np.where(np.isfinite(f), f, 0.0), w)
        return np.where(np.isfinite(f).all(axis=-1), val, np.inf)

    def subgradient(self, z):
        z = np.asarray(z, dtype=float)
        return np.sign(z) * self._slope_abs(np.abs(z))

    def subgradient_interval(self, z):
        z = np.asarray(z, dtype=float)
        g = self.subgradient(z)
        return np.where(z == 0.0, -self.a0, g), np.where(z == 0.0, self.a0, g)

    def subgradient_derivative(self, z):
        a = np.abs(np.asarray(z, dtype=float))
        e = self.a1 * a**self.p
        d = self.a0 * self.a1 * self.p * a ** (self.p - 1.0) * np.exp(np.minimum(e, _EXP_CAP))
        return np.where(e > _EXP_CAP, np.inf, d)

    def sample_domain(self, rng, n):
        return rng.uniform(-3.0, 3.0, n)


class IndicatorBox(ConvexIntegrand):
    """Indicator of ``[lo, hi]`` elementwise; ``lo <= 0 <= hi`` required.

    The conjugate is the support function of the box; both proximal maps are
    closed form (clip and shrink respectively).
    """

    closed_form_conjugate = True

    def __init__(self, lo, hi):
        if not (lo <= 0.0 <= hi) or lo >= hi:
            raise BesoError("box must contain 0 with lo < hi")
        self.lo, self.hi = float(lo), float(hi)

    def eval(self, z):
        z = np.asarray(z, dtype=float)
        tol = 1e-12 * (1.0 + abs(self.lo) + abs(self.hi))
        inside = (z >= self.lo - tol) & (z <= self.hi + tol)
        return np.where(inside, 0.0, np.inf)

    def subgradient(self, z):
        return np.zeros_like(np.asarray(z, dtype=float))

    def subgradient_interval(self, z):
        z = np.asarray(z, dtype=float)
        lo = np.where(z <= self.lo, -np.inf, 0.0)
        hi = np.where(z >= self.hi, np.inf, 0.0)
        return lo, hi

    def prox(self, v, tau):
        return np.clip(v, self.lo, self.hi)

    def conjugate_eval(self, v):
        v = np.asarray(v, dtype=float)
        with np.errstate(invalid="ignore"):
            out = np.where(v > 0, v * self.hi, np.where(v < 0, v * self.lo, 0.0))
        return out

    def conjugate_subgradient(self, v):
        v = np.asarray(v, dtype=float)
        return np.where(v > 0, self.hi, np.where(v < 0, self.lo, 0.0))

    def conjugate_prox(self, v, tau):
        # Moreau in closed form: v - tau * clip(v / tau)
        v = np.asarray(v, dtype=float)
        return v - tau * np.clip(v / tau, self.lo, self.hi)

    def sample_domain(self, rng, n):
        lo = self.lo if np.isfinite(self.lo) else -3.0
        hi = self.hi if np.isfinite(self.hi) else 3.0
        return rng.uniform(lo, hi, n)

    def sample_conjugate_domain(self, rng, n):
        lo = -3.0 if np.isfinite(self.lo) else 0.0
        hi = 3.0 if np.isfinite(self.hi) else 0.0
        return rng.uniform(lo, hi, n)


def indicator_nonneg():
    """Indicator of the nonnegative half line."""
    return IndicatorBox(0.0, np.inf)


class PorousPotential(ConvexIntegrand):
    """``scale |r|^{m+1} / (m+1)`` whose slope is the monotone ``beta``.

    ``beta(r) = scale |r|^m sign r`` with ``beta(0) = 0``; ``m >= 1`` keeps
    the slope Lipschitz on bounded sets, which the banded Newton solvers
    rely on.
    """

    closed_form_conjugate = True
    smooth = True

    def __init__(self, m=2.0, scale=1.0):
        if m < 1 or scale <= 0:
            raise BesoError("porous potential needs m >= 1 and scale > 0")
        self.m = float(m)
        self.scale = float(scale)

    def eval(self, z):
        return self.scale * np.abs(z) ** (self.m + 1.0) / (self.m + 1.0)

    def beta(self, z):
        z = np.asarray(z, dtype=float)
        return self.scale * np.sign(z) * np.abs(z) ** self.m

    def beta_derivative(self, z):
        return self.scale * self.m * np.abs(np.asarray(z, dtype=float)) ** (self.m - 1.0)

    def subgradient(self, z):
        return self.beta(z)

    def subgradient_derivative(self, z):
        return self.beta_derivative(z)

    def conjugate_eval(self, v):
        w = np.abs(v) / self.scale
        return self.scale * (self.m / (self.m + 1.0)) * w ** ((self.m + 1.0) / self.m)

    def conjugate_subgradient(self, v):
        v = np.asarray(v, dtype=float)
        return np.sign(v) * (np.abs(v) / self.scale) ** (1.0 / self.m)


class Huber(ConvexIntegrand):
    """Moreau envelope of ``|z|`` at parameter ``eps``, in closed form.

    Quadratic ``z^2 / (2 eps)`` inside ``|z| <= eps``, affine outside; the
    conjugate is ``eps v^2 / 2`` on ``[-1, 1]`` and ``+inf`` outside.
    """

    closed_form_conjugate = True
    smooth = True

    def __init__(self, eps):
        if eps <= 0:
            raise BesoError("huber parameter must be positive")
        self.eps = float(eps)

    def eval(self, z):
        a = np.abs(z)
        return np.where(a <= self.eps, 0.5 * a**2 / self.eps, a - 0.5 * self.eps)

    def subgradient(self, z):
        z = np.asarray(z, dtype=float)
        return np.clip(z / self.eps, -1.0, 1.0)

    def subgradient_derivative(self, z):
        a = np.abs(np.asarray(z, dtype=float))
        return np.where(a <= self.eps, 1.0 / self.eps, 0.0)

    def prox(self, v, tau):
        v = np.asarray(v, dtype=float)
        inside = np.abs(v) <= self.eps + tau
        return np.where(inside, v * self.eps / (self.eps + tau),
                        v - tau * np.sign(v))

    def conjugate_eval(self, v):
        v = np.asarray(v, dtype=float)
        return np.where(np.abs(v) <= 1.0 + 1e-15, 0.5 * self.eps * np.square(v), np.inf)

    def conjugate_subgradient(self, v):
        return self.eps * np.clip(v, -1.0, 1.0)

    def conjugate_prox(self, v, tau):
        return np.clip(v / (1.0 + tau * self.eps), -1.0, 1.0)

    def sample_conjugate_domain(self, rng, n):
        return rng.uniform(-1.0, 1.0, n)


class MoreauEnvelope:
    """Moreau regularisation of a base integrand at parameter ``epsilon``."""

    def __init__(self, base, epsilon):
        if epsilon <= 0:
            raise BesoError("envelope parameter must be positive")
        self.base = base
        self.epsilon = float(epsilon)

    def eval(self, z):
        p = self.base.prox(z, self.epsilon)
        return self.base.eval(p) + np.square(np.asarray(z) - p) / (2.0 * self.epsilon)

    def gradient(self, z):
        z = np.asarray(z, dtype=float)
        return (z - self.base.prox(z, self.epsilon)) / self.epsilon


def prox(f, v, tau):
    """Resolvent of the subdifferential: ``(I + tau d f)^{-1} v``."""
    if tau <= 0:
        raise BesoError("prox parameter must be positive")
    return f.prox(v, tau)


def conjugate_eval(f, v):
    """Value of the convex conjugate of ``f`` at ``v`` (``+inf`` allowed)."""
    return f.conjugate_eval(v)


def fenchel_young_gap(f, u, v):
    """``f(u) + f*(v) - u v``, nonnegative, zero exactly on the graph of df."""
    return f.eval(u) + f.conjugate_eval(v) - np.asarray(u, dtype=float) * np.asarray(v, dtype=float)


def moreau_identity_check(f, v, tau):
    """Residual of ``v = prox_{tau f}(v) + tau prox_{f*/tau}(v/tau)``."""
    v = np.asarray(v, dtype=float)
    return np.abs(v - f.prox(v, tau) - tau * f.conjugate_prox(v / tau, 1.0 / tau))


def moreau_envelope_grad(env, z):
    """Gradient of the envelope: ``(z - prox(base, z, eps)) / eps``."""
    return env.gradient(z)
