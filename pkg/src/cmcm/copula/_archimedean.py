"""Gumbel, Clayton and Frank copulas.

Log-densities are written against tape nodes so they are differentiable in
both the parameter and the arguments; CDFs, conditional CDFs and generator
evaluations are plain numpy.
"""
from __future__ import annotations

from collections import namedtuple

import numpy as np
from scipy import integrate

from .. import autodiff as ad
from ..errors import DomainError, UnsupportedDim

GeneratorValues = namedtuple("GeneratorValues", "phi dphi phi_inv dphi_inv")


class Generator:
    """Archimedean generator phi with inverse psi = phi^{-1}.

    The copula is ``C(u) = psi(sum_i phi(u_i))`` and its density is
    ``psi^{(d)}(sum_i phi(u_i)) * prod_i phi'(u_i)``.
    """

    def __init__(self, alpha):
        self.alpha = float(alpha)

    def phi(self, t):
        raise NotImplementedError

    def dphi(self, t):
        raise NotImplementedError

    def psi(self, s):
        raise NotImplementedError

    def psi_deriv(self, s, order):
        raise NotImplementedError

    def dpsi(self, s):
        return self.psi_deriv(s, 1)

    def density(self, u):
        """Copula density from the generator identity; ``u`` has shape (..., d)."""
        u = np.asarray(u, dtype=np.float64)
        d = u.shape[-1]
        s = np.sum(self.phi(u), axis=-1)
        return self.psi_deriv(s, d) * np.prod(self.dphi(u), axis=-1)

    def cdf(self, u):
        u = np.asarray(u, dtype=np.float64)
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            return self.psi(np.sum(self.phi(u), axis=-1))


class GumbelGenerator(Generator):
    def __init__(self, alpha):
        super().__init__(alpha)
        if self.alpha < 1:
            raise DomainError("Gumbel generator needs alpha >= 1")

    def phi(self, t):
        with np.errstate(divide="ignore"):
            return (-np.log(t)) ** self.alpha

    def dphi(self, t):
        x = -np.log(t)
        return -self.alpha * x ** (self.alpha - 1.0) / t

    def psi(self, s):
        return np.exp(-np.asarray(s, dtype=np.float64) ** (1.0 / self.alpha))

    def psi_deriv(self, s, order):
        # psi^{(d)}(s) = exp(-s^th) * sum_j a[d, j] s^{j th - d}, th = 1/alpha
        th = 1.0 / self.alpha
        coef = {1: -th}
        for d in range(1, order):
            nxt = {}
            for j, a in coef.items():
                nxt[j + 1] = nxt.get(j + 1, 0.0) - th * a
                nxt[j] = nxt.get(j, 0.0) + (j * th - d) * a
            coef = nxt
        s = np.asarray(s, dtype=np.float64)
        with np.errstate(divide="ignore"):      # unbounded at s = 0
            total = sum(a * s ** (j * th - order) for j, a in coef.items())
        return np.exp(-s ** th) * total


class ClaytonGenerator(Generator):
    def __init__(self, alpha):
        super().__init__(alpha)
        if self.alpha <= 0:
            raise DomainError("Clayton generator needs alpha > 0")

    def phi(self, t):
        with np.errstate(divide="ignore"):
            return (np.asarray(t, dtype=np.float64) ** -self.alpha - 1.0) / self.alpha

    def dphi(self, t):
        return -np.asarray(t, dtype=np.float64) ** (-self.alpha - 1.0)

    def psi(self, s):
        return (1.0 + self.alpha * np.asarray(s, dtype=np.float64)) ** (-1.0 / self.alpha)

    def psi_deriv(self, s, order):
        a = self.alpha
        scale = np.prod([1.0 + k * a for k in range(order)])
        return (-1.0) ** order * scale * (1.0 + a * np.asarray(s, dtype=np.float64)) ** (-1.0 / a - order)


class FrankGenerator(Generator):
    def __init__(self, alpha):
        super().__init__(alpha)
        if self.alpha == 0:
            raise DomainError("Frank generator needs alpha != 0")

    def phi(self, t):
        a = self.alpha
        with np.errstate(divide="ignore"):
            return -np.log(np.expm1(-a * np.asarray(t, dtype=np.float64)) / np.expm1(-a))

    def dphi(self, t):
        a = self.alpha
        t = np.asarray(t, dtype=np.float64)
        return a * np.exp(-a * t) / np.expm1(-a * t)

    def psi(self, s):
        a = self.alpha
        return -np.log1p(np.exp(-np.asarray(s, dtype=np.float64)) * np.expm1(-a)) / a

    def psi_deriv(self, s, order):
        # psi(s) = (1/a) sum_k q^k / k with q = (1 - e^{-a}) e^{-s}; derivatives are
        # negative-order polylogarithms of q.
        a = self.alpha
        q = -np.expm1(-a) * np.exp(-np.asarray(s, dtype=np.float64))
        if order == 1:
            li = q / (1.0 - q)
        elif order == 2:
            li = q / (1.0 - q) ** 2
        elif order == 3:
            li = q * (1.0 + q) / (1.0 - q) ** 3
        else:
            raise UnsupportedDim("Frank generator derivatives are implemented up to order 3")
        return (-1.0) ** order * li / a


_GENERATORS = {"gumbel": GumbelGenerator, "clayton": ClaytonGenerator, "frank": FrankGenerator}


def generator(family: str, alpha) -> Generator:
    try:
        return _GENERATORS[family](alpha)
    except KeyError:
        raise ValueError(f"{family!r} is not an Archimedean family") from None


def archimedean(family: str, alpha, t, s=None) -> GeneratorValues:
    """Evaluate phi and phi' at ``t`` and psi = phi^{-1} and psi' at ``s``.

    ``s`` defaults to ``phi(t)`` so that ``result.phi_inv`` round-trips to ``t``.
    """
    t = np.asarray(t, dtype=np.float64)
    if np.any((t <= 0) | (t > 1)):
        raise DomainError("generator argument must lie in (0, 1]")
    gen = generator(family, alpha)
    phi = gen.phi(t)
    if s is None:
        s = phi
    s = np.asarray(s, dtype=np.float64)
    if np.any(s < 0):
        raise DomainError("inverse generator argument must be >= 0")
    return GeneratorValues(phi, gen.dphi(t), gen.psi(s), gen.dpsi(s))


# -- log-densities on the tape -------------------------------------------------

def gumbel_log_density(cols, alpha):
    """Gumbel log-density for d = 2 or 3 clamped columns (tape nodes)."""
    d = len(cols)
    if d not in (2, 3):
        raise UnsupportedDim(f"Gumbel density is closed-form for 2 or 3 margins, got {d}")
    xs = [-ad.log(c) for c in cols]
    logx = [ad.log(x) for x in xs]
    s = ad.exp(alpha * logx[0])
    for lx in logx[1:]:
        s = s + ad.exp(alpha * lx)
    log_s = ad.log(s)
    w = ad.exp(log_s / alpha)
    base = -w
    for x, lx in zip(xs, logx):
        base = base + (alpha - 1.0) * lx + x
    if d == 2:
        return base + (2.0 / alpha - 2.0) * log_s + ad.log1p((alpha - 1.0) / w)
    poly = w * w * w + 3.0 * (alpha - 1.0) * w * w + (alpha - 1.0) * (2.0 * alpha - 1.0) * w
    return base - 3.0 * log_s + ad.log(poly)


def clayton_log_density(cols, alpha):
    if len(cols) != 2:
        raise UnsupportedDim("Clayton density is bivariate")
    lu, lv = ad.log(cols[0]), ad.log(cols[1])
    inner = ad.exp(-alpha * lu) + ad.exp(-alpha * lv) - 1.0
    return ad.log1p(alpha) - (1.0 + alpha) * (lu + lv) - (2.0 + 1.0 / alpha) * ad.log(inner)


def frank_log_density(cols, alpha):
    if len(cols) != 2:
        raise UnsupportedDim("Frank density is bivariate")
    u, v = cols
    sign = 1.0 if float(alpha.value) > 0 else -1.0
    one_minus = -ad.expm1(-alpha)                 # 1 - e^{-a}
    denom = one_minus - ad.expm1(-alpha * u) * ad.expm1(-alpha * v)
    return ad.log(alpha * one_minus) - alpha * (u + v) - 2.0 * ad.log(sign * denom)


LOG_DENSITIES = {"gumbel": gumbel_log_density, "clayton": clayton_log_density,
                 "frank": frank_log_density}


# -- numpy CDFs and conditional CDFs ----------------------------------------

def gumbel_cdf(u, alpha):
    u = np.asarray(u, dtype=np.float64)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        x = -np.log(u)
        s = np.sum(x ** alpha, axis=-1)
        out = np.exp(-s ** (1.0 / alpha))
    out = np.where(np.any(u <= 0, axis=-1), 0.0, out)
    return np.clip(out, 0.0, 1.0)


def clayton_cdf(u, alpha):
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-1] != 2:
        raise UnsupportedDim("Clayton CDF is bivariate")
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        inner = np.sum(u ** -alpha, axis=-1) - 1.0
        out = inner ** (-1.0 / alpha)
    out = np.where(np.any(u <= 0, axis=-1), 0.0, out)
    return np.clip(out, 0.0, 1.0)


def frank_cdf(u, alpha):
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-1] != 2:
        raise UnsupportedDim("Frank CDF is bivariate")
    a = alpha
    ratio = np.expm1(-a * u[..., 0]) * np.expm1(-a * u[..., 1]) / np.expm1(-a)
    return np.clip(-np.log1p(ratio) / a, 0.0, 1.0)


CDFS = {"gumbel": gumbel_cdf, "clayton": clayton_cdf, "frank": frank_cdf}


def h_function(family, alpha, u, v):
    """Conditional CDF P(V <= v | U = u) = dC/du."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if family == "gumbel":
        x, y = -np.log(u), -np.log(v)
        s = x ** alpha + y ** alpha
        c = np.exp(-s ** (1.0 / alpha))
        return c * s ** (1.0 / alpha - 1.0) * x ** (alpha - 1.0) / u
    if family == "clayton":
        inner = u ** -alpha + v ** -alpha - 1.0
        return u ** (-alpha - 1.0) * inner ** (-1.0 / alpha - 1.0)
    if family == "frank":
        a = alpha
        num = np.exp(-a * u) * np.expm1(-a * v)
        return num / (np.expm1(-a) + np.expm1(-a * u) * np.expm1(-a * v))
    raise ValueError(f"no conditional CDF for {family!r}")


def sample_bivariate(family, alpha, n, rng, tol=1e-10):
    """Conditional-distribution sampling with bisection inversion of the h-function."""
    u = np.clip(rng.random(n), 1e-12, 1.0 - 1e-12)
    w = rng.random(n)
    lo = np.zeros(n)
    hi = np.ones(n)
    iters = int(np.ceil(np.log2(1.0 / tol))) + 1
    with np.errstate(all="ignore"):
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            below = h_function(family, alpha, u, mid) < w
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
    return np.column_stack([u, 0.5 * (lo + hi)])


# -- concordance ---------------------------------------------------------------

def _debye1(alpha):
    def integrand(t):
        return 1.0 if t == 0 else t / np.expm1(t)
    val, _ = integrate.quad(integrand, 0.0, alpha, epsabs=1e-14, epsrel=1e-13)
    return val / alpha


def kendall_tau(family, alpha):
    if family == "gumbel":
        return (alpha - 1.0) / alpha
    if family == "clayton":
        return alpha / (alpha + 2.0)
    if family == "frank":
        return 1.0 - 4.0 / alpha * (1.0 - _debye1(alpha))
    raise ValueError(f"{family!r} is not an Archimedean family")
