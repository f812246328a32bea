"""Gaussian and Student-t copulas.

Correlation matrices are parameterized by canonical partial correlations:
each unconstrained entry goes through ``tanh`` and the rows of a lower
Cholesky factor are filled so that every row has unit norm.  Any real
vector therefore maps to a positive definite correlation matrix.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import integrate, special, stats

from .. import autodiff as ad
from ..errors import NotPositiveDefinite, UnsupportedDim
from ..stats import std_normal_quantile

_CPC_LIMIT = 1.0 - 1e-9


def tril_pairs(dim):
    """Row-major (i, j) pairs of the strict lower triangle."""
    return [(i, j) for i in range(1, dim) for j in range(i)]


def cholesky_from_cpc(raw, dim):
    """Lower Cholesky factor (list of rows of scalar nodes) of a correlation matrix.

    ``raw`` is a node with at least ``dim*(dim-1)/2`` entries; only the first
    ones are used.
    """
    tape = raw.tape
    one = tape.constant(1.0)
    zero = tape.constant(0.0)
    rows = [[one] + [zero] * (dim - 1)]
    k = 0
    for i in range(1, dim):
        row = []
        remaining = one                      # 1 - sum of squares so far
        for j in range(i):
            z = ad.clamp(ad.tanh(raw[k]), -_CPC_LIMIT, _CPC_LIMIT)
            k += 1
            entry = z if j == 0 else z * remaining ** 0.5
            row.append(entry)
            remaining = remaining - entry * entry
        row.append(remaining ** 0.5)
        row.extend([zero] * (dim - i - 1))
        rows.append(row)
    return rows


def cpc_from_corr(corr):
    """Inverse of :func:`cholesky_from_cpc`: unconstrained entries for ``corr``."""
    corr = np.asarray(corr, dtype=np.float64)
    dim = corr.shape[0]
    if corr.shape != (dim, dim) or not np.allclose(corr, corr.T):
        raise NotPositiveDefinite("correlation matrix must be square and symmetric")
    if not np.allclose(np.diag(corr), 1.0):
        raise NotPositiveDefinite("correlation matrix must have unit diagonal")
    try:
        chol = np.linalg.cholesky(corr)
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite("correlation matrix is not positive definite") from None
    raw = []
    for i, j in tril_pairs(dim):
        remaining = 1.0 - np.sum(chol[i, :j] ** 2)
        raw.append(np.arctanh(chol[i, j] / math.sqrt(remaining)))
    return np.array(raw)


def gaussian_log_density(cols, rows):
    """Gaussian copula log-density from columns ``cols`` and Cholesky rows ``rows``.

    With ``zeta = Phi^{-1}(u)`` and ``w = L^{-1} zeta``,
    ``log c = -sum log L_ii - |w|^2 / 2 + |zeta|^2 / 2``.
    """
    dim = len(cols)
    zeta = [std_normal_quantile(c) for c in cols]
    w = []
    out = 0.0
    for i in range(dim):
        acc = zeta[i]
        for j in range(i):
            acc = acc - rows[i][j] * w[j]
        w.append(acc / rows[i][i])
        out = out - ad.log(rows[i][i]) - 0.5 * w[i] * w[i] + 0.5 * zeta[i] * zeta[i]
    return out


def gaussian_copula_log_density_m(chol, u):
    """Gaussian copula log-density for any M given a lower Cholesky factor.

    Parameters
    ----------
    chol : (M, M) array
        Lower-triangular factor whose product ``chol @ chol.T`` has unit diagonal.
    u : (..., M) array
        Points in the open unit cube.

    Returns
    -------
    ndarray
        ``-0.5 log|R| - 0.5 zeta^T (R^{-1} - I) zeta`` with ``zeta = Phi^{-1}(u)``.
    """
    chol = np.asarray(chol, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    dim = chol.shape[0]
    if chol.shape != (dim, dim) or dim < 2:
        raise UnsupportedDim(f"factor must be square with M >= 2, got {chol.shape}")
    if u.shape[-1] != dim:
        raise UnsupportedDim(f"u has {u.shape[-1]} margins, factor has {dim}")
    diag = np.diag(chol)
    if np.any(~np.isfinite(chol)) or np.any(diag <= 0) or np.any(np.triu(chol, 1) != 0):
        raise NotPositiveDefinite("factor must be lower triangular with positive diagonal")
    if not np.allclose(np.sum(chol * chol, axis=1), 1.0, atol=1e-8):
        raise NotPositiveDefinite("factor does not produce a unit-diagonal matrix")
    zeta = special.ndtri(u)
    flat = zeta.reshape(-1, dim)
    w = np.linalg.solve(chol, flat.T).T
    out = -np.sum(np.log(diag)) - 0.5 * np.sum(w * w, axis=-1) + 0.5 * np.sum(flat * flat, axis=-1)
    return out.reshape(zeta.shape[:-1])


def student_log_density(cols, rho, nu):
    """Bivariate Student-t copula log-density on the tape."""
    if len(cols) != 2:
        raise UnsupportedDim("Student-t copula is bivariate")
    x = ad.t_quantile(cols[0], nu)
    y = ad.t_quantile(cols[1], nu)
    one_m = 1.0 - rho * rho
    quad = (x * x + y * y - 2.0 * rho * x * y) / (nu * one_m)
    norm = (ad.lgamma((nu + 2.0) * 0.5) + ad.lgamma(nu * 0.5)
            - 2.0 * ad.lgamma((nu + 1.0) * 0.5) - 0.5 * ad.log(one_m))
    return (norm - (nu + 2.0) * 0.5 * ad.log1p(quad)
            + (nu + 1.0) * 0.5 * (ad.log1p(x * x / nu) + ad.log1p(y * y / nu)))


# -- CDFs ----------------------------------------------------------------------

def _owens_bvn(h, k, rho):
    """P(X <= h, Y <= k) for a standard bivariate normal, via Owen's T."""
    if rho >= 1.0:
        return special.ndtr(np.minimum(h, k))
    if rho <= -1.0:
        return np.maximum(special.ndtr(h) - special.ndtr(-k), 0.0)
    s = math.sqrt(1.0 - rho * rho)
    both_zero = (h == 0) & (k == 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        a_h = np.where(h != 0, (k - rho * h) / (np.where(h != 0, h, 1.0) * s), 0.0)
        a_k = np.where(k != 0, (h - rho * k) / (np.where(k != 0, k, 1.0) * s), 0.0)
    # T(0, a) = atan(a) / (2 pi); the h -> 0 limit of T(h, (k - rho h)/(h s)) is
    # sign(k) / 4 (times the sign of h, absorbed by the beta correction below).
    t_h = np.where(h != 0, special.owens_t(h, a_h), np.sign(k) * 0.25)
    t_k = np.where(k != 0, special.owens_t(k, a_k), np.sign(h) * 0.25)
    hk = h * k
    beta = np.where((hk > 0) | ((hk == 0) & (h + k >= 0)), 0.0, 0.5)
    out = 0.5 * special.ndtr(h) + 0.5 * special.ndtr(k) - t_h - t_k - beta
    out = np.where(both_zero, 0.25 + math.asin(rho) / (2.0 * math.pi), out)
    return np.clip(out, 0.0, 1.0)


def gaussian_cdf(u, corr):
    u = np.asarray(u, dtype=np.float64)
    corr = np.asarray(corr, dtype=np.float64)
    dim = corr.shape[0]
    zeta = special.ndtri(u)
    if dim == 2:
        return _owens_bvn(zeta[..., 0], zeta[..., 1], float(corr[1, 0]))
    flat = zeta.reshape(-1, dim)
    lower = np.any(u <= 0, axis=-1).reshape(-1)
    mvn = stats.multivariate_normal(mean=np.zeros(dim), cov=corr)
    vals = np.array([0.0 if lo else float(mvn.cdf(np.minimum(z, 40.0))) for z, lo in zip(flat, lower)])
    return np.clip(vals, 0.0, 1.0).reshape(zeta.shape[:-1])


def student_cdf(u, rho, nu):
    """Bivariate Student-t copula CDF by one-dimensional integration.

    Conditional on X = s, Y is a scaled t variate with nu + 1 degrees of
    freedom, so ``C(u, v) = int_{-inf}^{x} f_nu(s) T_{nu+1}(...) ds`` with
    ``x = T_nu^{-1}(u)``.  The half-line is mapped to a finite interval by
    ``s = x - t / (1 - t)``.
    """
    u = np.asarray(u, dtype=np.float64)
    shape = u.shape[:-1]
    uu = u[..., 0].reshape(-1)
    vv = u[..., 1].reshape(-1)
    x = special.stdtrit(nu, np.clip(uu, 1e-300, 1.0))
    y = special.stdtrit(nu, np.clip(vv, 1e-300, 1.0))
    x = np.where(uu >= 1.0, np.inf, x)
    y = np.where(vv >= 1.0, np.inf, y)
    finite_x = np.where(np.isfinite(x), x, 0.0)
    scale = 1.0 / (1.0 - rho * rho)

    def integrand(t):
        if t >= 1.0:
            return np.zeros_like(finite_x)
        s = finite_x - t / (1.0 - t)
        jac = 1.0 / (1.0 - t) ** 2
        cond = (y - rho * s) * np.sqrt((nu + 1.0) * scale / (nu + s * s))
        return stats.t.pdf(s, nu) * special.stdtr(nu + 1.0, cond) * jac

    vals, _ = integrate.quad_vec(integrand, 0.0, 1.0, epsabs=1e-12, epsrel=1e-10, norm="max")
    # Infinite x: the first margin is 1 and C reduces to v.
    vals = np.where(np.isinf(x), vv, vals)
    vals = np.where((uu <= 0) | (vv <= 0), 0.0, vals)
    vals = np.where(vv >= 1.0, uu, vals)
    return np.clip(vals, 0.0, 1.0).reshape(shape)


def sample_gaussian(chol, n, rng):
    z = rng.standard_normal((n, chol.shape[0])) @ np.asarray(chol).T
    return special.ndtr(z)


def sample_student(chol, nu, n, rng):
    z = rng.standard_normal((n, chol.shape[0])) @ np.asarray(chol).T
    g = np.sqrt(rng.chisquare(nu, size=(n, 1)) / nu)
    return special.stdtr(nu, z / g)


def kendall_tau(rho):
    return 2.0 / math.pi * math.asin(rho)
