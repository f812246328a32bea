"""Family dispatch: parameter constraints, CDF, log-density and its gradients."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .. import autodiff as ad
from ..autodiff import Node, Tape
from ..errors import ArityMismatch, BoundaryError, DomainError, UnsupportedDim
from . import _archimedean as arch
from . import _elliptical as ell

EPS = 1e-6
FAMILIES = ("clayton", "frank", "gumbel", "gaussian", "studentt", "independence")
ARCHIMEDEAN = ("clayton", "frank", "gumbel")
_ALIASES = {"student": "studentt", "student-t": "studentt", "t": "studentt",
            "indep": "independence", "none": "independence"}

CLAYTON_FLOOR = 1e-4
FRANK_FLOOR = 1e-3


def normalize_family(name: str) -> str:
    key = str(name).strip().lower().replace("_", "")
    key = _ALIASES.get(key, key)
    if key not in FAMILIES:
        raise ValueError(f"unknown copula family {name!r}; choose from {', '.join(FAMILIES)}")
    return key


def param_count(family: str, dim: int) -> int:
    family = normalize_family(family)
    if family in ARCHIMEDEAN:
        return 1
    pairs = dim * (dim - 1) // 2
    if family == "gaussian":
        return pairs
    if family == "studentt":
        return pairs + 1
    return 0


def _check_dim(family, dim):
    if dim < 2:
        raise UnsupportedDim(f"copulas need at least 2 margins, got {dim}")
    if family in ("clayton", "frank", "studentt") and dim != 2:
        raise UnsupportedDim(f"{family} copula is bivariate, got {dim} margins")
    if family == "gumbel" and dim > 3:
        raise UnsupportedDim("Gumbel copula is supported for 2 or 3 margins")


@dataclass
class CopulaModel:
    """A copula family with unconstrained parameters.

    ``raw_params`` has one entry for Archimedean families, ``M(M-1)/2`` for the
    Gaussian (row-major strict lower triangle) and one more (the degrees of
    freedom) for Student-t.  The independence copula has none.
    """

    family: str
    raw_params: np.ndarray = field(default_factory=lambda: np.zeros(0))
    dim: int = 2

    def __post_init__(self):
        self.family = normalize_family(self.family)
        self.dim = int(self.dim)
        if self.dim < 2:
            raise UnsupportedDim(f"copulas need at least 2 margins, got {self.dim}")
        self.raw_params = np.atleast_1d(np.asarray(self.raw_params, dtype=np.float64)).copy()
        want = param_count(self.family, self.dim)
        if self.raw_params.size != want:
            raise ArityMismatch(
                f"{self.family} with {self.dim} margins takes {want} raw parameters, "
                f"got {self.raw_params.size}")

    @classmethod
    def default(cls, family, dim=2):
        """Parameters at raw zero, except Frank which starts at alpha = 1."""
        family = normalize_family(family)
        raw = np.zeros(param_count(family, dim))
        if family == "frank":
            raw[0] = 1.0
        return cls(family, raw, dim)

    @classmethod
    def from_params(cls, family, dim=2, alpha=None, corr=None, rho=None, nu=None):
        """Build a model from constrained parameters (inverse of the constraints)."""
        family = normalize_family(family)
        if family == "independence":
            return cls(family, np.zeros(0), dim)
        if family in ARCHIMEDEAN:
            if alpha is None:
                raise ArityMismatch(f"{family} needs alpha")
            return cls(family, [_unconstrain_alpha(family, float(alpha))], dim)
        if corr is None:
            if rho is None:
                raise ArityMismatch(f"{family} needs corr or rho")
            if dim != 2:
                raise ArityMismatch("rho alone only defines a bivariate correlation")
            corr = np.array([[1.0, rho], [rho, 1.0]])
        corr = np.asarray(corr, dtype=np.float64)
        raw = list(ell.cpc_from_corr(corr))
        if family == "studentt":
            if nu is None:
                raise ArityMismatch("studentt needs nu")
            if nu <= 2:
                raise DomainError("nu must exceed 2")
            raw.append(_softplus_inv(nu - 2.0))
        return cls(family, raw, corr.shape[0])

    @property
    def params(self):
        return constrain_params(self)


def _softplus_inv(y):
    # the tiny floor keeps the boundary (e.g. Gumbel alpha = 1) at a finite raw value
    y = max(y, 1e-300)
    return y + math.log(-math.expm1(-y))


def _unconstrain_alpha(family, alpha):
    if family == "gumbel":
        if alpha < 1:
            raise DomainError("Gumbel alpha must be >= 1")
        return _softplus_inv(alpha - 1.0)
    if family == "clayton":
        if alpha < CLAYTON_FLOOR:
            raise DomainError(f"Clayton alpha must be at least {CLAYTON_FLOOR}")
        return _softplus_inv(alpha - CLAYTON_FLOOR)
    if alpha == 0:
        raise DomainError("Frank alpha must be nonzero")
    return alpha


@dataclass
class CopulaParams:
    """Constrained parameters.  Entries are floats/arrays or tape nodes."""

    family: str
    dim: int
    alpha: object = None
    chol: Optional[list] = None     # rows of the lower Cholesky factor
    nu: object = None

    @property
    def corr(self):
        if self.chol is None:
            return None
        L = _rows_value(self.chol)
        return L @ L.T

    @property
    def rho(self):
        corr = self.corr
        return None if corr is None else float(corr[1, 0])


def _rows_value(rows):
    return np.array([[float(e.value) if isinstance(e, Node) else float(e) for e in r] for r in rows])


def constrain_on_tape(family, dim, raw: Node) -> CopulaParams:
    """Map a raw-parameter node to constrained parameter nodes."""
    if family == "independence":
        return CopulaParams(family, dim)
    if family == "gumbel":
        return CopulaParams(family, dim, alpha=1.0 + ad.softplus(raw[0]))
    if family == "clayton":
        return CopulaParams(family, dim, alpha=ad.softplus(raw[0]) + CLAYTON_FLOOR)
    if family == "frank":
        sign = 1.0 if float(raw.value[0]) >= 0 else -1.0
        return CopulaParams(family, dim, alpha=sign * ad.clamp(sign * raw[0], FRANK_FLOOR, math.inf))
    rows = ell.cholesky_from_cpc(raw, dim)
    if family == "gaussian":
        return CopulaParams(family, dim, chol=rows)
    npairs = dim * (dim - 1) // 2
    return CopulaParams(family, dim, chol=rows, nu=2.0 + ad.softplus(raw[npairs]))


def constrain_params(model: CopulaModel) -> CopulaParams:
    """Constrained parameters as plain floats (alpha, nu) and arrays (corr)."""
    tape = Tape()
    p = constrain_on_tape(model.family, model.dim, tape.constant(model.raw_params))
    alpha = None if p.alpha is None else float(p.alpha.value)
    nu = None if p.nu is None else float(p.nu.value)
    chol = None if p.chol is None else _rows_value(p.chol)
    return CopulaParams(model.family, model.dim, alpha=alpha, chol=chol, nu=nu)


def _as_points(u, dim):
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-1] != dim:
        raise UnsupportedDim(f"points have {u.shape[-1]} coordinates, model has {dim} margins")
    return u


def log_density_on_tape(family, dim, raw: Node, u: Node) -> Node:
    """Per-row copula log-density of ``u`` (shape (n, M)) as a tape node.

    Coordinates are clamped to ``[EPS, 1 - EPS]`` first.
    """
    _check_dim(family, dim)
    if u.shape[-1] != dim:
        raise UnsupportedDim(f"points have {u.shape[-1]} coordinates, model has {dim} margins")
    if family == "independence":
        return u.tape.constant(np.zeros(u.shape[:-1]))
    p = constrain_on_tape(family, dim, raw)
    uc = ad.clamp(u, EPS, 1.0 - EPS)
    cols = [uc[..., m] for m in range(dim)]
    try:
        if family in ARCHIMEDEAN:
            return arch.LOG_DENSITIES[family](cols, p.alpha)
        if family == "gaussian":
            return ell.gaussian_log_density(cols, p.chol)
        return ell.student_log_density(cols, p.chol[1][0], p.nu)
    except DomainError as exc:
        if isinstance(exc, BoundaryError):
            raise
        raise BoundaryError(f"{family} log-density is not finite: {exc}") from exc


def copula_log_density(model: CopulaModel, u):
    """Log copula density at ``u`` (shape (M,) or (n, M))."""
    u = _as_points(u, model.dim)
    tape = Tape()
    flat = u.reshape(-1, model.dim)
    out = log_density_on_tape(model.family, model.dim, tape.constant(model.raw_params),
                              tape.constant(flat))
    return np.asarray(out.value).reshape(u.shape[:-1])


def copula_log_density_grad(model: CopulaModel, u):
    """Gradients of the summed log-density w.r.t. raw parameters and ``u``.

    Returns ``(grad_raw, grad_u)`` with ``grad_u`` the same shape as ``u``.
    """
    u = _as_points(u, model.dim)
    tape = Tape()
    raw = tape.variable(model.raw_params)
    un = tape.variable(u.reshape(-1, model.dim))
    out = log_density_on_tape(model.family, model.dim, raw, un).sum()
    g_raw, g_u = tape.grad(out, [raw, un])
    return g_raw, g_u.reshape(u.shape)


def copula_cdf(model: CopulaModel, u):
    """Copula distribution function at ``u`` (shape (M,) or (n, M))."""
    u = _as_points(u, model.dim)
    _check_dim(model.family, model.dim)
    u = np.clip(u, 0.0, 1.0)
    if model.family == "independence":
        return np.prod(u, axis=-1)
    p = constrain_params(model)
    if model.family in ARCHIMEDEAN:
        return arch.CDFS[model.family](u, p.alpha)
    if model.family == "gaussian":
        return ell.gaussian_cdf(u, p.corr)
    return ell.student_cdf(u, p.rho, p.nu)


def dependence_measure(model: CopulaModel) -> float:
    """Kendall's tau of a bivariate copula."""
    if model.dim != 2:
        raise UnsupportedDim("dependence_measure needs a bivariate model")
    if model.family == "independence":
        return 0.0
    p = constrain_params(model)
    if model.family in ARCHIMEDEAN:
        return float(arch.kendall_tau(model.family, p.alpha))
    return ell.kendall_tau(p.rho)


def pairwise_dependence(model: CopulaModel) -> float:
    """Mean Kendall's tau over all pairs of margins (equals tau when M = 2)."""
    if model.family == "independence":
        return 0.0
    p = constrain_params(model)
    if model.family in ARCHIMEDEAN:
        return float(arch.kendall_tau(model.family, p.alpha))
    corr = p.corr
    return float(np.mean([ell.kendall_tau(corr[i, j]) for i, j in ell.tril_pairs(model.dim)]))


def sample_copula(model: CopulaModel, n: int, seed=None):
    """Draw ``n`` points from the copula, shape (n, M)."""
    n = int(n)
    if n < 0:
        raise ValueError("n must be non-negative")
    _check_dim(model.family, model.dim)
    rng = np.random.default_rng(seed)
    if model.family == "independence":
        return rng.random((n, model.dim))
    p = constrain_params(model)
    if model.family in ARCHIMEDEAN:
        if model.dim != 2:
            raise UnsupportedDim("Archimedean sampling is bivariate")
        return arch.sample_bivariate(model.family, p.alpha, n, rng)
    if model.family == "gaussian":
        return ell.sample_gaussian(p.chol, n, rng)
    return ell.sample_student(p.chol, p.nu, n, rng)


GRID_LO, GRID_HI, GRID_N = 0.005, 0.995, 101


def density_grid(model: CopulaModel):
    """Copula density on the 101 x 101 export grid; returns (u, v, density) columns."""
    if model.dim != 2:
        raise UnsupportedDim("density grid export is bivariate")
    axis = np.linspace(GRID_LO, GRID_HI, GRID_N)
    uu, vv = np.meshgrid(axis, axis, indexing="ij")
    pts = np.column_stack([uu.ravel(), vv.ravel()])
    dens = np.exp(copula_log_density(model, pts))
    return pts[:, 0], pts[:, 1], dens


def write_density_grid(model: CopulaModel, stream):
    """Write the density grid as ``u,v,density`` text with 9 significant digits."""
    u, v, d = density_grid(model)
    stream.write("u,v,density\n")
    for a, b, c in zip(u, v, d):
        stream.write(f"{a:.9g},{b:.9g},{c:.9g}\n")


def trivariate_gumbel_log_density(alpha, u, v, w):
    """Closed-form trivariate Gumbel log-density with ``alpha >= 1``."""
    if alpha < 1:
        raise DomainError("Gumbel alpha must be >= 1")
    pts = np.stack(np.broadcast_arrays(np.asarray(u, float), np.asarray(v, float),
                                       np.asarray(w, float)), axis=-1)
    if np.any((pts < EPS) | (pts > 1.0 - EPS)):
        raise BoundaryError(f"coordinates must lie in [{EPS}, {1 - EPS}]")
    tape = Tape()
    flat = pts.reshape(-1, 3)
    cols = [tape.constant(flat[:, i]) for i in range(3)]
    try:
        out = arch.gumbel_log_density(cols, tape.constant(float(alpha)))
    except DomainError as exc:
        raise BoundaryError(str(exc)) from exc
    return np.asarray(out.value).reshape(pts.shape[:-1])
