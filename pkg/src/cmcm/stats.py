"""Standard-normal and diagonal-Gaussian primitives.

Every function accepts either plain arrays or tape :class:`~cmcm.autodiff.Node`
objects; with nodes the result is recorded on the tape and is differentiable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy import special

from . import autodiff as ad
from .autodiff import Node
from .errors import DimMismatch, DomainError

LOG_2PI = math.log(2.0 * math.pi)
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _exp(x):
    return ad.exp(x) if isinstance(x, Node) else np.exp(x)


def _log(x):
    return ad.log(x) if isinstance(x, Node) else np.log(x)


def _sum(x, axis=-1):
    return x.sum(axis=axis) if isinstance(x, Node) else np.sum(x, axis=axis)


@dataclass
class DiagGaussian:
    """Gaussian with diagonal covariance, stored as mean and log standard deviation."""

    mean: Any
    log_std: Any

    def __post_init__(self):
        if not isinstance(self.mean, Node):
            self.mean = np.asarray(self.mean, dtype=np.float64)
        if not isinstance(self.log_std, Node):
            self.log_std = np.asarray(self.log_std, dtype=np.float64)
        if self.mean.shape[-1:] != self.log_std.shape[-1:]:
            raise DimMismatch(f"mean {self.mean.shape} vs log_std {self.log_std.shape}")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]


def std_normal_cdf(x):
    """Phi(x).  Node inputs go through the tape's erf op."""
    if isinstance(x, Node):
        return 0.5 * (1.0 + ad.erf(x * (1.0 / _SQRT2)))
    return special.ndtr(np.asarray(x, dtype=np.float64))


def std_normal_pdf(x):
    if isinstance(x, Node):
        return _INV_SQRT_2PI * ad.exp(-0.5 * x * x)
    x = np.asarray(x, dtype=np.float64)
    return _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def std_normal_quantile(p):
    """Phi^{-1}(p) for p in (0, 1).

    On the tape the value comes from a Newton step taken from a constant
    starting point, so the recorded derivative is ``1 / phi(x)``.
    """
    pv = p.value if isinstance(p, Node) else np.asarray(p, dtype=np.float64)
    if np.any(~np.isfinite(pv)) or np.any((pv <= 0.0) | (pv >= 1.0)):
        raise DomainError("std_normal_quantile: p must lie strictly inside (0, 1)")
    x0 = special.ndtri(pv)
    if not isinstance(p, Node):
        return x0
    inv_pdf = 1.0 / (_INV_SQRT_2PI * np.exp(-0.5 * x0 * x0))
    return (x0 - special.ndtr(x0) * inv_pdf) + p * inv_pdf


def mvn_log_density(z, g: DiagGaussian):
    """Log-density of a diagonal Gaussian, summed over the last axis."""
    if z.shape[-1] != g.dim:
        raise DimMismatch(f"z has dim {z.shape[-1]}, gaussian has dim {g.dim}")
    scaled = (z - g.mean) * _exp(-g.log_std)
    return -0.5 * _sum(scaled * scaled + 2.0 * g.log_std + LOG_2PI)


def mvn_kl(g1: DiagGaussian, g2: DiagGaussian):
    """KL(g1 || g2) in nats for diagonal Gaussians."""
    if g1.dim != g2.dim:
        raise DimMismatch(f"dims {g1.dim} and {g2.dim} differ")
    diff = (g2.mean - g1.mean) * _exp(-g2.log_std)
    log_ratio = g2.log_std - g1.log_std
    terms = 2.0 * log_ratio - 1.0 + _exp(-2.0 * log_ratio) + diff * diff
    return 0.5 * _sum(terms)
