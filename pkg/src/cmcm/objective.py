"""Training objective: task loss plus a copula (or baseline) alignment term."""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape
from .copula import CopulaModel, log_density_on_tape
from .errors import DimMismatch, LengthMismatch, ZeroVector
from .gmm import gmm_cdf, gmm_log_density
from .model import other_context
from .stats import DiagGaussian, mvn_kl

ALIGNMENTS = ("copula", "cosine", "kl", "none")
VARIANTS = ("printed", "joint_nll")
VAR_FLOOR = 1e-6


@dataclass
class ObjectiveConfig:
    """``lambda_cop`` weights the alignment term.

    ``variant='printed'`` subtracts the marginal log-densities inside the
    copula term; ``'joint_nll'`` adds them (the Sklar joint log-likelihood).
    """

    lambda_cop: float = 1e-5
    alignment: str = "copula"
    family: str = "gumbel"
    variant: str = "printed"

    def __post_init__(self):
        if self.lambda_cop < 0:
            raise ValueError("lambda_cop must be non-negative")
        if self.alignment not in ALIGNMENTS:
            raise ValueError(f"alignment must be one of {ALIGNMENTS}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")


def _tape(*xs):
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    return Tape()


def bce_loss(y_hat, y):
    """Mean binary cross-entropy in nats; ``y_hat`` is clamped to [1e-12, 1 - 1e-12]."""
    y = np.asarray(y, dtype=np.float64)
    keep = isinstance(y_hat, Node)
    tape = _tape(y_hat)
    p = tape.lift(y_hat)
    if p.shape != y.shape:
        raise LengthMismatch(f"{p.shape[0] if p.ndim else 1} predictions for {y.size} labels")
    p = ad.clamp(p, 1e-12, 1.0 - 1e-12)
    loss = -(y * ad.log(p) + (1.0 - y) * ad.log(1.0 - p)).mean()
    return loss if keep else float(loss.value)


def _columns_to_matrix(cols):
    n = cols[0].shape[0]
    return ad.concat([c.reshape(n, 1) for c in cols], axis=1)


def copula_alignment_term(z, gmms, copula: CopulaModel, raw=None, variant="printed"):
    """Sum over rows of ``log c(F_1(z_1), ..., F_M(z_M)) -/+ sum_m log f_m(z_m)``.

    Parameters
    ----------
    z : list of (n, d) arrays or nodes, one per modality
    gmms : mapping modality index -> GmmMarginal (every modality needed)
    copula : CopulaModel
    raw : node, optional
        Raw copula parameters on the tape; defaults to ``copula.raw_params``.
    variant : {'printed', 'joint_nll'}
        Sign applied to the marginal log-densities (minus or plus).
    """
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    if len(z) != copula.dim:
        raise DimMismatch(f"{len(z)} modalities for a {copula.dim}-margin copula")
    gm = [gmms[m] for m in range(len(z))]
    params = [raw] + list(z) + [v for g in gm for v in g.params().values()]
    keep = any(isinstance(x, Node) for x in params)
    tape = _tape(*params)
    zn = [tape.lift(x) for x in z]
    raw_n = tape.lift(copula.raw_params if raw is None else raw)
    gm = [g.on_tape(tape) for g in gm]
    ones = [np.ones((zn[0].shape[0], 1))] * len(zn)
    ctx = [other_context(zn, ones, m) if g.mlp is not None else None for m, g in enumerate(gm)]
    u = _columns_to_matrix([gmm_cdf(x, g, context=c) for x, g, c in zip(zn, gm, ctx)])
    log_c = log_density_on_tape(copula.family, copula.dim, raw_n, u)
    log_f = sum(gmm_log_density(x, g, context=c) for x, g, c in zip(zn, gm, ctx))
    sign = -1.0 if variant == "printed" else 1.0
    out = (log_c + sign * log_f).sum()
    return out if keep else float(out.value)


def _cosine(a, b):
    na = (a * a).sum(axis=-1)
    nb = (b * b).sum(axis=-1)
    if np.any(na.value == 0) or np.any(nb.value == 0):
        raise ZeroVector("cosine similarity is undefined for a zero embedding")
    return (a * b).sum(axis=-1) / (na * nb) ** 0.5


def _batch_gaussian(x):
    mean = x.mean(axis=0)
    centered = x - mean
    var = ad.clamp((centered * centered).mean(axis=0), VAR_FLOOR, np.inf)
    return DiagGaussian(mean, 0.5 * ad.log(var))


def baseline_alignment_loss(kind, z, gmms=None):
    """Cosine or symmetrized-KL alignment between modality embeddings.

    ``cosine``: mean over rows of ``1 - cos(z_a, z_b)``.  ``kl``: KL in both
    directions between diagonal Gaussians fitted to each modality's batch
    (variances floored at 1e-6).  With more than two modalities the loss is
    averaged over pairs.
    """
    if kind not in ("cosine", "kl"):
        raise ValueError("kind must be 'cosine' or 'kl'")
    if len(z) < 2:
        raise DimMismatch("alignment needs at least two modalities")
    keep = any(isinstance(x, Node) for x in z)
    tape = _tape(*z)
    zn = [tape.lift(x) for x in z]
    total = None
    pairs = list(combinations(range(len(zn)), 2))
    for a, b in pairs:
        if kind == "cosine":
            term = (1.0 - _cosine(zn[a], zn[b])).mean()
        else:
            ga, gb = _batch_gaussian(zn[a]), _batch_gaussian(zn[b])
            term = mvn_kl(ga, gb) + mvn_kl(gb, ga)
        total = term if total is None else total + term
    out = total * (1.0 / len(pairs))
    return out if keep else float(out.value)


def elbo(y_hat, y, z, gmms, copula: CopulaModel, config: ObjectiveConfig, raw=None):
    """``-lambda_cop * copula_alignment_term + bce_loss``, the quantity minimized."""
    task = bce_loss(y_hat, y)
    if config.lambda_cop == 0:
        return task
    term = copula_alignment_term(z, gmms, copula, raw, config.variant)
    return task - config.lambda_cop * term


def total_loss(y_hat, y, z, gmms, copula, config: ObjectiveConfig, raw=None):
    """Loss for any alignment kind; cosine and KL are weighted by ``lambda_cop``."""
    if config.alignment == "copula":
        return elbo(y_hat, y, z, gmms, copula, config, raw)
    task = bce_loss(y_hat, y)
    if config.alignment == "none" or config.lambda_cop == 0:
        return task
    return task + config.lambda_cop * baseline_alignment_loss(config.alignment, z, gmms)
