"""Per-modality Gaussian mixture marginals with diagonal covariances.

A :class:`GmmMarginal` holds either numpy arrays or tape nodes in its
parameter fields, so the same functions serve evaluation and training.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Optional

import numpy as np
from scipy import special

from . import autodiff as ad
from .autodiff import Node, Tape
from .errors import DimMismatch, DomainError
from .optim import AdamState, adam_step
from .stats import LOG_2PI

WEIGHT_SOURCES = ("logits", "mlp")


@dataclass
class GmmMarginal:
    """K-component diagonal Gaussian mixture over D-dimensional embeddings.

    Attributes
    ----------
    means, log_stds : (K, D)
    logits : (K,)
        Global mixture logits; used when ``mlp`` is None.
    mlp : tuple or None
        ``(W1, b1, W2, b2)`` of a one-hidden-layer tanh network mapping an
        embedding to K logits.
    """

    means: Any
    log_stds: Any
    logits: Any = None
    mlp: Optional[tuple] = None

    def __post_init__(self):
        if not isinstance(self.means, Node):
            self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        if not isinstance(self.log_stds, Node):
            self.log_stds = np.atleast_2d(np.asarray(self.log_stds, dtype=np.float64))
        if self.means.shape != self.log_stds.shape:
            raise DimMismatch(f"means {self.means.shape} vs log_stds {self.log_stds.shape}")
        if self.logits is None and self.mlp is None:
            self.logits = np.zeros(self.means.shape[0])
        if self.logits is not None and not isinstance(self.logits, Node):
            self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits is not None and self.logits.shape != (self.K,):
            raise DimMismatch(f"logits shape {self.logits.shape}, expected ({self.K},)")

    @property
    def K(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def weight_source(self) -> str:
        return "mlp" if self.mlp is not None else "logits"

    @classmethod
    def init(cls, K, dim, rng, weight_source="logits", hidden=16):
        """Means ~ 0.1 N(0, I), unit scales, uniform weights."""
        if weight_source not in WEIGHT_SOURCES:
            raise ValueError(f"weight_source must be one of {WEIGHT_SOURCES}")
        means = 0.1 * rng.standard_normal((K, dim))
        log_stds = np.zeros((K, dim))
        if weight_source == "logits":
            return cls(means, log_stds, np.zeros(K))
        bound = 1.0 / np.sqrt(dim)
        mlp = (rng.uniform(-bound, bound, (dim, hidden)), np.zeros(hidden),
               np.zeros((hidden, K)), np.zeros(K))
        return cls(means, log_stds, None, mlp)

    def params(self, prefix=""):
        """Named parameter arrays (or nodes)."""
        out = {prefix + "means": self.means, prefix + "log_stds": self.log_stds}
        if self.mlp is None:
            out[prefix + "logits"] = self.logits
        else:
            for name, p in zip(("mlp_W1", "mlp_b1", "mlp_W2", "mlp_b2"), self.mlp):
                out[prefix + name] = p
        return out

    @classmethod
    def from_params(cls, params, prefix=""):
        if prefix + "mlp_W1" in params:
            mlp = tuple(params[prefix + n] for n in ("mlp_W1", "mlp_b1", "mlp_W2", "mlp_b2"))
            return cls(params[prefix + "means"], params[prefix + "log_stds"], None, mlp)
        return cls(params[prefix + "means"], params[prefix + "log_stds"], params[prefix + "logits"])

    def on_tape(self, tape: Tape, variable=False):
        lift = tape.variable if variable else tape.lift
        return GmmMarginal.from_params({k: lift(v) for k, v in self.params().items()})

    def numpy(self):
        """Copy with every field as a numpy array."""
        val = lambda x: np.array(x.value if isinstance(x, Node) else x)
        return GmmMarginal.from_params({k: val(v) for k, v in self.params().items()})

    def mixture_mean(self, weights=None):
        g = self.numpy()
        w = weights if weights is not None else special.softmax(g.logits)
        return np.asarray(w) @ g.means


def _is_node(*xs):
    return any(isinstance(x, Node) for x in xs)


def _tape_of(*xs):
    return next(x.tape for x in xs if isinstance(x, Node))


def weight_logits(m: GmmMarginal, context=None):
    """Mixture logits: the global vector, or the MLP head applied to ``context`` rows."""
    if m.mlp is None:
        return m.logits
    if context is None:
        raise ValueError("an MLP weight source needs a context embedding")
    W1, b1, W2, b2 = m.mlp
    if _is_node(context, W1):
        return ad.tanh(context @ W1 + b1) @ W2 + b2
    return np.tanh(np.asarray(context) @ W1 + b1) @ W2 + b2


def mixture_weights(m: GmmMarginal, context=None):
    logits = weight_logits(m, context)
    if isinstance(logits, Node):
        return ad.softmax(logits, axis=-1)
    return special.softmax(logits, axis=-1)


def _check_dim(z, m):
    if z.shape[-1] != m.dim:
        raise DimMismatch(f"z has dim {z.shape[-1]}, mixture has dim {m.dim}")


def _prepare(z, m, weights):
    """Lift everything onto one tape; returns (tape, z (n, D), log-weights, squeeze flag)."""
    args = [z, m.means, m.log_stds, weights]
    tape = _tape_of(*args) if _is_node(*args) else Tape()
    zn = tape.lift(z)
    squeeze = zn.ndim == 1
    if squeeze:
        zn = zn.reshape(1, -1)
    w = tape.lift(weights)
    if np.any(w.value < 0):
        raise DomainError("mixture weights must be non-negative")
    return tape, zn, ad.log(ad.clamp(w, 1e-300, 1.0)), squeeze


def _component_terms(zn, g):
    n, d = zn.shape
    diff = zn.reshape(n, 1, d) - g.means
    return diff * ad.exp(-g.log_stds)


def _finish(out, squeeze, keep_node):
    if squeeze:
        out = out.reshape(())
    return out if keep_node else np.array(out.value)


def gmm_log_density(z, m: GmmMarginal, weights=None, context=None):
    """log sum_k pi_k N(z; mu_k, diag sigma_k^2) for each row of ``z``.

    ``weights`` (shape (K,) or (n, K)) defaults to the mixture's own weights.
    """
    _check_dim(z, m)
    if weights is None:
        weights = mixture_weights(m, context)
    keep = _is_node(z, m.means, m.log_stds, weights)
    tape, zn, logw, squeeze = _prepare(z, m, weights)
    g = m.on_tape(tape)
    scaled = _component_terms(zn, g)
    comp = -0.5 * (scaled * scaled + 2.0 * g.log_stds + LOG_2PI).sum(axis=-1)
    return _finish(ad.logsumexp(logw + comp, axis=-1), squeeze, keep)


def gmm_cdf(z, m: GmmMarginal, weights=None, context=None):
    """sum_k pi_k prod_d Phi((z_d - mu_kd) / sigma_kd) for each row of ``z``."""
    _check_dim(z, m)
    if weights is None:
        weights = mixture_weights(m, context)
    keep = _is_node(z, m.means, m.log_stds, weights)
    tape, zn, logw, squeeze = _prepare(z, m, weights)
    g = m.on_tape(tape)
    log_phi = ad.log_ndtr(_component_terms(zn, g)).sum(axis=-1)
    return _finish(ad.exp(ad.logsumexp(logw + log_phi, axis=-1)), squeeze, keep)


def gmm_sample(m: GmmMarginal, weights=None, n=1, seed=None, context=None):
    """Draw ``n`` vectors: a component from ``weights``, then a Gaussian draw."""
    g = m.numpy()
    if weights is None:
        weights = mixture_weights(g, None if context is None else np.asarray(
            context.value if isinstance(context, Node) else context))
    weights = np.asarray(weights.value if isinstance(weights, Node) else weights, dtype=np.float64)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = int(n)
    if weights.ndim == 1:
        comp = rng.choice(g.K, size=n, p=weights / weights.sum())
    else:
        cum = np.cumsum(weights, axis=-1)
        comp = np.minimum((rng.random((n, 1)) * cum[:, -1:] > cum).sum(axis=-1), g.K - 1)
    eps = rng.standard_normal((n, g.dim))
    return g.means[comp] + np.exp(g.log_stds[comp]) * eps


def gmm_gps_sample(m: GmmMarginal, logits=None, tau=0.05, seed=None, n=None, context=None):
    """Gradient-preserving sample ``sum_k w_k (mu_k + sigma_k * eps_k)``.

    ``w = softmax((logits + Gumbel noise) / tau)``.  Returns a tape node when
    any parameter is a node, otherwise an array; shape (D,) if ``n`` is None
    else (n, D).
    """
    if not tau > 0:
        raise DomainError("temperature must be positive")
    if logits is None:
        logits = weight_logits(m, context)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    rows = 1 if n is None else int(n)
    K, D = m.K, m.dim
    u = np.clip(rng.random((rows, K)), 1e-12, 1.0 - 1e-12)
    gumbel = -np.log(-np.log(u))
    eps = rng.standard_normal((rows, K, D))
    keep = _is_node(logits, m.means, m.log_stds)
    tape = _tape_of(logits, m.means, m.log_stds) if keep else Tape()
    g = m.on_tape(tape)
    w = ad.softmax((tape.lift(logits) + gumbel) * (1.0 / tau), axis=-1)
    comps = g.means + ad.exp(g.log_stds) * eps
    out = (w.reshape(rows, K, 1) * comps).sum(axis=1)
    if n is None:
        out = out.reshape(D)
    return out if keep else np.array(out.value)


def fit_gmm(z, K=3, steps=300, lr=0.05, seed=0, weight_source="logits"):
    """Fit a mixture to embeddings ``z`` by Adam on the mean log-density."""
    z = np.asarray(z, dtype=np.float64)
    rng = np.random.default_rng(seed)
    init = GmmMarginal.init(K, z.shape[1], rng, weight_source)
    params = {k: np.array(v) for k, v in init.params().items()}
    # start the components on data points with the data scale
    params["means"] = z[rng.choice(len(z), size=K, replace=len(z) < K)].copy()
    params["log_stds"] = np.tile(np.log(z.std(axis=0) + 1e-3), (K, 1))
    state = AdamState()
    for _ in range(steps):
        tape = Tape()
        nodes = {k: tape.variable(v) for k, v in params.items()}
        g = GmmMarginal.from_params(nodes)
        ctx = tape.constant(z) if g.mlp is not None else None
        loss = -gmm_log_density(tape.constant(z), g, context=ctx).mean()
        grads = dict(zip(nodes, tape.grad(loss, list(nodes.values()))))
        adam_step(params, grads, state, lr)
    return GmmMarginal.from_params(params)
