"""Per-modality MLP encoders, two-layer LSTM fusion and a logistic classifier.

Parameters live in a flat ``{name: array}`` dictionary.  Every forward
function also accepts a dictionary of tape nodes, which is how the trainer
obtains gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape
from .errors import DimMismatch, MissingGmm
from .gmm import GmmMarginal, gmm_gps_sample, gmm_sample, weight_logits

PROB_CLIP = 1e-12
LSTM_LAYERS = 2


@dataclass
class MultimodalBatch:
    """Feature matrices per modality, a presence mask and binary labels."""

    x: List[np.ndarray]
    mask: np.ndarray
    y: np.ndarray
    ids: Optional[np.ndarray] = None

    def __post_init__(self):
        self.x = [np.asarray(a, dtype=np.float64) for a in self.x]
        self.mask = np.asarray(self.mask, dtype=bool)
        self.y = np.asarray(self.y, dtype=np.float64)
        n = len(self.y)
        if self.mask.shape != (n, len(self.x)):
            raise DimMismatch(f"mask shape {self.mask.shape}, expected ({n}, {len(self.x)})")
        for m, a in enumerate(self.x):
            if a.ndim != 2 or a.shape[0] != n:
                raise DimMismatch(f"modality {m + 1} has shape {a.shape}, expected ({n}, D)")

    def __len__(self):
        return len(self.y)

    @property
    def n_modalities(self):
        return len(self.x)

    def take(self, idx):
        ids = None if self.ids is None else self.ids[idx]
        return MultimodalBatch([a[idx] for a in self.x], self.mask[idx], self.y[idx], ids)

    def batches(self, batch_size, seed=None):
        """Minibatches in a shuffled order fixed by ``seed`` (file order if None)."""
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        n = len(self)
        if seed is None:
            order = np.arange(n)
        else:
            rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
            order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield self.take(order[start:start + batch_size])


@dataclass
class ModelConfig:
    """Architecture sizes; ``order`` is the modality order fed to the LSTM."""

    dims: Sequence[int]
    hidden: int = 32
    latent: int = 16
    order: Optional[Sequence[int]] = None

    def __post_init__(self):
        self.dims = [int(d) for d in self.dims]
        if self.order is None:
            self.order = list(range(len(self.dims)))
        self.order = [int(i) for i in self.order]
        if sorted(self.order) != list(range(len(self.dims))):
            raise ValueError(f"order {self.order} is not a permutation of the modalities")

    @property
    def n_modalities(self):
        return len(self.dims)


def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: ModelConfig, rng) -> Dict[str, np.ndarray]:
    """Xavier-uniform encoder weights, LSTM weights uniform in +-1/sqrt(d), zero classifier."""
    h, d = config.hidden, config.latent
    p = {}
    for m, dm in enumerate(config.dims):
        for name, (fi, fo) in (("W1", (dm, h)), ("W2", (h, h)), ("P", (h, d))):
            p[f"enc{m}.{name}"] = _uniform(rng, np.sqrt(6.0 / (fi + fo)), (fi, fo))
        p[f"enc{m}.b1"] = np.zeros(h)
        p[f"enc{m}.b2"] = np.zeros(h)
        p[f"enc{m}.bP"] = np.zeros(d)
    bound = 1.0 / np.sqrt(d)
    for layer in range(LSTM_LAYERS):
        p[f"lstm{layer}.W"] = _uniform(rng, bound, (d, 4 * d))
        p[f"lstm{layer}.U"] = _uniform(rng, bound, (d, 4 * d))
        b = _uniform(rng, bound, 4 * d)
        b[d:2 * d] = 1.0             # forget gate
        p[f"lstm{layer}.b"] = b
    p["clf.w"] = np.zeros(d)
    p["clf.b"] = np.zeros(())
    return p


def _dropout(h, rate, rng):
    if rate <= 0 or rng is None:
        return h
    keep = (rng.random(h.shape) >= rate) / (1.0 - rate)
    return h * keep


def encode(x, m: int, params, dropout=0.0, rng=None):
    """Embedding of modality ``m`` features ``x`` (shape (n, D_m) or (D_m,))."""
    W1 = params[f"enc{m}.W1"]
    if x.shape[-1] != W1.shape[0]:
        raise DimMismatch(f"modality {m + 1} expects {W1.shape[0]} features, got {x.shape[-1]}")
    h = ad.tanh(x @ W1 + params[f"enc{m}.b1"])
    h = _dropout(h, dropout, rng)
    h = ad.tanh(h @ params[f"enc{m}.W2"] + params[f"enc{m}.b2"])
    h = _dropout(h, dropout, rng)
    return h @ params[f"enc{m}.P"] + params[f"enc{m}.bP"]


def lstm_cell(x, h, c, W, U, b):
    """One LSTM step with gates (input, forget, cell, output) packed along the last axis."""
    d = h.shape[-1]
    gates = x @ W + h @ U + b
    i = ad.sigmoid(gates[..., 0:d])
    f = ad.sigmoid(gates[..., d:2 * d])
    g = ad.tanh(gates[..., 2 * d:3 * d])
    o = ad.sigmoid(gates[..., 3 * d:4 * d])
    c = f * c + i * g
    return o * ad.tanh(c), c


def fuse(embeddings, params):
    """Final second-layer hidden state after running the embedding sequence."""
    if not embeddings:
        raise DimMismatch("fusion needs at least one embedding")
    W0 = params["lstm0.W"]
    d = W0.shape[1] // 4
    tape = next(e.tape for e in list(embeddings) + [W0] if isinstance(e, Node))
    seq = list(embeddings)
    for e in seq:
        if e.shape[-1] != W0.shape[0]:
            raise DimMismatch(f"embedding dim {e.shape[-1]}, fusion expects {W0.shape[0]}")
    lead = seq[0].shape[:-1]
    for layer in range(LSTM_LAYERS):
        h = tape.constant(np.zeros(lead + (d,)))
        c = h
        out = []
        for x in seq:
            h, c = lstm_cell(x, h, c, params[f"lstm{layer}.W"], params[f"lstm{layer}.U"],
                             params[f"lstm{layer}.b"])
            out.append(h)
        seq = out
    return seq[-1]


def classify(fused, params):
    """Sigmoid probability, kept strictly inside (0, 1)."""
    w = params["clf.w"]
    if fused.shape[-1] != w.shape[0]:
        raise DimMismatch(f"fused dim {fused.shape[-1]}, classifier expects {w.shape[0]}")
    logit = fused @ w + params["clf.b"]
    return ad.clamp(ad.sigmoid(logit), PROB_CLIP, 1.0 - PROB_CLIP)


def other_context(z, mask_cols, m):
    """Per-row mean of the present embeddings of every modality except ``m``."""
    total = None
    count = np.zeros_like(mask_cols[0])
    for j, (zj, mk) in enumerate(zip(z, mask_cols)):
        if j == m:
            continue
        term = zj * mk
        total = term if total is None else total + term
        count = count + mk
    return total * (1.0 / np.maximum(count, 1.0))


def impute(z, mask, gmms, mode="eval", rng=None, tau=0.05, gps=True):
    """Replace embeddings of absent modalities by draws from their mixtures.

    ``z`` is a list of (n, d) nodes, ``mask`` an (n, M) boolean array.  Present
    rows pass through untouched; the RNG is only consumed when some entry is
    absent.  Training draws use the gradient-preserving sampler when ``gps``
    is set and plain draws otherwise; evaluation always uses plain draws.
    Mixtures with an MLP weight source take as context the mean of the other
    modalities' present embeddings, so the draw depends on what was observed.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.all():
        return list(z)
    mask_cols = [mask[:, m:m + 1].astype(np.float64) for m in range(mask.shape[1])]
    out = []
    n = mask.shape[0]
    for m, zm in enumerate(z):
        if mask[:, m].all():
            out.append(zm)
            continue
        g = gmms.get(m) if gmms is not None else None
        if g is None:
            raise MissingGmm(f"modality {m + 1} has absent rows but no mixture marginal")
        ctx = other_context(z, mask_cols, m) if g.mlp is not None else None
        if mode == "train" and gps:
            logits = weight_logits(g, ctx)
            draw = gmm_gps_sample(g, logits, tau=tau, seed=rng, n=n)
        else:
            plain_ctx = None if ctx is None else np.asarray(ctx.value)
            draw = gmm_sample(g, n=n, seed=rng, context=plain_ctx)
        out.append(zm * mask_cols[m] + draw * (1.0 - mask_cols[m]))
    return out


def model_forward(batch: MultimodalBatch, params, config: ModelConfig, gmms=None,
                  mode="eval", seed=None, dropout=0.0, tau=0.05, gps=True):
    """Class probabilities and (imputed) embeddings for ``batch``.

    ``params`` may hold arrays or tape nodes.  Returns ``(y_hat, z)`` where
    ``z`` is the list of per-modality embedding nodes after imputation.
    """
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    if batch.n_modalities != config.n_modalities:
        raise DimMismatch(f"batch has {batch.n_modalities} modalities, model has {config.n_modalities}")
    tape = next((v.tape for v in params.values() if isinstance(v, Node)), None)
    if tape is None:
        tape = Tape()
        params = {k: tape.constant(v) for k, v in params.items()}
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    drop_rng = rng if (mode == "train" and dropout > 0) else None
    z = [encode(tape.constant(x), m, params, dropout, drop_rng) for m, x in enumerate(batch.x)]
    z = impute(z, batch.mask, gmms, mode, rng, tau, gps)
    fused = fuse([z[m] for m in config.order], params)
    return classify(fused, params), z
