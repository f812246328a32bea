"""Synthetic multimodal data with a known latent copula, MAR masking and CSV I/O.

Each modality m has a scalar latent ``z_m = Phi^{-1}(u_m)`` where ``u`` is
drawn from the latent copula.  Its features are ``tanh(a_mj z_m + b_mj)``
plus Gaussian noise, which is monotone in ``z_m`` per coordinate, so the
rank dependence of the latents carries over to the features.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from scipy import special

from ._io import atomic_write_text
from .copula import CopulaModel, sample_copula
from .errors import AllModalitiesAtRisk, DataFormatError
from .model import MultimodalBatch

SPLITS = ("train", "valid", "test")


@dataclass
class SynthSpec:
    """Recipe for a synthetic dataset.

    ``copula`` holds the family and its constrained parameters, e.g.
    ``{"family": "gumbel", "alpha": 2.0}`` or
    ``{"family": "gaussian", "rho": 0.8}``.  ``at_risk`` lists 1-based
    modality numbers that may go missing.  Transform slopes and shifts are
    drawn from the seed unless given explicitly as (M, D) nested lists.
    """

    dims: List[int] = field(default_factory=lambda: [8, 8])
    copula: Dict = field(default_factory=lambda: {"family": "gumbel", "alpha": 2.0})
    noise: float = 0.1
    label_weights: Optional[List[float]] = None
    label_bias: float = 0.0
    n_train: int = 4000
    n_valid: int = 500
    n_test: int = 1000
    missing_rate: float = 0.3
    at_risk: List[int] = field(default_factory=lambda: [2])
    scales: Optional[List[List[float]]] = None
    shifts: Optional[List[List[float]]] = None
    seed: int = 0

    def __post_init__(self):
        self.dims = [int(d) for d in self.dims]
        if len(self.dims) < 2 or min(self.dims) < 1:
            raise ValueError("need at least two modalities with dims >= 1")
        if not 0 <= self.missing_rate < 1:
            raise ValueError("missing_rate must lie in [0, 1)")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if self.label_weights is None:
            self.label_weights = [1.0] * len(self.dims)
        if len(self.label_weights) != len(self.dims):
            raise ValueError("label_weights needs one entry per modality")
        if not np.all(np.isfinite(self.label_weights)) or not np.isfinite(self.label_bias):
            raise ValueError("label rule weights must be finite")
        for name in ("n_train", "n_valid", "n_test"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if "family" not in self.copula:
            raise ValueError("copula needs a 'family' entry")

    @property
    def n_modalities(self):
        return len(self.dims)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown spec fields: {', '.join(sorted(unknown))}")
        return cls(**d)

    def copula_model(self) -> CopulaModel:
        kw = dict(self.copula)
        family = kw.pop("family")
        return CopulaModel.from_params(family, dim=self.n_modalities, **kw)


def _transforms(spec: SynthSpec, rng):
    scales, shifts = [], []
    for m, d in enumerate(spec.dims):
        a = rng.uniform(0.5, 1.5, d) if spec.scales is None else np.asarray(spec.scales[m], float)
        b = rng.uniform(-0.5, 0.5, d) if spec.shifts is None else np.asarray(spec.shifts[m], float)
        scales.append(a)
        shifts.append(b)
    return scales, shifts


def synthesize(spec: SynthSpec):
    """Generate all splits in memory.

    Returns ``{split: (batch, u)}`` where ``u`` are the latent copula draws.
    """
    seq = np.random.SeedSequence(spec.seed)
    s_copula, s_transform, s_noise, s_mask = seq.spawn(4)
    n_total = spec.n_train + spec.n_valid + spec.n_test
    u = sample_copula(spec.copula_model(), n_total, seed=s_copula)
    latent = special.ndtri(np.clip(u, 1e-12, 1.0 - 1e-12))
    scales, shifts = _transforms(spec, np.random.default_rng(s_transform))
    rng = np.random.default_rng(s_noise)
    x = [np.tanh(latent[:, m:m + 1] * scales[m] + shifts[m])
         + spec.noise * rng.standard_normal((n_total, d))
         for m, d in enumerate(spec.dims)]
    logit = latent @ np.asarray(spec.label_weights, float) + spec.label_bias
    y = (rng.random(n_total) < special.expit(logit)).astype(np.float64)
    full = MultimodalBatch(x, np.ones((n_total, spec.n_modalities), bool), y, np.arange(n_total))
    at_risk = [m - 1 for m in spec.at_risk]
    masked = apply_mar_mask(full, spec.missing_rate, at_risk, seed=s_mask)
    out = {}
    start = 0
    for split, n in zip(SPLITS, (spec.n_train, spec.n_valid, spec.n_test)):
        idx = np.arange(start, start + n)
        part = masked.take(idx)
        part.ids = np.arange(n)
        out[split] = (part, u[idx])
        start += n
    return out


def apply_mar_mask(batch: MultimodalBatch, rate, at_risk, seed=None) -> MultimodalBatch:
    """Mask each at-risk modality row independently with probability ``rate``.

    ``at_risk`` holds 0-based modality indices; at least one modality must stay
    outside it.  Masked rows get placeholder zeros.  Labels are untouched.
    """
    if not 0 <= rate < 1:
        raise ValueError("rate must lie in [0, 1)")
    at_risk = sorted(set(int(m) for m in at_risk))
    M = batch.n_modalities
    if any(m < 0 or m >= M for m in at_risk):
        raise ValueError(f"at-risk modalities must lie in 0..{M - 1}")
    if len(at_risk) >= M:
        raise AllModalitiesAtRisk("at least one modality must never go missing")
    rng = np.random.default_rng(seed)
    mask = batch.mask.copy()
    x = [a.copy() for a in batch.x]
    n = len(batch)
    for m in at_risk:
        drop = rng.random(n) < rate
        mask[drop, m] = False
        x[m][~mask[:, m]] = 0.0
    return MultimodalBatch(x, mask, batch.y.copy(), None if batch.ids is None else batch.ids.copy())


# -- text format ---------------------------------------------------------------

def _fmt(v):
    return f"{v:.9g}"


def _labels_text(batch):
    lines = ["id,y"]
    lines += [f"{i},{int(y)}" for i, y in zip(batch.ids, batch.y)]
    return "\n".join(lines) + "\n"


def _modality_text(batch, m):
    d = batch.x[m].shape[1]
    lines = ["id,present," + ",".join(f"x_{j + 1}" for j in range(d))]
    for i, present, row in zip(batch.ids, batch.mask[:, m], batch.x[m]):
        lines.append(f"{i},{int(present)}," + ",".join(_fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def write_split(batch: MultimodalBatch, path, manifest: str = ""):
    """Write one split directory (labels, modality files, manifest)."""
    path = Path(path)
    if batch.ids is None:
        batch.ids = np.arange(len(batch))
    atomic_write_text(path / "labels.csv", _labels_text(batch))
    for m in range(batch.n_modalities):
        atomic_write_text(path / f"modality_{m + 1}.csv", _modality_text(batch, m))
    atomic_write_text(path / "manifest.txt", manifest)


def manifest_text(spec: SynthSpec, split=None):
    body = {"spec": asdict(spec), "seed": spec.seed}
    if split is not None:
        body["split"] = split
        body["rows"] = getattr(spec, f"n_{split}")
    return json.dumps(body, sort_keys=True, indent=2) + "\n"


def generate_synthetic(spec: SynthSpec, out_dir):
    """Write ``out_dir/{train,valid,test}`` split directories and a manifest.

    Returns ``{split: row count}``.
    """
    out_dir = Path(out_dir)
    counts = {}
    for split, (batch, _) in synthesize(spec).items():
        write_split(batch, out_dir / split, manifest_text(spec, split))
        counts[split] = len(batch)
    atomic_write_text(out_dir / "manifest.txt", manifest_text(spec))
    return counts


def _read_rows(path):
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataFormatError(path, None, f"cannot open: {exc.strerror}") from None
    with fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError(path, 1, "missing header")
    return rows[0], rows[1:]


def _parse_int(path, line, text, allowed=None):
    try:
        v = int(text)
    except ValueError:
        raise DataFormatError(path, line, f"expected an integer, got {text!r}") from None
    if allowed is not None and v not in allowed:
        raise DataFormatError(path, line, f"value {v} not in {sorted(allowed)}")
    return v


def _load_labels(path):
    header, rows = _read_rows(path)
    if header != ["id", "y"]:
        raise DataFormatError(path, 1, f"header must be 'id,y', got {','.join(header)!r}")
    ids, ys = [], []
    for k, row in enumerate(rows, start=2):
        if len(row) != 2:
            raise DataFormatError(path, k, f"expected 2 fields, got {len(row)}")
        ids.append(_parse_int(path, k, row[0]))
        ys.append(_parse_int(path, k, row[1], {0, 1}))
    return np.array(ids, dtype=np.int64), np.array(ys, dtype=np.float64)


def _load_modality(path, ids):
    header, rows = _read_rows(path)
    if len(header) < 3 or header[:2] != ["id", "present"] or \
            header[2:] != [f"x_{j + 1}" for j in range(len(header) - 2)]:
        raise DataFormatError(path, 1, "header must be 'id,present,x_1,...,x_D'")
    d = len(header) - 2
    if len(rows) != len(ids):
        raise DataFormatError(path, None, f"{len(rows)} rows but labels.csv has {len(ids)}")
    x = np.empty((len(rows), d))
    present = np.empty(len(rows), dtype=bool)
    for k, row in enumerate(rows):
        line = k + 2
        if len(row) != d + 2:
            raise DataFormatError(path, line, f"expected {d + 2} fields, got {len(row)}")
        if _parse_int(path, line, row[0]) != ids[k]:
            raise DataFormatError(path, line, f"id {row[0]} does not match labels.csv id {ids[k]}")
        present[k] = _parse_int(path, line, row[1], {0, 1}) == 1
        try:
            x[k] = [float(v) for v in row[2:]]
        except ValueError:
            raise DataFormatError(path, line, "non-numeric feature value") from None
        if not np.all(np.isfinite(x[k])):
            raise DataFormatError(path, line, "non-finite feature value")
    return x, present


def load_dataset(path) -> MultimodalBatch:
    """Load one split directory written by :func:`write_split`."""
    path = Path(path)
    if not path.is_dir():
        raise DataFormatError(path, None, "not a dataset directory")
    ids, y = _load_labels(path / "labels.csv")
    files = sorted(path.glob("modality_*.csv"), key=lambda p: p.stem)
    numbers = []
    for f in files:
        try:
            numbers.append(int(f.stem.split("_", 1)[1]))
        except ValueError:
            raise DataFormatError(f, None, "modality files must be named modality_<m>.csv") from None
    if sorted(numbers) != list(range(1, len(numbers) + 1)) or len(numbers) < 1:
        raise DataFormatError(path, None, "modality files must be numbered 1..M")
    xs, masks = [], []
    for m in range(1, len(numbers) + 1):
        x, present = _load_modality(path / f"modality_{m}.csv", ids)
        xs.append(x)
        masks.append(present)
    return MultimodalBatch(xs, np.column_stack(masks), y, ids)
