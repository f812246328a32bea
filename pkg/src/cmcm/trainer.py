"""Minibatch training with Adam, early stopping on validation AUROC and checkpoints."""
from __future__ import annotations

import itertools
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from ._io import atomic_write_text
from .autodiff import Tape
from .copula import CopulaModel, normalize_family, pairwise_dependence, param_count
from .errors import DataFormatError, DivergenceError, DomainError, SingleClass
from .gmm import GmmMarginal
from .metrics import auroc
from .model import ModelConfig, MultimodalBatch, init_params, model_forward
from .objective import ObjectiveConfig, total_loss
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)

MAGIC = "CMCM-CKPT-1"

# Search grids used when a config field is given as a list.
LEARNING_RATES = (1e-4, 5e-5, 1e-5)
LAMBDAS = (1e-5, 5e-6, 1e-6)
COMPONENTS = (1, 2, 3, 4, 5, 6)
TEMPERATURES = (0.001, 0.005, 0.01, 0.05, 0.08)
DROPOUTS = (0.0, 0.1, 0.2, 0.3)


@dataclass
class TrainConfig:
    """Hyperparameters of one training run.  All fields are JSON scalars."""

    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-4
    patience: int = 15
    lambda_cop: float = 1e-5
    n_components: int = 3
    temperature: float = 0.05
    dropout: float = 0.0
    family: str = "gumbel"
    alignment: str = "copula"
    variant: str = "printed"
    gps: bool = True
    weight_source: str = "logits"
    hidden: int = 32
    latent: int = 16
    order: Optional[List[int]] = None
    seed: int = 0

    def __post_init__(self):
        self.family = normalize_family(self.family)
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.n_components < 1:
            raise ValueError("n_components must be >= 1")
        self.objective  # validates lambda, alignment and variant

    @property
    def objective(self) -> ObjectiveConfig:
        return ObjectiveConfig(self.lambda_cop, self.alignment, self.family, self.variant)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config fields: {', '.join(sorted(unknown))}")
        return cls(**d)


def expand_grid(config: dict):
    """Expand list-valued fields (other than ``order``) into grid points.

    Returns a list of ``(name, TrainConfig)``; ``name`` is empty when nothing
    was expanded, otherwise ``key=value`` pairs joined by ``_``.
    """
    keys = [k for k, v in config.items() if isinstance(v, list) and k != "order"]
    if not keys:
        return [("", TrainConfig.from_dict(config))]
    for k in keys:
        if not config[k]:
            raise ValueError(f"grid for {k} is empty")
    out = []
    for combo in itertools.product(*(config[k] for k in keys)):
        point = dict(config)
        point.update(zip(keys, combo))
        name = "_".join(f"{k}={v}" for k, v in zip(keys, combo))
        out.append((name, TrainConfig.from_dict(point)))
    return out


# -- checkpoints ---------------------------------------------------------------

@dataclass
class Checkpoint:
    """Named tensors plus the configuration needed to rebuild the model."""

    config: dict
    tensors: Dict[str, np.ndarray]

    def to_text(self) -> str:
        body = {
            "config": self.config,
            "tensors": {k: {"shape": list(v.shape), "data": [float(x) for x in v.ravel()]}
                        for k, v in self.tensors.items()},
        }
        return MAGIC + "\n" + json.dumps(body, sort_keys=True) + "\n"

    @classmethod
    def from_text(cls, text, source="<checkpoint>"):
        head, _, rest = text.partition("\n")
        if head != MAGIC:
            raise DataFormatError(source, 1, f"expected header {MAGIC!r}")
        try:
            body = json.loads(rest)
            tensors = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
                       for k, v in body["tensors"].items()}
            return cls(body["config"], tensors)
        except (ValueError, KeyError, TypeError) as exc:
            raise DataFormatError(source, 2, f"malformed checkpoint body: {exc}") from None

    def save(self, path):
        atomic_write_text(path, self.to_text())

    @classmethod
    def load(cls, path):
        path = Path(path)
        return cls.from_text(path.read_text(encoding="utf-8"), path)

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config["train"])

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.config["model"])

    def gmms(self):
        return gmms_from_params(self.tensors, len(self.model_config.dims))

    def copula(self) -> CopulaModel:
        return copula_from_params(self.tensors, self.train_config.family, len(self.model_config.dims))


def gmms_from_params(params, n_modalities):
    return {m: GmmMarginal.from_params(params, f"gmm{m}.") for m in range(n_modalities)}


def copula_from_params(params, family, dim):
    raw = params.get("copula.raw", np.zeros(0))
    raw = raw.value if hasattr(raw, "value") else raw
    return CopulaModel(family, raw, dim)


# -- early stopping and imputation -----------------------------------------------

def early_stop_check(valid_history: Sequence[float], patience: int) -> str:
    """'stop' iff the best (earliest maximum) entry is ``patience`` or more epochs old."""
    if not valid_history:
        raise ValueError("history must be nonempty")
    best = int(np.argmax(valid_history))
    return "stop" if len(valid_history) - 1 - best >= patience else "continue"


def impute_missing(batch: MultimodalBatch, embeddings, gmms, mode="eval", seed=None,
                   temperature=0.05, gps=True):
    """Embeddings with absent slots replaced by mixture draws (arrays in, arrays out)."""
    from .model import impute
    tape = Tape()
    z = [tape.constant(e) for e in embeddings]
    out = impute(z, batch.mask, gmms, mode, np.random.default_rng(seed), temperature, gps)
    return [np.array(o.value) for o in out]


def valid_auroc(scores, labels) -> float:
    """AUROC, or 0.5 when the labels hold a single class."""
    try:
        return auroc(scores, labels)
    except SingleClass:
        return 0.5


# -- training ----------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_auroc: float
    tau: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: List[EpochRecord]
    best_epoch: int
    best_valid_auroc: float


def history_text(history: Sequence[EpochRecord]) -> str:
    lines = ["epoch,train_loss,valid_auroc,tau"]
    lines += [f"{r.epoch},{r.train_loss:.9g},{r.valid_auroc:.9g},{r.tau:.9g}" for r in history]
    return "\n".join(lines) + "\n"


def init_all_params(config: TrainConfig, model_cfg: ModelConfig, rng):
    params = init_params(model_cfg, rng)
    for m in range(model_cfg.n_modalities):
        g = GmmMarginal.init(config.n_components, model_cfg.latent, rng, config.weight_source)
        params.update({k: np.array(v) for k, v in g.params(f"gmm{m}.").items()})
    raw = CopulaModel.default(config.family, model_cfg.n_modalities).raw_params
    if raw.size:
        params["copula.raw"] = raw
    return params


def predict(params, model_cfg: ModelConfig, data: MultimodalBatch, seed=None, batch_size=1024):
    """Evaluation-mode probabilities for every row of ``data``."""
    gmms = gmms_from_params(params, model_cfg.n_modalities)
    rng = np.random.default_rng(seed)
    out = [np.array(model_forward(b, params, model_cfg, gmms, "eval", rng)[0].value)
           for b in data.batches(batch_size)]
    return np.concatenate(out) if out else np.zeros(0)


def _check_data(data: MultimodalBatch, model_cfg: ModelConfig, name):
    if len(data) == 0:
        raise DataFormatError(name, None, "dataset is empty")
    dims = [a.shape[1] for a in data.x]
    if dims != list(model_cfg.dims):
        raise DataFormatError(name, None, f"modality dims {dims} differ from {model_cfg.dims}")


def train_step(params, state, batch, config: TrainConfig, model_cfg: ModelConfig, rng):
    """Forward, backward and one Adam update; returns the batch loss."""
    tape = Tape()
    nodes = {k: tape.variable(v) for k, v in params.items()}
    gmms = gmms_from_params(nodes, model_cfg.n_modalities)
    copula = copula_from_params(params, config.family, model_cfg.n_modalities)
    y_hat, z = model_forward(batch, nodes, model_cfg, gmms, "train", rng,
                             config.dropout, config.temperature, config.gps)
    loss = total_loss(y_hat, batch.y, z, gmms, copula, config.objective, nodes.get("copula.raw"))
    value = float(loss.value)
    if not np.isfinite(value):
        raise DomainError("non-finite loss")
    names = list(nodes)
    grads = dict(zip(names, tape.grad(loss, [nodes[k] for k in names])))
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DomainError(f"non-finite gradient for {k}")
    adam_step(params, grads, state, config.learning_rate)
    return value


def train(config: TrainConfig, train_set: MultimodalBatch, valid_set: MultimodalBatch,
          on_epoch: Optional[Callable[[List[EpochRecord]], None]] = None) -> TrainResult:
    """Run minibatch training and return the best-validation-AUROC checkpoint.

    ``on_epoch`` is called with the history after every completed epoch.
    Raises :class:`DivergenceError` (carrying the best checkpoint so far) when
    the loss or a gradient becomes non-finite.
    """
    dims = [a.shape[1] for a in train_set.x]
    model_cfg = ModelConfig(dims, config.hidden, config.latent, config.order)
    _check_data(train_set, model_cfg, "train")
    _check_data(valid_set, model_cfg, "valid")
    rng = np.random.default_rng(config.seed)
    params = init_all_params(config, model_cfg, rng)
    state = AdamState()
    meta = {"train": asdict(config), "model": asdict(model_cfg)}

    def snapshot(p):
        return Checkpoint(meta, {k: v.copy() for k, v in p.items()})

    best = snapshot(params)
    best_epoch, best_auc = 0, -np.inf
    history: List[EpochRecord] = []
    for epoch in range(1, config.epochs + 1):
        total, count = 0.0, 0
        try:
            for batch in train_set.batches(config.batch_size, rng):
                total += train_step(params, state, batch, config, model_cfg, rng) * len(batch)
                count += len(batch)
        except DomainError as exc:
            raise DivergenceError(f"epoch {epoch}: {exc}", best, history) from exc
        scores = predict(params, model_cfg, valid_set, seed=[config.seed, epoch])
        auc = valid_auroc(scores, valid_set.y)
        tau = pairwise_dependence(copula_from_params(params, config.family, model_cfg.n_modalities))
        history.append(EpochRecord(epoch, total / count, auc, tau))
        log.info("epoch %d loss %.6f valid_auroc %.4f tau %.4f", epoch, total / count, auc, tau)
        if auc > best_auc:
            best, best_epoch, best_auc = snapshot(params), epoch, auc
        if on_epoch is not None:
            on_epoch(history)
        if early_stop_check([r.valid_auroc for r in history], config.patience) == "stop":
            break
    return TrainResult(best, history, best_epoch, float(best_auc))


@dataclass
class GridOutcome:
    name: str
    config: TrainConfig
    result: Optional[TrainResult] = None
    error: Optional[str] = None

    @property
    def failed(self):
        return self.result is None


def grid_search(points, train_set, valid_set, run=train):
    """Train every ``(name, config)`` point; diverged points are recorded, not retried.

    Returns ``(outcomes, best_outcome)`` where the best has the highest
    validation AUROC among successful points (first wins on ties).
    """
    outcomes = []
    for name, cfg in points:
        try:
            outcomes.append(GridOutcome(name, cfg, run(cfg, train_set, valid_set)))
        except DivergenceError as exc:
            outcomes.append(GridOutcome(name, cfg, error=str(exc)))
    ok = [o for o in outcomes if not o.failed]
    best = max(ok, key=lambda o: o.result.best_valid_auroc) if ok else None
    return outcomes, best
