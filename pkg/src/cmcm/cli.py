"""Command-line interface: ``cmcm <command> [options]``.

Exit codes: 0 success, 2 bad configuration or arguments, 3 I/O or data
format failure, 4 training diverged, 5 a required artifact is missing.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

from . import __version__
from ._io import atomic_write_text, atomic_writer
from .copula import ARCHIMEDEAN, CopulaModel, normalize_family, write_density_grid
from .data import SynthSpec, generate_synthetic, load_dataset
from .errors import CmcmError, DataFormatError, DivergenceError
from .metrics import bootstrap_ci, write_metrics
from .trainer import (
    COMPONENTS, DROPOUTS, LAMBDAS, LEARNING_RATES, TEMPERATURES, Checkpoint, TrainConfig,
    expand_grid, history_text, predict, train,
)

log = logging.getLogger("cmcm")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_MISSING = 0, 2, 3, 4, 5
CHECKPOINT = "checkpoint.ckpt"


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _env_seed():
    raw = os.environ.get("CMCM_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise CliError(EXIT_CONFIG, f"CMCM_SEED must be an integer, got {raw!r}") from None


def _read_json(path, what):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {what} {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_CONFIG, f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise CliError(EXIT_CONFIG, f"{path}: {what} must be a JSON object")
    return data


def _prepare_out(path, force, is_dir=True):
    path = Path(path)
    if path.exists():
        nonempty = path.is_file() or any(path.iterdir())
        if nonempty and not force:
            raise CliError(EXIT_IO, f"{path} already exists; pass --force to overwrite")
    if is_dir:
        path.mkdir(parents=True, exist_ok=True)
    return path


def _load_split(data_dir, split):
    try:
        return load_dataset(Path(data_dir) / split)
    except DataFormatError as exc:
        raise CliError(EXIT_IO, str(exc)) from None


# -- gen-data ------------------------------------------------------------------

def cmd_gen_data(args):
    raw = _read_json(args.spec, "spec")
    if args.seed is not None:
        raw["seed"] = args.seed
    elif "seed" not in raw and _env_seed() is not None:
        raw["seed"] = _env_seed()
    try:
        spec = SynthSpec.from_dict(raw)
        spec.copula_model()
    except (TypeError, ValueError, CmcmError) as exc:
        raise CliError(EXIT_CONFIG, f"{args.spec}: invalid spec: {exc}") from None
    out = _prepare_out(args.out, args.force)
    try:
        counts = generate_synthetic(spec, out)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write dataset: {exc}") from None
    for split, n in counts.items():
        print(f"{split}: {n} rows")
    return EXIT_OK


# -- train / grid ----------------------------------------------------------------

_TRAIN_FLAGS = [
    # flag, config key, type, default, grid
    ("--epochs", "epochs", int, 100, None),
    ("--batch-size", "batch_size", int, 32, None),
    ("--learning-rate", "learning_rate", float, 1e-4, LEARNING_RATES),
    ("--patience", "patience", int, 15, None),
    ("--lambda-cop", "lambda_cop", float, 1e-5, LAMBDAS),
    ("--components", "n_components", int, 3, COMPONENTS),
    ("--temperature", "temperature", float, 0.05, TEMPERATURES),
    ("--dropout", "dropout", float, 0.0, DROPOUTS),
    ("--family", "family", str, "gumbel", None),
    ("--alignment", "alignment", str, "copula", None),
    ("--variant", "variant", str, "printed", None),
    ("--weight-source", "weight_source", str, "logits", None),
    ("--hidden", "hidden", int, 32, None),
    ("--latent", "latent", int, 16, None),
]


def _list_of(kind):
    def parse(text):
        try:
            return [kind(v) for v in text.split(",") if v.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected comma-separated values, got {text!r}")
    return parse


def _fmt_grid(values):
    return ",".join(f"{v:g}" if isinstance(v, float) else str(v) for v in values)


def _add_train_flags(p, grid):
    p.add_argument("--data", required=True, help="dataset directory with train/ and valid/ splits")
    p.add_argument("--config", help="JSON config; list-valued fields are searched as a grid")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=int, help="training seed (default: config, then CMCM_SEED, then 0)")
    p.add_argument("--no-gps", action="store_true", help="impute with plain mixture draws while training")
    p.add_argument("--jobs", type=int, default=1, help="concurrent grid points (default: 1)")
    p.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    for flag, key, kind, default, values in _TRAIN_FLAGS:
        if grid and values is not None:
            p.add_argument(flag, dest=key, type=_list_of(kind), default=None,
                           help=f"values to search (default: {_fmt_grid(values)})")
        else:
            extra = f"; search grid {_fmt_grid(values)}" if values is not None else ""
            p.add_argument(flag, dest=key, type=kind, default=None,
                           help=f"(default: {default}{extra})")


def _resolve_config(args, grid):
    cfg = _read_json(args.config, "config") if args.config else {}
    for _, key, _, _, values in _TRAIN_FLAGS:
        given = getattr(args, key)
        if given is not None:
            cfg[key] = given
        elif grid and values is not None and key not in cfg:
            cfg[key] = list(values)
    if args.no_gps:
        cfg["gps"] = False
    if args.seed is not None:
        cfg["seed"] = args.seed
    elif "seed" not in cfg and _env_seed() is not None:
        cfg["seed"] = _env_seed()
    try:
        return expand_grid(cfg)
    except (TypeError, ValueError, CmcmError) as exc:
        raise CliError(EXIT_CONFIG, f"invalid config: {exc}") from None


def _run_point(config: TrainConfig, data_dir, run_dir):
    """Train one grid point into ``run_dir``; returns (status, best valid AUROC)."""
    train_set = load_dataset(Path(data_dir) / "train")
    valid_set = load_dataset(Path(data_dir) / "valid")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(run_dir / "config.json", json.dumps(asdict(config), sort_keys=True, indent=2) + "\n")

    def on_epoch(history):
        atomic_write_text(run_dir / "history.csv", history_text(history))

    try:
        result = train(config, train_set, valid_set, on_epoch=on_epoch)
    except DivergenceError as exc:
        exc.checkpoint.save(run_dir / CHECKPOINT)
        atomic_write_text(run_dir / "history.csv", history_text(exc.history))
        return "diverged", float("nan"), str(exc)
    result.checkpoint.save(run_dir / CHECKPOINT)
    atomic_write_text(run_dir / "history.csv", history_text(result.history))
    return "ok", result.best_valid_auroc, ""


def _train_common(args, grid):
    points = _resolve_config(args, grid)
    # fail early on unreadable data, before any run directory is touched
    for split in ("train", "valid"):
        _load_split(args.data, split)
    out = _prepare_out(args.out, args.force)
    if len(points) == 1 and not grid:
        _, cfg = points[0]
        status, best, message = _run_point(cfg, args.data, out)
        if status == "diverged":
            print(f"training diverged: {message}", file=sys.stderr)
            return EXIT_DIVERGED
        print(f"best valid AUROC: {best:.4f}")
        return EXIT_OK
    jobs = max(1, int(args.jobs))
    names = [name or "point" for name, _ in points]
    if jobs == 1:
        outcomes = [_run_point(cfg, args.data, out / name) for name, (_, cfg) in zip(names, points)]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_point, cfg, args.data, out / name)
                       for name, (_, cfg) in zip(names, points)]
            outcomes = [f.result() for f in futures]
    lines = ["name,status,best_valid_auroc"]
    best_name, best_auc = None, -1.0
    for name, (status, auc, _) in zip(names, outcomes):
        lines.append(f"{name},{status},{auc:.9g}")
        if status == "ok" and auc > best_auc:
            best_name, best_auc = name, auc
        print(f"{name}: {status} best valid AUROC {auc:.4f}")
    atomic_write_text(out / "grid.csv", "\n".join(lines) + "\n")
    if best_name is None:
        print("every grid point diverged", file=sys.stderr)
        return EXIT_DIVERGED
    atomic_write_text(out / "best.txt", best_name + "\n")
    print(f"best point: {best_name} (valid AUROC {best_auc:.4f})")
    return EXIT_OK


def cmd_train(args):
    return _train_common(args, grid=False)


def cmd_grid(args):
    return _train_common(args, grid=True)


# -- eval ------------------------------------------------------------------------

def _find_checkpoint(run):
    run = Path(run)
    best = run / "best.txt"
    if best.is_file():
        run = run / best.read_text(encoding="utf-8").strip()
    path = run / CHECKPOINT
    if not path.is_file():
        raise CliError(EXIT_MISSING, f"no checkpoint found at {path}")
    return run, path


def cmd_eval(args):
    run, ckpt_path = _find_checkpoint(args.run)
    try:
        ckpt = Checkpoint.load(ckpt_path)
    except (DataFormatError, OSError) as exc:
        raise CliError(EXIT_IO, str(exc)) from None
    data = _load_split(args.data, args.split)
    seed = args.seed if args.seed is not None else (_env_seed() or 0)
    scores = predict(ckpt.tensors, ckpt.model_config, data, seed=seed)
    rows = []
    for metric in ("auroc", "aupr"):
        ci = bootstrap_ci(metric, scores, data.y, iters=args.iters, level=args.level, seed=seed)
        rows.append((args.task, metric, ci.point, ci.lo, ci.hi))
        print(f"{metric.upper()}: {ci.point:.4f} [{ci.lo:.4f}, {ci.hi:.4f}]")
    out = Path(args.out) if args.out else run / "metrics.csv"
    with atomic_writer(out) as fh:
        write_metrics(rows, fh)
    meta = {"iters": args.iters, "level": args.level, "seed": seed, "split": args.split,
            "checkpoint": str(ckpt_path)}
    atomic_write_text(out.with_name("metrics_meta.json"), json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return EXIT_OK


# -- copula-grid -------------------------------------------------------------------

def parse_copula_params(family, text):
    """``alpha=2``, ``rho=0.5,nu=4`` or bare values in the family's order."""
    family = normalize_family(family)
    names = ["alpha"] if family in ARCHIMEDEAN else ["rho", "nu"] if family == "studentt" else \
        ["rho"] if family == "gaussian" else []
    out = {}
    parts = [p.strip() for p in (text or "").split(",") if p.strip()]
    for k, part in enumerate(parts):
        key, sep, value = part.partition("=")
        if not sep:
            if k >= len(names):
                raise ValueError(f"too many values for {family}")
            key, value = names[k], part
        key = key.strip()
        if key not in names:
            raise ValueError(f"{family} takes {', '.join(names) or 'no parameters'}, got {key!r}")
        out[key] = float(value)
    missing = [n for n in names if n not in out]
    if missing:
        raise ValueError(f"{family} needs {', '.join(missing)}")
    return CopulaModel.from_params(family, dim=2, **out)


def cmd_copula_grid(args):
    try:
        model = parse_copula_params(args.family, args.params)
    except (ValueError, CmcmError) as exc:
        raise CliError(EXIT_CONFIG, f"invalid copula: {exc}") from None
    _prepare_out(args.out, args.force, is_dir=False)
    try:
        with atomic_writer(args.out) as fh:
            write_density_grid(model, fh)
    except CmcmError as exc:
        raise CliError(EXIT_CONFIG, f"cannot evaluate density: {exc}") from None
    print(f"wrote 101x101 density grid to {args.out}")
    return EXIT_OK


# -- entry point -------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="cmcm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"cmcm {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--spec", required=True, help="JSON dataset spec")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, help="override the spec seed")
    p.add_argument("--force", action="store_true", help="overwrite an existing directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model (or a grid if the config has lists)")
    _add_train_flags(p, grid=False)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grid", help="grid search over the hyperparameter grids")
    _add_train_flags(p, grid=True)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("eval", help="AUROC/AUPR with bootstrap intervals")
    p.add_argument("--run", required=True, help="run directory (grid runs use the best point)")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="test", help="split to score (default: test)")
    p.add_argument("--iters", type=int, default=1000, help="bootstrap iterations (default: 1000)")
    p.add_argument("--level", type=float, default=0.95, help="interval level (default: 0.95)")
    p.add_argument("--seed", type=int, help="bootstrap and imputation seed (default: CMCM_SEED or 0)")
    p.add_argument("--task", default="synthetic", help="task name for the report (default: synthetic)")
    p.add_argument("--out", help="metrics file (default: <run>/metrics.csv)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("copula-grid", help="export a bivariate copula density grid")
    p.add_argument("--family", required=True, help="clayton, frank, gumbel, gaussian, studentt or independence")
    p.add_argument("--params", default="", help="e.g. 'alpha=2', 'rho=0.5', 'rho=0.5,nu=4'")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--force", action="store_true", help="overwrite an existing file")
    p.set_defaults(func=cmd_copula_grid)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"cmcm {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"cmcm {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
