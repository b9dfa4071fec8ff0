"""Command-line entry point: generate, train, tune, evaluate, saliency, plot."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import parse_flat_config
from .errors import DataError, NumericError, UsageError, VitalgateError
from .evaluation import (
    NestedCvConfig,
    SegmentCache,
    derive_seed,
    inner_objective,
    read_roc_csv,
    run_nested_cv,
    write_report,
)
from .hyperopt import format_hyperparams, optimize, parse_hyperparams, write_trials
from .plots import roc_svg
from .predictors import FAMILIES, ModelCheckpoint, train_predictor
from .saliency import ALL_STEPS, activation_saliency, input_saliency, n_layers
from .synthgen import GeneratorConfig, generate_to_dir
from .timeseries import (
    Factor,
    apply_normalization,
    compute_normalization,
    extract_event_segments,
    load_dataset,
)

log = logging.getLogger("vitalgate")

FACTOR_NAMES = [f.value for f in Factor]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- hashing and manifests


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def sha256_tree(root: str | Path) -> str:
    """Hash of every file under ``root`` (relative path and content, sorted)."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(p.relative_to(root).as_posix().encode() + b"\0")
        h.update(bytes.fromhex(sha256_file(p)))
    return h.hexdigest()


class RunManifest:
    """What ran, on which inputs, and the hash of every file it wrote."""

    FILENAME = "manifest.json"

    def __init__(self, argv, config_path=None, data_path=None, seeds=None):
        self.argv = list(argv)
        self.config_sha256 = sha256_file(config_path) if config_path else None
        self.dataset_sha256 = sha256_tree(data_path) if data_path else None
        self.seeds = dict(seeds or {})
        self.artifacts: dict[str, str] = {}
        self._t0 = time.perf_counter()
        self.wall_clock_seconds = None

    def add(self, *paths) -> None:
        for p in paths:
            self.artifacts[str(p)] = sha256_file(p)

    def to_dict(self) -> dict:
        return {
            "argv": self.argv,
            "config_sha256": self.config_sha256,
            "dataset_sha256": self.dataset_sha256,
            "seeds": self.seeds,
            "artifacts": dict(sorted(self.artifacts.items())),
            "wall_clock_seconds": self.wall_clock_seconds,
            "version": __version__,
        }

    def write(self, path: str | Path) -> Path:
        self.wall_clock_seconds = round(time.perf_counter() - self._t0, 3)
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1) + "\n")
        return path


def _manifest_path(out: Path) -> Path:
    return out / RunManifest.FILENAME if out.is_dir() else out.with_name(out.name + ".manifest.json")


# -- shared loaders


def _read_config(path) -> dict[str, str]:
    if path is None:
        return {}
    try:
        return parse_flat_config(Path(path).read_text())
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc.strerror}") from None


def _experiment_config(args) -> NestedCvConfig:
    cfg = NestedCvConfig.from_mapping(_read_config(args.config))
    overrides = {}
    if getattr(args, "budget", None) is not None:
        overrides["budget"] = args.budget
    if getattr(args, "jobs", None) is not None:
        overrides["jobs"] = args.jobs
    return replace(cfg, **overrides) if overrides else cfg


def _load(path):
    if not Path(path).is_dir():
        raise DataError(f"dataset directory {path} not found")
    records = load_dataset(path)
    if not records:
        raise DataError(f"no patient records under {path}")
    return records


# -- subcommands


def cmd_generate(args, manifest: RunManifest) -> list[Path]:
    kv = _read_config(args.config)
    cfg = GeneratorConfig.from_mapping(kv)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    manifest.seeds["generator"] = cfg.seed
    out = Path(args.out)
    generate_to_dir(cfg, out)
    (out / "generator.cfg").write_text(cfg.to_text())
    return sorted(p for p in out.rglob("*") if p.is_file() and p.name != RunManifest.FILENAME)


def cmd_train(args, manifest: RunManifest) -> list[Path]:
    records = _load(args.data)
    factor = Factor(args.factor)
    hp = parse_hyperparams(Path(args.hp).read_text())
    exp = _experiment_config(args)
    ids = sorted(r.patient_id for r in records)
    candidates = [r.patient_id for r in records if extract_event_segments(r, factor)]
    if len(candidates) < 2:
        raise DataError(f"need at least two patients with {factor.value} events")
    val_id = args.val_patient or candidates[int(np.random.default_rng(derive_seed(args.seed, 3)).integers(len(candidates)))]
    if val_id not in ids:
        raise DataError(f"unknown validation patient {val_id!r}")
    fit = [r for r in records if r.patient_id != val_id]
    stats = compute_normalization(fit)
    seg = lambda recs: [s for r in recs for s in extract_event_segments(apply_normalization(r, stats), factor)]
    manifest.seeds["train"] = args.seed
    ckpt = train_predictor(args.family, factor, seg(fit), seg([r for r in records if r.patient_id == val_id]), hp,
                           args.seed, exp.train, stats)
    ckpt.training["validation_patient"] = val_id
    return [ckpt.save(args.out)]


def cmd_tune(args, manifest: RunManifest) -> list[Path]:
    records = _load(args.data)
    factor = Factor(args.factor)
    exp = _experiment_config(args)
    ids = sorted(r.patient_id for r in records)
    splits = [(tuple(p for p in ids if p != held), held) for held in ids]
    objective = inner_objective(SegmentCache(records), splits, args.family, factor, exp.train, derive_seed(args.seed, 1),
                                exp.jobs)
    space = exp.space(args.family)
    manifest.seeds["tune"] = args.seed
    res = optimize(objective, space, exp.budget, derive_seed(args.seed, 2), exp.n_initial)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trials = write_trials(res.history, space, out / "trials.csv")
    best = out / f"best_hp.{factor.value}.{args.family}"
    best.write_text(format_hyperparams(res.best.point))
    return [trials, best]


def cmd_evaluate(args, manifest: RunManifest) -> list[Path]:
    records = _load(args.data)
    exp = _experiment_config(args)
    factors = [Factor(f) for f in (args.factor or FACTOR_NAMES)]
    families = args.family or list(FAMILIES)
    manifest.seeds["evaluate"] = args.seed
    results = []
    for factor in factors:
        for family in families:
            t0 = time.perf_counter()
            results.append(run_nested_cv(records, factor, family, exp, args.seed))
            log.info("%s %s AUC %.4f (%.0fs)", factor.value, family, results[-1].auc, time.perf_counter() - t0)
    return write_report(results, args.out, exp)


def cmd_saliency(args, manifest: RunManifest) -> list[Path]:
    ckpt = ModelCheckpoint.load(args.ckpt)
    records = {r.patient_id: r for r in _load(args.data)}
    pid, _, rest = args.segment.partition(":")
    if pid not in records:
        raise DataError(f"segment {args.segment!r}: unknown patient")
    rec = records[pid] if ckpt.normalization is None else apply_normalization(records[pid], ckpt.normalization)
    segs = {s.segment_id: s for s in extract_event_segments(rec, ckpt.factor)}
    if args.segment not in segs:
        raise DataError(f"segment {args.segment!r} not found (factor {ckpt.factor.value})")
    t = ALL_STEPS if args.t == ALL_STEPS else int(args.t)
    try:
        if args.source is None and args.target is None:
            smap = input_saliency(ckpt, segs[args.segment], t, signed=args.signed)
        else:
            target = n_layers(ckpt.predictor) - 1 if args.target is None else args.target
            smap = activation_saliency(ckpt, segs[args.segment], args.source or 0, target, t, args.unit, args.signed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    return [smap.to_csv(out.with_suffix(".csv")), smap.to_svg(out.with_suffix(".svg"))]


def cmd_plot(args, manifest: RunManifest) -> list[Path]:
    src = Path(args.report)
    out = Path(args.out or args.report)
    out.mkdir(parents=True, exist_ok=True)
    curves: dict[str, dict] = {}
    for p in sorted(src.glob("roc_*_*.csv")):
        _, factor, family = p.stem.split("_", 2)
        fpr, tpr, _ = read_roc_csv(p)
        auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1])) / 2.0)
        curves.setdefault(factor, {})[family.upper()] = (fpr, tpr, auc)
    if not curves:
        raise DataError(f"no roc_<factor>_<family>.csv files in {src}")
    paths = []
    for factor, c in curves.items():
        path = out / f"roc_{factor}.svg"
        path.write_text(roc_svg(dict(sorted(c.items(), reverse=True)), f"{factor} ROC"))
        paths.append(path)
    return paths


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "tune": cmd_tune,
    "evaluate": cmd_evaluate,
    "saliency": cmd_saliency,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vitalgate", description="Per-timestep ICU event classifiers on synthetic vital signs.")
    p.add_argument("--version", action="version", version=f"vitalgate {__version__}")
    p.add_argument("--from-manifest", metavar="FILE", help="re-run the command recorded in a manifest")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--config", help="generator config (key = value); defaults apply when omitted")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--seed", type=int, help="override the config seed")

    def experiment_flags(q, budget=False):
        q.add_argument("--config", help="experiment config (key = value): training, budget and search-space keys")
        q.add_argument("--jobs", type=int, help="parallel workers over inner splits (default 1)")
        if budget:
            q.add_argument("--budget", type=int, help="hyperparameter trials per search")

    t = sub.add_parser("train", help="train one predictor and write a checkpoint")
    t.add_argument("--family", required=True, choices=FAMILIES)
    t.add_argument("--factor", required=True, choices=FACTOR_NAMES)
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--hp", required=True, help="hyperparameter file, e.g. best_hp.<factor>.<family>")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--val-patient", help="early-stopping patient (default: seeded choice)")
    t.add_argument("--out", required=True, help="checkpoint path")
    experiment_flags(t)

    u = sub.add_parser("tune", help="Bayesian hyperparameter search with leave-one-patient-out validation")
    u.add_argument("--family", required=True, choices=FAMILIES)
    u.add_argument("--factor", required=True, choices=FACTOR_NAMES)
    u.add_argument("--data", required=True)
    u.add_argument("--seed", type=int, default=0)
    u.add_argument("--out", required=True, help="directory for trials.csv and best_hp.<factor>.<family>")
    experiment_flags(u, budget=True)

    e = sub.add_parser("evaluate", help="nested cross-validation and ROC report")
    e.add_argument("--data", required=True)
    e.add_argument("--factor", action="append", choices=FACTOR_NAMES, help="repeatable; default all")
    e.add_argument("--family", action="append", choices=FAMILIES, help="repeatable; default both")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True, help="report directory")
    experiment_flags(e, budget=True)

    s = sub.add_parser("saliency", help="gradient saliency map for one event segment")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--segment", required=True, help="segment id, <patient>:<factor>:<index>")
    s.add_argument("--t", required=True, help="output timestep within the segment, or 'all'")
    s.add_argument("--source", type=int, help="source layer (default 0, the input)")
    s.add_argument("--target", type=int, help="target layer (default: output)")
    s.add_argument("--unit", type=int, default=0, help="target unit")
    s.add_argument("--signed", action="store_true", help="keep the sign of the derivatives")
    s.add_argument("--out", required=True, help="output stem; writes <stem>.csv and <stem>.svg")

    pl = sub.add_parser("plot", help="redraw ROC figures from roc_<factor>_<family>.csv files")
    pl.add_argument("--report", required=True, help="directory holding the ROC CSVs")
    pl.add_argument("--out", help="output directory (default: --report)")
    return p


def _run(argv: list[str]) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.from_manifest:
        if args.command:
            raise UsageError("--from-manifest takes no subcommand")
        try:
            recorded = json.loads(Path(args.from_manifest).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read manifest {args.from_manifest}: {exc}") from None
        return _replay(recorded, args.verbose)
    if not args.command:
        parser.print_usage(sys.stderr)
        raise UsageError("a subcommand is required")
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    manifest = RunManifest(argv, getattr(args, "config", None), getattr(args, "data", None))
    paths = COMMANDS[args.command](args, manifest)
    manifest.add(*paths)
    out = Path(args.out or args.report) if args.command == "plot" else Path(args.out)
    manifest.write(_manifest_path(out))
    return 0


def _replay(recorded: dict, verbose: bool) -> int:
    argv = list(recorded["argv"])
    args = build_parser().parse_args(argv)
    if recorded.get("config_sha256") and sha256_file(args.config) != recorded["config_sha256"]:
        raise DataError("config file changed since the manifest was written")
    if recorded.get("dataset_sha256") and sha256_tree(args.data) != recorded["dataset_sha256"]:
        raise DataError("dataset changed since the manifest was written")
    return _run((["-v"] if verbose else []) + argv)


def dispatch(argv: list[str] | None = None) -> int:
    """Run one command; returns 0, or 1/2/3 for usage, data and numeric errors."""
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        return _run(argv)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except VitalgateError as exc:
        print(f"vitalgate: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError, KeyError) as exc:
        print(f"vitalgate: {exc}", file=sys.stderr)
        return DataError.exit_code
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"vitalgate: numeric failure: {exc}", file=sys.stderr)
        return NumericError.exit_code


def main() -> None:
    sys.exit(dispatch())
