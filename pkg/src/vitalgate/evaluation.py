"""ROC/AUC, nested cross-validation plans and the end-to-end experiment loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .config import parse_number
from .errors import DataError, NumericError
from .hyperopt import MLP_SPACE, RNN_SPACE, SearchSpace, TrialRecord, optimize, write_trials
from .plots import roc_svg
from .predictors import (
    FAMILIES,
    MLP_FAMILY,
    RNN_FAMILY,
    TrainConfig,
    aligned_scores,
    train_mlp,
    train_rnn,
)
from .timeseries import (
    EventSegment,
    Factor,
    NormalizationStats,
    PatientRecord,
    apply_normalization,
    compute_normalization,
    extract_event_segments,
)

log = logging.getLogger(__name__)


# -- ROC


@dataclass(frozen=True)
class RocCurve:
    """Operating points from (0, 0) to (1, 1); the first threshold is +inf."""

    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float

    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist(), self.thresholds.tolist()))

    def fpr_at_tpr(self, target: float) -> tuple[float, float]:
        """(fpr, threshold) of the first operating point reaching ``target`` TPR."""
        i = int(np.argmax(self.tpr >= target - 1e-12))
        return float(self.fpr[i]), float(self.thresholds[i])


def roc_auc(scores, labels) -> RocCurve:
    """ROC with one operating point per distinct score; tied scores flip together.

    AUC is the trapezoidal area, which equals P(s+ > s-) + P(s+ = s-)/2.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length ({s.size} vs {y.size})")
    if not np.all(np.isfinite(s)):
        raise NumericError("non-finite scores")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise NumericError("AUC is undefined with a single class")
    order = np.argsort(-s, kind="mergesort")
    s, pos = s[order], pos[order]
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(pos)[last]
    fp = (last + 1) - tp
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    thr = np.r_[np.inf, s[last]]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1])) / 2.0)
    return RocCurve(fpr, tpr, thr, auc)


# -- cross-validation plan


@dataclass(frozen=True)
class CvPlan:
    """Outer k-fold partition of patients with leave-one-patient-out inner splits."""

    patient_ids: tuple[str, ...]
    outer: tuple[tuple[str, ...], ...]

    def outer_train(self, k: int) -> tuple[str, ...]:
        test = set(self.outer[k])
        return tuple(p for p in self.patient_ids if p not in test)

    def inner(self, k: int) -> list[tuple[tuple[str, ...], str]]:
        train = self.outer_train(k)
        return [(tuple(p for p in train if p != held), held) for held in train]

    def all_splits(self):
        """Every (train ids, evaluation ids) pair of the plan."""
        for k, test in enumerate(self.outer):
            yield self.outer_train(k), test
            for train, held in self.inner(k):
                yield train, (held,)


def build_cv_plan(patient_ids: Sequence[str], n_outer: int = 3, seed: int = 0) -> CvPlan:
    ids = sorted(patient_ids)
    if len(set(ids)) != len(ids):
        raise DataError("duplicate patient ids")
    if len(ids) < n_outer:
        raise DataError(f"{len(ids)} patients cannot fill {n_outer} folds")
    perm = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    base, extra = divmod(len(ids), n_outer)
    folds, start = [], 0
    for k in range(n_outer):
        size = base + (1 if k < extra else 0)
        folds.append(tuple(sorted(shuffled[start : start + size])))
        start += size
    return CvPlan(tuple(ids), tuple(folds))


# -- experiment configuration


@dataclass(frozen=True)
class NestedCvConfig:
    budget: int = 25
    n_initial: int = 5
    n_outer: int = 3
    train: TrainConfig = TrainConfig()
    mlp_space: SearchSpace = MLP_SPACE
    rnn_space: SearchSpace = RNN_SPACE
    jobs: int = 1

    def space(self, family: str) -> SearchSpace:
        return self.mlp_space if family == MLP_FAMILY else self.rnn_space

    # flat-file keys, besides the TrainConfig fields:
    #   budget, n_initial, n_outer, jobs, mlp_depth_max, mlp_hidden_max,
    #   mlp_l_max, mlp_r_max, rnn_hidden_max
    @classmethod
    def from_mapping(cls, kv: Mapping[str, str]) -> "NestedCvConfig":
        cfg = cls()
        train_kw, top_kw = {}, {}
        mlp, rnn = MLP_SPACE, RNN_SPACE
        train_keys = set(TrainConfig.__dataclass_fields__)
        for key, raw in kv.items():
            try:
                val = parse_number(raw)
            except ValueError:
                raise DataError(f"bad value for {key}: {raw!r}") from None
            if key in train_keys:
                train_kw[key] = val
            elif key in ("budget", "n_initial", "n_outer", "jobs"):
                top_kw[key] = int(val)
            elif key.startswith("mlp_") and key.endswith("_max"):
                mlp = mlp.replace(key[4:-4], high=val)
            elif key.startswith("rnn_") and key.endswith("_max"):
                rnn = rnn.replace(key[4:-4], high=val)
            else:
                raise DataError(f"unknown experiment config key {key!r}")
        return replace(cfg, train=TrainConfig(**train_kw), mlp_space=mlp, rnn_space=rnn, **top_kw)


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in keys)).generate_state(1)[0])


def _family_index(family: str) -> int:
    return FAMILIES.index(family)


def _factor_index(factor: Factor) -> int:
    return list(Factor).index(factor)


# -- data preparation


class SegmentCache:
    """Normalised event segments per (training patients, factor), computed once."""

    def __init__(self, records: Sequence[PatientRecord]):
        self.records = {r.patient_id: r for r in records}
        self._stats: dict[tuple[str, ...], NormalizationStats] = {}
        self._segs: dict[tuple, list[EventSegment]] = {}

    def stats(self, train_ids: Sequence[str]) -> NormalizationStats:
        key = tuple(sorted(train_ids))
        if key not in self._stats:
            self._stats[key] = compute_normalization([self.records[p] for p in key])
        return self._stats[key]

    def segments(self, train_ids: Sequence[str], ids: Sequence[str], factor: Factor) -> list[EventSegment]:
        stats_key = tuple(sorted(train_ids))
        out = []
        for pid in ids:
            key = (stats_key, pid, factor)
            if key not in self._segs:
                rec = apply_normalization(self.records[pid], self.stats(stats_key))
                self._segs[key] = extract_event_segments(rec, factor)
            out.extend(self._segs[key])
        return out


def train_family(family: str, factor, train, val, hp, seed, cfg: TrainConfig):
    trainer = train_mlp if family == MLP_FAMILY else train_rnn
    return trainer(factor, train, val, hp, seed, cfg)


def score_segments(predictor, segments: Sequence[EventSegment]) -> tuple[np.ndarray, np.ndarray]:
    pairs = [aligned_scores(predictor, s) for s in segments]
    if not pairs:
        return np.empty(0), np.empty(0, dtype=np.int8)
    return np.concatenate([p for p, _ in pairs]), np.concatenate([y for _, y in pairs]).astype(np.int8)


def _inner_split_auc(family, factor, train, val, hp, seed, cfg) -> float | None:
    if not val or not train:
        return None
    res = train_family(family, factor, train, val, hp, seed, cfg)
    scores, labels = score_segments(res.predictor, val)
    if labels.size == 0 or labels.min() == labels.max():
        return None
    return roc_auc(scores, labels).auc


def inner_objective(cache: SegmentCache, splits, family: str, factor: Factor, cfg: TrainConfig, seed: int, jobs: int = 1):
    """Objective for the optimiser: negated mean validation AUC over the inner splits."""

    prepared = [(cache.segments(tr, tr, factor), cache.segments(tr, (held,), factor)) for tr, held in splits]
    counter = {"n": 0}

    def objective(hp: dict) -> float:
        trial = counter["n"]
        counter["n"] += 1
        args = [(family, factor, tr, va, hp, derive_seed(seed, trial, i), cfg) for i, (tr, va) in enumerate(prepared)]
        if jobs > 1:
            from joblib import Parallel, delayed

            aucs = Parallel(n_jobs=jobs)(delayed(_inner_split_auc)(*a) for a in args)
        else:
            aucs = [_inner_split_auc(*a) for a in args]
        aucs = [a for a in aucs if a is not None]
        if not aucs:
            raise DataError("no inner split had a scorable validation patient")
        return -float(np.mean(aucs))

    return objective


# -- nested CV


@dataclass
class FoldResult:
    fold: int
    test_ids: tuple[str, ...]
    holdout_id: str
    best_hp: dict
    best_objective: float
    trials: list[TrialRecord]
    scores: np.ndarray
    labels: np.ndarray


@dataclass
class NestedCvResult:
    factor: Factor
    family: str
    folds: list[FoldResult]
    roc: RocCurve

    @property
    def auc(self) -> float:
        return self.roc.auc


def _pick_holdout(cache: SegmentCache, train_ids, factor, seed) -> str:
    candidates = [p for p in train_ids if extract_event_segments(cache.records[p], factor)]
    if len(candidates) < 2:
        raise DataError(f"fewer than two training patients have {factor.value} events")
    return candidates[int(np.random.default_rng(seed).integers(len(candidates)))]


def run_outer_fold(cache, plan: CvPlan, k: int, factor: Factor, family: str, config: NestedCvConfig, seed: int) -> FoldResult:
    train_ids = plan.outer_train(k)
    objective = inner_objective(cache, plan.inner(k), family, factor, config.train, derive_seed(seed, 1), config.jobs)
    opt = optimize(objective, config.space(family), config.budget, derive_seed(seed, 2), config.n_initial)
    hp = opt.best.point
    holdout = _pick_holdout(cache, train_ids, factor, derive_seed(seed, 3))
    fit_ids = tuple(p for p in train_ids if p != holdout)
    res = train_family(
        family, factor,
        cache.segments(fit_ids, fit_ids, factor),
        cache.segments(fit_ids, (holdout,), factor),
        hp, derive_seed(seed, 4), config.train,
    )
    scores, labels = score_segments(res.predictor, cache.segments(fit_ids, plan.outer[k], factor))
    return FoldResult(k, plan.outer[k], holdout, hp, opt.best.objective, opt.history, scores, labels)


def run_nested_cv(
    records: Sequence[PatientRecord],
    factor,
    family: str,
    config: NestedCvConfig = NestedCvConfig(),
    seed: int = 0,
    plan: CvPlan | None = None,
) -> NestedCvResult:
    """Hyperparameters chosen per outer fold on inner LOPO splits; AUC on the
    concatenated outer-test predictions."""
    factor = Factor(factor)
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    plan = plan or build_cv_plan([r.patient_id for r in records], config.n_outer, seed)
    cache = SegmentCache(records)
    folds = []
    for k in range(len(plan.outer)):
        fold_seed = derive_seed(seed, _factor_index(factor), _family_index(family), k)
        try:
            folds.append(run_outer_fold(cache, plan, k, factor, family, config, fold_seed))
        except (DataError, NumericError) as exc:
            raise type(exc)(f"{factor.value}/{family} outer fold {k + 1}: {exc}") from exc
        log.info("%s/%s fold %d: hp=%s inner AUC=%.4f", factor.value, family, k + 1, folds[-1].best_hp,
                 -folds[-1].best_objective)
    scores = np.concatenate([f.scores for f in folds])
    labels = np.concatenate([f.labels for f in folds])
    return NestedCvResult(factor, family, folds, roc_auc(scores, labels))


# -- reporting


def _hp_string(hp: Mapping) -> str:
    return ";".join(f"{k}={hp[k]!r}" for k in sorted(hp))


def write_roc_csv(roc: RocCurve, path: str | Path) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fpr", "tpr", "threshold"])
        for f, t, th in roc.points():
            w.writerow([repr(f), repr(t), repr(th)])
    return Path(path)


def read_roc_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return tuple(np.array([float(r[k]) for r in rows]) for k in ("fpr", "tpr", "threshold"))


def appendix_table(results: Sequence[NestedCvResult], family: str) -> str:
    """Per-fold optimal hyperparameters, one table per family (markdown)."""
    rows = [r for r in results if r.family == family]
    if not rows:
        return ""
    names = sorted(rows[0].folds[0].best_hp)
    out = [f"Optimal {family.upper()} hyperparameters.", "",
           "| Factor | Outer Fold | " + " | ".join(names) + " |",
           "|---|---|" + "---|" * len(names)]
    for r in rows:
        for f in r.folds:
            out.append(f"| {r.factor.value} | {f.fold + 1} | " + " | ".join(repr(f.best_hp[n]) for n in names) + " |")
    return "\n".join(out) + "\n"


def write_report(results: Sequence[NestedCvResult], outdir: str | Path, config: NestedCvConfig | None = None) -> list[Path]:
    """Write ROC CSVs, report.csv, per-fold trial logs, ROC SVGs and hyperparameter tables."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = []
    n_folds = max(len(r.folds) for r in results)
    for r in results:
        paths.append(write_roc_csv(r.roc, outdir / f"roc_{r.factor.value}_{r.family}.csv"))
        space = (config or NestedCvConfig()).space(r.family)
        for f in r.folds:
            paths.append(write_trials(f.trials, space, outdir / f"trials_{r.factor.value}_{r.family}_fold{f.fold + 1}.csv"))
    report = outdir / "report.csv"
    with open(report, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["factor", "family", "auc", *(f"fold{k + 1}_hyperparameters" for k in range(n_folds))])
        for r in results:
            w.writerow([r.factor.value, r.family, repr(r.auc), *(_hp_string(f.best_hp) for f in r.folds)])
    paths.append(report)
    for factor in dict.fromkeys(r.factor for r in results):
        curves = {r.family.upper(): (r.roc.fpr, r.roc.tpr, r.auc) for r in results if r.factor is factor}
        svg = outdir / f"roc_{factor.value}.svg"
        svg.write_text(roc_svg(curves, f"{factor.value} ROC"))
        paths.append(svg)
    tables = "\n".join(t for t in (appendix_table(results, fam) for fam in (RNN_FAMILY, MLP_FAMILY)) if t)
    hp_path = outdir / "hyperparameters.md"
    hp_path.write_text(tables)
    paths.append(hp_path)
    return paths


def read_report(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
