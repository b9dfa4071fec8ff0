"""Data model, on-disk dataset layout, normalisation and event segmentation.

A dataset is a directory holding one subdirectory per patient::

    <root>/<patient_id>/signals.csv      t,hr,sys_abp,dia_abp,sys_icp
    <root>/<patient_id>/annotations.csv  factor,start,end

Signals are sampled at 1 Hz; ``t`` must run 0, 1, ..., n-1.  Annotation
intervals are half-open ``[start, end)`` in timesteps.
"""

from __future__ import annotations

import csv
import enum
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError

SIGNALS_FILE = "signals.csv"
ANNOTATIONS_FILE = "annotations.csv"


class ChannelKind(str, enum.Enum):
    HR = "HR"
    SysABP = "SysABP"
    DiaABP = "DiaABP"
    SysICP = "SysICP"


class Factor(str, enum.Enum):
    BS = "BS"
    DT = "DT"
    SC = "SC"
    X = "X"


CHANNEL_ORDER = (ChannelKind.HR, ChannelKind.SysABP, ChannelKind.DiaABP, ChannelKind.SysICP)
SIGNAL_COLUMNS = ("t", "hr", "sys_abp", "dia_abp", "sys_icp")
ANNOTATION_COLUMNS = ("factor", "start", "end")
_COLUMN_OF = dict(zip(CHANNEL_ORDER, SIGNAL_COLUMNS[1:]))


def _frozen(values, dtype=np.float64) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class AnnotationInterval:
    factor: Factor
    start: int
    end: int

    def __post_init__(self):
        object.__setattr__(self, "factor", Factor(self.factor))
        if not (0 <= self.start < self.end):
            raise DataError(f"invalid interval {self.factor.value} [{self.start}, {self.end})")

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    channels: Mapping[ChannelKind, np.ndarray]
    annotations: tuple[AnnotationInterval, ...] = ()

    def __post_init__(self):
        chans = {}
        for kind in CHANNEL_ORDER:
            if kind not in self.channels:
                raise DataError(f"{self.patient_id}: missing channel {kind.value}")
            chans[kind] = _frozen(self.channels[kind])
        lengths = {len(v) for v in chans.values()}
        if len(lengths) != 1:
            raise DataError(f"{self.patient_id}: channel lengths differ: {sorted(lengths)}")
        for kind, arr in chans.items():
            if not np.all(np.isfinite(arr)):
                raise DataError(f"{self.patient_id}: non-finite sample in {kind.value}")
        object.__setattr__(self, "channels", chans)
        anns = tuple(sorted(self.annotations, key=lambda a: (a.factor.value, a.start)))
        _check_annotations(anns, len(self), self.patient_id)
        object.__setattr__(self, "annotations", anns)

    def __len__(self) -> int:
        return len(next(iter(self.channels.values())))

    def __getitem__(self, kind: ChannelKind | str) -> np.ndarray:
        return self.channels[ChannelKind(kind)]

    def intervals(self, factor: Factor | str) -> list[AnnotationInterval]:
        factor = Factor(factor)
        return [a for a in self.annotations if a.factor is factor]

    def __eq__(self, other):
        if not isinstance(other, PatientRecord):
            return NotImplemented
        return (
            self.patient_id == other.patient_id
            and self.annotations == other.annotations
            and all(np.array_equal(self.channels[k], other.channels[k]) for k in CHANNEL_ORDER)
        )

    __hash__ = None


def _check_annotations(anns: Sequence[AnnotationInterval], n: int, where: str) -> None:
    last_end: dict[Factor, int] = {}
    for a in anns:
        if a.end > n:
            raise DataError(f"{where}: interval {a.factor.value} [{a.start}, {a.end}) exceeds length {n}")
        if a.start < last_end.get(a.factor, 0):
            raise DataError(f"{where}: overlapping {a.factor.value} intervals at {a.start}")
        last_end[a.factor] = a.end


@dataclass(frozen=True)
class NormalizationStats:
    bp_mean: float
    bp_std: float
    hr_mean: float
    hr_std: float
    icp_mean: float
    icp_std: float

    def __post_init__(self):
        for name in ("bp_std", "hr_std", "icp_std"):
            if not getattr(self, name) > 0:
                raise DataError(f"{name} must be positive")

    def for_channel(self, kind: ChannelKind) -> tuple[float, float]:
        if kind in (ChannelKind.SysABP, ChannelKind.DiaABP):
            return self.bp_mean, self.bp_std
        if kind is ChannelKind.HR:
            return self.hr_mean, self.hr_std
        return self.icp_mean, self.icp_std

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("bp_mean", "bp_std", "hr_mean", "hr_std", "icp_mean", "icp_std")}

    @classmethod
    def from_dict(cls, d: Mapping) -> "NormalizationStats":
        return cls(**{k: float(d[k]) for k in ("bp_mean", "bp_std", "hr_mean", "hr_std", "icp_mean", "icp_std")})


@dataclass(frozen=True)
class EventSegment:
    """One annotated event plus its flanking context.

    ``offset`` is the segment start within the source record; ``event_span``
    is local to the segment.
    """

    patient_id: str
    factor: Factor
    index: int
    offset: int
    inputs: Mapping[ChannelKind, np.ndarray]
    targets: np.ndarray
    event_span: tuple[int, int]

    def __post_init__(self):
        object.__setattr__(self, "inputs", {k: _frozen(self.inputs[k]) for k in CHANNEL_ORDER})
        object.__setattr__(self, "targets", _frozen(self.targets, dtype=np.int8))
        if any(len(v) != len(self.targets) for v in self.inputs.values()):
            raise DataError("segment inputs and targets differ in length")

    def __len__(self) -> int:
        return len(self.targets)

    @property
    def segment_id(self) -> str:
        return f"{self.patient_id}:{self.factor.value}:{self.index}"


# -- file format


def _fmt(v: float) -> str:
    s = f"{v:.6f}".rstrip("0")
    return s + "0" if s.endswith(".") else s


def write_record(record: PatientRecord, root: str | os.PathLike) -> Path:
    pdir = Path(root) / record.patient_id
    pdir.mkdir(parents=True, exist_ok=True)
    cols = [record[k] for k in CHANNEL_ORDER]
    with open(pdir / SIGNALS_FILE, "w", newline="") as fh:
        fh.write(",".join(SIGNAL_COLUMNS) + "\n")
        for t in range(len(record)):
            fh.write(str(t) + "," + ",".join(_fmt(c[t]) for c in cols) + "\n")
    with open(pdir / ANNOTATIONS_FILE, "w", newline="") as fh:
        fh.write(",".join(ANNOTATION_COLUMNS) + "\n")
        for a in sorted(record.annotations, key=lambda a: (a.start, a.factor.value)):
            fh.write(f"{a.factor.value},{a.start},{a.end}\n")
    return pdir


def write_dataset(records: Iterable[PatientRecord], root: str | os.PathLike) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for rec in records:
        write_record(rec, root)
    return root


def _read_signals(path: Path) -> dict[ChannelKind, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != SIGNAL_COLUMNS:
            raise DataError(f"{path}:1: expected header {','.join(SIGNAL_COLUMNS)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(SIGNAL_COLUMNS):
                raise DataError(f"{path}:{lineno}: expected {len(SIGNAL_COLUMNS)} fields, got {len(row)}")
            try:
                t = int(row[0])
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad timestep {row[0]!r}") from None
            if t != len(rows):
                raise DataError(f"{path}:{lineno}: timestep {t} out of sequence (expected {len(rows)})")
            vals = []
            for col, cell in zip(SIGNAL_COLUMNS[1:], row[1:]):
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"{path}:{lineno}: column {col}: bad number {cell!r}") from None
                if not math.isfinite(v):
                    raise DataError(f"{path}:{lineno}: column {col}: non-finite value {cell!r}")
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no samples")
    arr = np.asarray(rows, dtype=np.float64)
    return {kind: arr[:, i] for i, kind in enumerate(CHANNEL_ORDER)}


def _read_annotations(path: Path, n: int) -> list[AnnotationInterval]:
    out: list[AnnotationInterval] = []
    last_end: dict[Factor, tuple[int, int]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != ANNOTATION_COLUMNS:
            raise DataError(f"{path}:1: expected header {','.join(ANNOTATION_COLUMNS)}")
        parsed = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                factor = Factor(row[0].strip())
            except ValueError:
                raise DataError(f"{path}:{lineno}: unknown factor {row[0]!r}") from None
            try:
                start, end = int(row[1]), int(row[2])
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad interval bounds {row[1:]!r}") from None
            if not (0 <= start < end <= n):
                raise DataError(f"{path}:{lineno}: invalid interval [{start}, {end}) for length {n}")
            parsed.append((factor, start, end, lineno))
    for factor, start, end, lineno in sorted(parsed, key=lambda p: (p[0].value, p[1])):
        prev = last_end.get(factor)
        if prev is not None and start < prev[0]:
            raise DataError(f"{path}:{lineno}: {factor.value} interval overlaps the one on line {prev[1]}")
        last_end[factor] = (end, lineno)
        out.append(AnnotationInterval(factor, start, end))
    return out


def load_record(pdir: str | os.PathLike) -> PatientRecord:
    pdir = Path(pdir)
    channels = _read_signals(pdir / SIGNALS_FILE)
    n = len(channels[ChannelKind.HR])
    anns = _read_annotations(pdir / ANNOTATIONS_FILE, n)
    return PatientRecord(pdir.name, channels, tuple(anns))


def load_dataset(path: str | os.PathLike) -> list[PatientRecord]:
    """Load every patient directory under ``path``, sorted by patient id."""
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"{root}: not a directory")
    pdirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / SIGNALS_FILE).exists())
    if not pdirs:
        raise DataError(f"{root}: no patient directories containing {SIGNALS_FILE}")
    return [load_record(p) for p in pdirs]


# -- normalisation


def compute_normalization(records: Sequence[PatientRecord]) -> NormalizationStats:
    """Population mean/std; the two ABP channels share one pooled estimate."""
    if not records:
        raise DataError("compute_normalization needs at least one record")

    def pooled(kinds):
        x = np.concatenate([r[k] for r in records for k in kinds])
        if x.size == 0:
            raise DataError("empty channel")
        mean = float(np.mean(x))
        std = float(np.std(x))
        if not std > 0:
            raise DataError(f"zero variance in {'+'.join(k.value for k in kinds)}")
        return mean, std

    bp = pooled((ChannelKind.SysABP, ChannelKind.DiaABP))
    hr = pooled((ChannelKind.HR,))
    icp = pooled((ChannelKind.SysICP,))
    return NormalizationStats(bp[0], bp[1], hr[0], hr[1], icp[0], icp[1])


def apply_normalization(record: PatientRecord, stats: NormalizationStats) -> PatientRecord:
    chans = {}
    for kind in CHANNEL_ORDER:
        mean, std = stats.for_channel(kind)
        chans[kind] = (record[kind] - mean) / std
    return PatientRecord(record.patient_id, chans, record.annotations)


def invert_normalization(record: PatientRecord, stats: NormalizationStats) -> PatientRecord:
    chans = {}
    for kind in CHANNEL_ORDER:
        mean, std = stats.for_channel(kind)
        chans[kind] = record[kind] * std + mean
    return PatientRecord(record.patient_id, chans, record.annotations)


# -- segmentation and targets


def extract_event_segments(record: PatientRecord, factor: Factor | str) -> list[EventSegment]:
    """Cut one segment per annotation of ``factor`` with event-length context on both sides.

    Context is clipped at the record bounds. Annotations of other factors
    falling inside the context are ignored (target stays 0).
    """
    factor = Factor(factor)
    n = len(record)
    out = []
    for i, ann in enumerate(record.intervals(factor)):
        L = ann.length
        lo, hi = max(0, ann.start - L), min(n, ann.end + L)
        targets = np.zeros(hi - lo, dtype=np.int8)
        targets[ann.start - lo : ann.end - lo] = 1
        out.append(
            EventSegment(
                patient_id=record.patient_id,
                factor=factor,
                index=i,
                offset=lo,
                inputs={k: record[k][lo:hi] for k in CHANNEL_ORDER},
                targets=targets,
                event_span=(ann.start - lo, ann.end - lo),
            )
        )
    return out


def delay_targets(targets, d: int) -> np.ndarray:
    """Shift targets ``d`` steps later, zero-filling the first ``d`` entries."""
    y = np.asarray(targets)
    if d < 0:
        raise ValueError("delay must be non-negative")
    if d >= len(y):
        raise ValueError(f"delay {d} >= sequence length {len(y)}")
    out = np.zeros_like(y)
    out[d:] = y[: len(y) - d]
    return out
