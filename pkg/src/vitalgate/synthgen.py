"""Seeded synthetic ICU vital-sign generator.

Every random draw goes through :class:`SplitMix64`, so a config (seed
included) fully determines the generated dataset.  Per patient the draw
order is: baselines, drift parameters, event plan, event signature
parameters (in event-start order), then the four noise streams.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .config import parse_flat_config
from .errors import DataError
from .timeseries import AnnotationInterval, ChannelKind, Factor, PatientRecord, write_dataset

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


class SplitMix64:
    """SplitMix64 stream: ``state += 0x9E3779B97F4A7C15`` then the standard mix.

    ``uniform`` maps the top 53 bits to [0, 1); ``normal`` uses Box-Muller
    on consecutive uniform pairs (cos branch first, then sin).
    """

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def next_u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * _GAMMA
            z = (z ^ (z >> np.uint64(30))) * _M1
            z = (z ^ (z >> np.uint64(27))) * _M2
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * int(_GAMMA)) & _MASK64
        return z

    def uniform(self, n: int | None = None, low: float = 0.0, high: float = 1.0):
        k = 1 if n is None else n
        u = (self.next_u64(k) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        u = low + (high - low) * u
        return float(u[0]) if n is None else u

    def integer(self, low: int, high: int) -> int:
        """Uniform integer in [low, high] inclusive."""
        return low + min(int(self.uniform() * (high - low + 1)), high - low)

    def normal(self, n: int | None = None, std: float = 1.0):
        k = 1 if n is None else n
        m = (k + 1) // 2
        u = self.uniform(2 * m)
        u1, u2 = 1.0 - u[0::2], u[1::2]
        rad = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * m)
        z[0::2] = rad * np.cos(2 * np.pi * u2)
        z[1::2] = rad * np.sin(2 * np.pi * u2)
        z = std * z[:k]
        return float(z[0]) if n is None else z


FACTORS = tuple(Factor)


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int = 1
    n_patients: int = 12
    record_length: int = 20000
    patient_prefix: str = "P"
    # events per 10,000 timesteps, per factor
    rate_BS: float = 3.0
    rate_DT: float = 1.5
    rate_SC: float = 2.0
    rate_X: float = 2.0
    # event duration (min, max) in timesteps
    duration_BS: tuple[int, int] = (30, 90)
    duration_DT: tuple[int, int] = (60, 240)
    duration_SC: tuple[int, int] = (60, 180)
    duration_X: tuple[int, int] = (60, 240)
    baseline_hr: tuple[float, float] = (60.0, 110.0)
    baseline_sys_abp: tuple[float, float] = (105.0, 150.0)
    baseline_dia_abp: tuple[float, float] = (55.0, 90.0)
    baseline_sys_icp: tuple[float, float] = (8.0, 20.0)
    # when set, SysABP baseline = DiaABP baseline + pulse pressure draw
    baseline_pulse_pressure: tuple[float, float] | None = None
    noise_hr: float = 2.0
    noise_sys_abp: float = 2.0
    noise_dia_abp: float = 1.5
    noise_sys_icp: float = 1.0
    min_gap: int = 10

    def __post_init__(self):
        if self.n_patients < 1 or self.record_length < 1:
            raise DataError("n_patients and record_length must be positive")
        for name in (f.name for f in fields(self)):
            v = getattr(self, name)
            if name.startswith(("duration_", "baseline_")) and v is not None:
                if not v[0] < v[1]:
                    raise DataError(f"{name}: min must be < max, got {v}")
            if name.startswith(("rate_", "noise_")) and v < 0:
                raise DataError(f"{name} must be >= 0")
        if any(self.duration(f)[0] < 1 for f in FACTORS):
            raise DataError("event durations must be >= 1")
        longest = max(self.duration(f)[1] for f in FACTORS)
        if self.record_length <= 2 * longest:
            raise DataError(f"record_length must exceed twice the longest event duration ({longest})")

    def rate(self, factor: Factor) -> float:
        return getattr(self, f"rate_{Factor(factor).value}")

    def duration(self, factor: Factor) -> tuple[int, int]:
        return getattr(self, f"duration_{Factor(factor).value}")

    # -- flat key = value text form

    def to_text(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            if v is None:
                continue
            if isinstance(v, (tuple, list)):
                v = ", ".join(repr(x) for x in v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "GeneratorConfig":
        return cls.from_mapping(parse_flat_config(text))

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> "GeneratorConfig":
        kinds = {f.name: f for f in fields(cls)}
        out = {}
        for key, raw in kv.items():
            if key not in kinds:
                raise DataError(f"unknown generator config key {key!r}")
            try:
                if key.startswith(("duration_",)):
                    lo, hi = (int(float(p)) for p in raw.split(","))
                    out[key] = (lo, hi)
                elif key.startswith("baseline_"):
                    lo, hi = (float(p) for p in raw.split(","))
                    out[key] = (lo, hi)
                elif key in ("seed", "n_patients", "record_length", "min_gap"):
                    out[key] = int(raw)
                elif key == "patient_prefix":
                    out[key] = raw
                else:
                    out[key] = float(raw)
            except ValueError:
                raise DataError(f"bad value for {key}: {raw!r}") from None
        return cls(**out)


def _quantize(x: np.ndarray) -> np.ndarray:
    # values representable with six decimals round-trip the CSV format exactly
    return np.array([float(f"{v:.6f}") for v in x])


def _ramp(n: int, edge: int) -> np.ndarray:
    """Envelope rising 0->1 over ``edge`` steps, flat, then falling."""
    e = np.ones(n)
    edge = max(1, min(edge, n // 2))
    up = np.arange(1, edge + 1) / edge
    e[:edge] = up
    e[n - edge :] = np.minimum(e[n - edge :], up[::-1])
    return e


def _plan_events(cfg: GeneratorConfig, rng: SplitMix64) -> list[AnnotationInterval]:
    n = cfg.record_length
    wanted = []
    for factor in FACTORS:
        count = int(round(cfg.rate(factor) * n / 10_000))
        lo, hi = cfg.duration(factor)
        wanted.extend((factor, rng.integer(lo, hi)) for _ in range(count))
    if sum(d + cfg.min_gap for _, d in wanted) > n:
        raise DataError("infeasible event packing: events do not fit in the record")
    # longest first makes rejection sampling far more likely to succeed
    wanted.sort(key=lambda fd: (-fd[1], fd[0].value))
    placed: list[tuple[int, int, Factor]] = []
    for factor, dur in wanted:
        for _ in range(10_000):
            start = rng.integer(0, n - dur)
            end = start + dur
            if all(end + cfg.min_gap <= s or start >= e + cfg.min_gap for s, e, _ in placed):
                placed.append((start, end, factor))
                break
        else:
            raise DataError(f"infeasible event packing: could not place a {factor.value} event of length {dur}")
    placed.sort()
    return [AnnotationInterval(f, s, e) for s, e, f in placed]


def _drift(rng: SplitMix64, n: int, amp: float) -> np.ndarray:
    t = np.arange(n, dtype=np.float64)
    out = np.zeros(n)
    for _ in range(2):
        period = rng.uniform(low=1500.0, high=6000.0)
        phase = rng.uniform(low=0.0, high=2 * math.pi)
        a = amp * rng.uniform(low=0.5, high=1.0)
        out += a * np.sin(2 * math.pi * t / period + phase)
    return out


def generate_patient(cfg: GeneratorConfig, index: int, seed: int) -> PatientRecord:
    rng = SplitMix64(seed)
    n = cfg.record_length
    hr0 = rng.uniform(low=cfg.baseline_hr[0], high=cfg.baseline_hr[1])
    dia0 = rng.uniform(low=cfg.baseline_dia_abp[0], high=cfg.baseline_dia_abp[1])
    if cfg.baseline_pulse_pressure is not None:
        sys0 = dia0 + rng.uniform(low=cfg.baseline_pulse_pressure[0], high=cfg.baseline_pulse_pressure[1])
    else:
        sys0 = rng.uniform(low=cfg.baseline_sys_abp[0], high=cfg.baseline_sys_abp[1])
        sys0 = max(sys0, dia0 + 15.0)
    icp0 = rng.uniform(low=cfg.baseline_sys_icp[0], high=cfg.baseline_sys_icp[1])

    hr = hr0 + _drift(rng, n, 3.0)
    bp_drift = _drift(rng, n, 3.0)
    sys = sys0 + bp_drift
    dia = dia0 + 0.8 * bp_drift
    icp = icp0 + _drift(rng, n, 1.5)

    events = _plan_events(cfg, rng)
    for ev in events:
        s, e, L = ev.start, ev.end, ev.length
        tau = np.arange(L)
        if ev.factor is Factor.BS:
            floor = rng.uniform(low=0.0, high=10.0)
            env = _ramp(L, min(5, L // 4))
            sys[s:e] = sys[s:e] * (1 - env) + floor * env
            dia[s:e] = dia[s:e] * (1 - env) + floor * env
        elif ev.factor is Factor.DT:
            shrink = rng.uniform(low=0.2, high=0.5)
            env = _ramp(L, min(5, L // 4))
            mid = 0.5 * (sys[s:e] + dia[s:e])
            pp = (sys[s:e] - dia[s:e]) * (1 - env * (1 - shrink))
            sys[s:e] = mid + 0.5 * pp
            dia[s:e] = mid - 0.5 * pp
        elif ev.factor is Factor.SC:
            bump = np.sin(np.pi * (tau + 0.5) / L)
            hr[s:e] += rng.uniform(low=15.0, high=35.0) * bump
            icp[s:e] += rng.uniform(low=8.0, high=25.0) * bump
        else:
            taper = np.sin(np.pi * (tau + 0.5) / L)
            mask = 0
            while mask == 0:
                mask = rng.integer(0, 15)
            for bit, (arr, scale) in enumerate(((hr, 1.0), (sys, 1.0), (dia, 0.8), (icp, 0.5))):
                walk = np.cumsum(rng.normal(L, std=scale))
                if mask >> bit & 1:
                    arr[s:e] += walk * taper

    hr = hr + rng.normal(n, std=cfg.noise_hr)
    sys = sys + rng.normal(n, std=cfg.noise_sys_abp)
    dia = dia + rng.normal(n, std=cfg.noise_dia_abp)
    icp = icp + rng.normal(n, std=cfg.noise_sys_icp)

    width = max(2, len(str(cfg.n_patients - 1)))
    pid = f"{cfg.patient_prefix}{index:0{width}d}"
    channels = {
        ChannelKind.HR: _quantize(hr),
        ChannelKind.SysABP: _quantize(sys),
        ChannelKind.DiaABP: _quantize(dia),
        ChannelKind.SysICP: _quantize(icp),
    }
    return PatientRecord(pid, channels, tuple(events))


def generate(cfg: GeneratorConfig) -> list[PatientRecord]:
    """Generate ``cfg.n_patients`` records; patient ``i`` uses the ``i``-th sub-seed."""
    seeds = SplitMix64(cfg.seed).next_u64(cfg.n_patients)
    return [generate_patient(cfg, i, int(s)) for i, s in enumerate(seeds)]


def generate_to_dir(cfg: GeneratorConfig, out: str | Path) -> list[PatientRecord]:
    records = generate(cfg)
    write_dataset(records, out)
    return records
