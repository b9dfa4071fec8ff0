"""Clinically-inspired sliding-window features.

For a window centred on timestep ``t`` with ``l`` steps of past and ``r``
steps of future context, each supplied channel contributes (in order)::

    past_slope, past_intercept, [future_slope, future_intercept,] ewma, diff

where the future pair is present only when ``r >= 2``.  A trailing
``pulse_pressure`` entry is appended when both ABP channels are supplied.
Intercepts are the fitted value at the first sample of the segment.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .timeseries import ChannelKind

DEFAULT_ALPHA = 0.3

L_BOUNDS = (4, 49)
R_BOUNDS = (0, 10)


@dataclass(frozen=True)
class WindowSpec:
    l: int
    r: int

    def __post_init__(self):
        if not (L_BOUNDS[0] <= self.l <= L_BOUNDS[1]):
            raise ValueError(f"past context l={self.l} outside {L_BOUNDS}")
        if not (R_BOUNDS[0] <= self.r <= R_BOUNDS[1]):
            raise ValueError(f"future context r={self.r} outside {R_BOUNDS}")

    @property
    def width(self) -> int:
        """Samples in x[t-l .. t+r] inclusive."""
        return self.l + self.r + 1

    @property
    def has_future_fit(self) -> bool:
        return self.r >= 2


def line_fit(segment) -> tuple[float, float]:
    """Ordinary least squares of ``segment`` against x = 0..n-1."""
    y = np.asarray(segment, dtype=np.float64)
    n = len(y)
    if n < 2:
        raise ValueError("line_fit needs at least two samples")
    x = np.arange(n, dtype=np.float64)
    xm = x.mean()
    ym = y.mean()
    slope = float(np.dot(x - xm, y - ym) / np.dot(x - xm, x - xm))
    return slope, float(ym - slope * xm)


def ewma(sequence, alpha: float) -> np.ndarray:
    if not (0.0 < alpha <= 1.0):
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    x = np.asarray(sequence, dtype=np.float64)
    s = np.empty_like(x)
    if len(x) == 0:
        return s
    s[0] = x[0]
    for t in range(1, len(x)):
        s[t] = alpha * x[t] + (1.0 - alpha) * s[t - 1]
    return s


def pulse_pressure(sys, dia) -> np.ndarray:
    sys = np.asarray(sys, dtype=np.float64)
    dia = np.asarray(dia, dtype=np.float64)
    if sys.shape != dia.shape:
        raise ValueError(f"length mismatch: {sys.shape} vs {dia.shape}")
    return sys - dia


def first_difference(sequence) -> np.ndarray:
    x = np.asarray(sequence, dtype=np.float64)
    if len(x) < 1:
        raise ValueError("first_difference needs at least one sample")
    d = np.zeros_like(x)
    d[1:] = np.diff(x)
    return d


def has_pulse_pressure(channels: Sequence[ChannelKind]) -> bool:
    return ChannelKind.SysABP in channels and ChannelKind.DiaABP in channels


def feature_names(channels: Sequence[ChannelKind], spec: WindowSpec) -> list[str]:
    names = []
    for ch in channels:
        c = ChannelKind(ch).value
        names += [f"{c}.past_slope", f"{c}.past_intercept"]
        if spec.has_future_fit:
            names += [f"{c}.future_slope", f"{c}.future_intercept"]
        names += [f"{c}.ewma", f"{c}.diff"]
    if has_pulse_pressure(channels):
        names.append("pulse_pressure")
    return names


def window_features(
    channels: Mapping[ChannelKind, np.ndarray],
    t: int,
    spec: WindowSpec,
    alpha: float = DEFAULT_ALPHA,
    order: Sequence[ChannelKind] | None = None,
) -> np.ndarray:
    """Feature vector for x[t-l .. t+r]; ``order`` defaults to the mapping's order."""
    order = [ChannelKind(c) for c in (order if order is not None else channels.keys())]
    n = len(channels[order[0]])
    if t - spec.l < 0 or t + spec.r >= n:
        raise IndexError(f"t={t} leaves no room for window l={spec.l}, r={spec.r} in length {n}")
    out = []
    for ch in order:
        x = np.asarray(channels[ch], dtype=np.float64)
        out.extend(line_fit(x[t - spec.l : t + 1]))
        if spec.has_future_fit:
            out.extend(line_fit(x[t + 1 : t + spec.r + 1]))
        out.append(ewma(x[t - spec.l : t + 1], alpha)[-1])
        out.append(x[t] - x[t - 1])
    if has_pulse_pressure(order):
        out.append(channels[ChannelKind.SysABP][t] - channels[ChannelKind.DiaABP][t])
    return np.asarray(out, dtype=np.float64)
