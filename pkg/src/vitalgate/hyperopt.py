"""Bayesian optimisation: Matern-5/2 ARD Gaussian process plus expected improvement.

Points live in the unit cube internally.  Integer dimensions are relaxed
to the continuum and snapped by rounding; log-continuous dimensions are
uniform in log space.  Objectives are minimised.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize
from scipy.stats import norm, qmc

from .config import parse_flat_config, parse_number
from .errors import NumericError

INTEGER, CONTINUOUS, LOG = "integer", "continuous", "log-continuous"


@dataclass(frozen=True)
class Dimension:
    name: str
    kind: str
    low: float
    high: float

    def __post_init__(self):
        if self.kind not in (INTEGER, CONTINUOUS, LOG):
            raise ValueError(f"unknown dimension type {self.kind!r}")
        if not (math.isfinite(self.low) and math.isfinite(self.high) and self.low < self.high):
            raise ValueError(f"{self.name}: bounds must be finite with low < high")
        if self.kind == LOG and self.low <= 0:
            raise ValueError(f"{self.name}: log dimension needs positive bounds")

    def to_unit(self, v: float) -> float:
        if self.kind == LOG:
            return (math.log(v) - math.log(self.low)) / (math.log(self.high) - math.log(self.low))
        return (v - self.low) / (self.high - self.low)

    def from_unit(self, u: float):
        u = min(max(float(u), 0.0), 1.0)
        if self.kind == LOG:
            v = math.exp(math.log(self.low) + u * (math.log(self.high) - math.log(self.low)))
        else:
            v = self.low + u * (self.high - self.low)
        if self.kind == INTEGER:
            return int(min(max(round(v), self.low), self.high))
        return float(min(max(v, self.low), self.high))  # exp/log roundoff can step past a bound


@dataclass(frozen=True)
class SearchSpace:
    dims: tuple[Dimension, ...]

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.dims]

    def __len__(self) -> int:
        return len(self.dims)

    def decode(self, u) -> dict:
        return {d.name: d.from_unit(x) for d, x in zip(self.dims, u)}

    def encode(self, point: Mapping) -> np.ndarray:
        return np.array([d.to_unit(point[d.name]) for d in self.dims])

    def snap(self, U: np.ndarray) -> np.ndarray:
        """Clamp to the cube and round integer coordinates to feasible values."""
        U = np.clip(np.atleast_2d(np.asarray(U, dtype=np.float64)), 0.0, 1.0).copy()
        for j, d in enumerate(self.dims):
            if d.kind == INTEGER:
                v = np.clip(np.round(d.low + U[:, j] * (d.high - d.low)), d.low, d.high)
                U[:, j] = (v - d.low) / (d.high - d.low)
        return U

    def sample(self, n: int, seed: int) -> np.ndarray:
        """``n`` scrambled-Sobol points in the unit cube (not snapped)."""
        sampler = qmc.Sobol(len(self.dims), scramble=True, seed=seed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)  # non power-of-two n
            return sampler.random(n)

    def replace(self, name: str, **changes) -> "SearchSpace":
        dims = []
        for d in self.dims:
            if d.name == name:
                kw = {"name": d.name, "kind": d.kind, "low": d.low, "high": d.high}
                kw.update(changes)
                d = Dimension(**kw)
            dims.append(d)
        return SearchSpace(tuple(dims))


MLP_SPACE = SearchSpace((
    Dimension("depth", INTEGER, 1, 3),
    Dimension("hidden", INTEGER, 4, 2048),
    Dimension("l", INTEGER, 4, 49),
    Dimension("r", INTEGER, 0, 10),
    Dimension("lr", LOG, 0.001, 0.1),
))

RNN_SPACE = SearchSpace((
    Dimension("hidden", INTEGER, 8, 128),
    Dimension("lr", LOG, 0.001, 0.1),
))


def default_space(family: str) -> SearchSpace:
    return {"mlp": MLP_SPACE, "rnn": RNN_SPACE}[family]


@dataclass
class TrialRecord:
    index: int
    point: dict
    unit: np.ndarray
    objective: float
    status: str = "ok"
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"


# -- Gaussian process


def matern52(A: np.ndarray, B: np.ndarray, lengthscales: np.ndarray, signal_var: float) -> np.ndarray:
    D = (A[:, None, :] - B[None, :, :]) / lengthscales
    r = np.sqrt(np.sum(D * D, axis=-1))
    s5r = math.sqrt(5.0) * r
    return signal_var * (1.0 + s5r + 5.0 / 3.0 * r * r) * np.exp(-s5r)


MAX_JITTER = 1e-6


def _cholesky(K: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        pass
    jitter = 1e-10
    while jitter <= MAX_JITTER * (1 + 1e-9):
        try:
            return np.linalg.cholesky(K + jitter * np.eye(len(K)))
        except np.linalg.LinAlgError:
            jitter *= 10
    raise NumericError("kernel matrix is not positive definite even with 1e-6 jitter")


@dataclass
class GpModel:
    X: np.ndarray
    y: np.ndarray
    lengthscales: np.ndarray
    signal_var: float
    noise_var: float
    y_mean: float
    y_std: float
    chol: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)

    @property
    def f_best(self) -> float:
        return float(np.min(self.y))

    def predict(self, Xq) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance of the latent function, in objective units."""
        Xq = np.atleast_2d(np.asarray(Xq, dtype=np.float64))
        Ks = matern52(Xq, self.X, self.lengthscales, self.signal_var)
        mu = Ks @ self.alpha
        v = solve_triangular(self.chol, Ks.T, lower=True)
        var = np.maximum(self.signal_var - np.sum(v * v, axis=0), 0.0)
        return mu * self.y_std + self.y_mean, var * self.y_std**2


def _neg_lml(theta, X, ys, d, noise):
    ls = np.exp(theta[:d])
    sv = math.exp(theta[d])
    nv = noise if noise is not None else math.exp(theta[d + 1])
    K = matern52(X, X, ls, sv) + nv * np.eye(len(X))
    try:
        L = _cholesky(K)
    except NumericError:
        return 1e25
    a = cho_solve((L, True), ys)
    return float(0.5 * ys @ a + np.log(np.diag(L)).sum() + 0.5 * len(X) * math.log(2 * math.pi))


_LS_BOUNDS = (math.log(1e-2), math.log(10.0))
_SV_BOUNDS = (math.log(0.05), math.log(20.0))
_NV_BOUNDS = (math.log(1e-6), math.log(1.0))


def gp_fit(
    X,
    y,
    *,
    noise: float | None = None,
    lengthscales=None,
    signal_var: float | None = None,
    n_restarts: int = 4,
    seed: int = 0,
) -> GpModel:
    """Fit a GP to (unit-cube X, objective y).

    Targets are standardised.  Kernel hyperparameters left as ``None`` are
    set by maximising the log marginal likelihood from a default start plus
    ``n_restarts`` seeded random starts.  ``noise`` fixes the (standardised)
    noise variance, e.g. ``0.0`` for an interpolating model.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    if len(X) < 2:
        raise ValueError("gp_fit needs at least two observations")
    n, d = X.shape
    y_mean = float(y.mean())
    y_std = float(y.std()) or 1.0
    ys = (y - y_mean) / y_std

    if lengthscales is not None and signal_var is not None and noise is not None:
        ls, sv, nv = np.broadcast_to(np.asarray(lengthscales, float), (d,)).copy(), float(signal_var), float(noise)
    else:
        bounds = [_LS_BOUNDS] * d + [_SV_BOUNDS] + ([] if noise is not None else [_NV_BOUNDS])
        x0 = [math.log(0.3)] * d + [0.0] + ([] if noise is not None else [math.log(1e-2)])
        rng = np.random.default_rng(seed)
        starts = [np.array(x0)] + [rng.uniform([b[0] for b in bounds], [b[1] for b in bounds]) for _ in range(n_restarts)]
        best = None
        for s in starts:
            res = minimize(_neg_lml, s, args=(X, ys, d, noise), method="L-BFGS-B", bounds=bounds)
            if best is None or res.fun < best.fun:
                best = res
        theta = best.x
        ls = np.exp(theta[:d])
        sv = math.exp(theta[d])
        nv = noise if noise is not None else math.exp(theta[d + 1])
        if lengthscales is not None:
            ls = np.broadcast_to(np.asarray(lengthscales, float), (d,)).copy()
        if signal_var is not None:
            sv = float(signal_var)
    K = matern52(X, X, ls, sv) + nv * np.eye(n)
    L = _cholesky(K)
    alpha = cho_solve((L, True), ys)
    return GpModel(X, y, ls, sv, nv, y_mean, y_std, L, alpha)


# -- acquisition


def expected_improvement(mu, sigma, f_best):
    """EI for minimisation; ``sigma`` is the predictive standard deviation."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    imp = f_best - mu
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        z = np.where(sigma > 0, imp / np.where(sigma > 0, sigma, 1.0), 0.0)
        ei = np.where(sigma > 0, imp * norm.cdf(z) + sigma * norm.pdf(z), np.maximum(imp, 0.0))
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


def model_ei(model: GpModel, U, f_best: float | None = None) -> np.ndarray:
    mu, var = model.predict(U)
    return expected_improvement(mu, np.sqrt(var), model.f_best if f_best is None else f_best)


def _argmax_first(values: np.ndarray) -> int:
    """Index of the maximum; ties go to the lowest index."""
    return int(np.argmax(values))


def suggest(
    model: GpModel,
    space: SearchSpace,
    seed: int,
    f_best: float | None = None,
    n_candidates: int = 2048,
    n_refine: int = 5,
) -> dict:
    """Maximise EI over seeded Sobol candidates, then polish the top few with L-BFGS-B."""
    U, _ = suggest_unit(model, space, seed, f_best, n_candidates, n_refine)
    return space.decode(U)


def suggest_unit(model, space, seed, f_best=None, n_candidates=2048, n_refine=5):
    f_best = model.f_best if f_best is None else f_best
    cands = space.snap(space.sample(n_candidates, seed))
    ei = model_ei(model, cands, f_best)
    best_i = _argmax_first(ei)
    best_u, best_ei = cands[best_i], ei[best_i]
    top = np.argsort(-ei, kind="stable")[:n_refine]
    for i in top:
        res = minimize(lambda u: -float(model_ei(model, u[None, :], f_best)[0]), cands[i],
                       method="L-BFGS-B", bounds=[(0.0, 1.0)] * len(space))
        u = space.snap(res.x)[0]
        val = float(model_ei(model, u[None, :], f_best)[0])
        if val > best_ei:
            best_u, best_ei = u, val
    return best_u, best_ei


@dataclass
class OptimizeResult:
    best: TrialRecord
    history: list[TrialRecord]


def _sub_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=keys).generate_state(1)[0])


def optimize(
    objective: Callable[[dict], float],
    space: SearchSpace,
    budget: int = 25,
    seed: int = 0,
    n_initial: int = 5,
    on_trial: Callable[[TrialRecord], None] | None = None,
) -> OptimizeResult:
    """Quasi-random initial design, then GP fit / EI suggest / evaluate until ``budget``.

    Trials whose objective raises a numeric or data error, or returns a
    non-finite value, are recorded as failed and left out of the GP.
    """
    if budget < n_initial:
        raise ValueError(f"budget {budget} is smaller than the initial design ({n_initial})")
    initial = space.snap(space.sample(n_initial, _sub_seed(seed, 0)))
    history: list[TrialRecord] = []
    for i in range(budget):
        ok = [t for t in history if t.ok]
        if i < n_initial:
            u = initial[i]
        elif len(ok) >= 2:
            model = gp_fit(np.array([t.unit for t in ok]), np.array([t.objective for t in ok]), seed=_sub_seed(seed, 1, i))
            u, _ = suggest_unit(model, space, _sub_seed(seed, 2, i))
        else:
            u = space.snap(space.sample(1, _sub_seed(seed, 3, i)))[0]
        point = space.decode(u)
        try:
            value = float(objective(point))
            status, msg = ("ok", "") if math.isfinite(value) else ("failed", "non-finite objective")
        except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
            value, status, msg = math.nan, "failed", str(exc)
        rec = TrialRecord(i, point, np.asarray(u), value if status == "ok" else math.nan, status, msg)
        history.append(rec)
        if on_trial is not None:
            on_trial(rec)
    ok = [t for t in history if t.ok]
    if not ok:
        raise NumericError("all hyperparameter trials failed")
    best = min(ok, key=lambda t: (t.objective, t.index))
    return OptimizeResult(best, history)


def write_trials(history: Sequence[TrialRecord], space: SearchSpace, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "status", "objective", *space.names, "message"])
        for t in history:
            w.writerow([t.index, t.status, repr(t.objective), *(repr(t.point[n]) for n in space.names), t.message])
    return path


def format_hyperparams(point: Mapping) -> str:
    """Flat ``key = value`` text, the format of ``best_hp.<factor>.<family>`` files."""
    return "".join(f"{k} = {point[k]!r}\n" for k in sorted(point))


def parse_hyperparams(text: str) -> dict:
    return {k: parse_number(v) for k, v in parse_flat_config(text).items()}
