"""Sliding-window MLP and per-timestep GRU predictors, training, and checkpoints."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import __version__
from .errors import DataError, NumericError
from .features import DEFAULT_ALPHA, WindowSpec, feature_names, has_pulse_pressure
from .neuralnet import (
    LINEAR,
    MLP,
    RELU,
    SIGMOID,
    Adam,
    DenseLayer,
    EarlyStopper,
    GRUCell,
    GRUClassifier,
    bce_loss,
    restore,
    tbptt_train,
)
from .timeseries import ChannelKind, EventSegment, Factor, NormalizationStats, delay_targets

log = logging.getLogger(__name__)

MLP_FAMILY, RNN_FAMILY = "mlp", "rnn"
FAMILIES = (MLP_FAMILY, RNN_FAMILY)
PULSE_PRESSURE = "PulsePressure"
TARGET_DELAY = 10

_ABP = (ChannelKind.SysABP.value, ChannelKind.DiaABP.value)
_ALL = tuple(k.value for k in ChannelKind)

# factor -> routed inputs, per family
ROUTING = {
    MLP_FAMILY: {Factor.BS: _ABP, Factor.DT: _ABP, Factor.SC: _ALL, Factor.X: _ALL},
    RNN_FAMILY: {
        Factor.BS: _ABP,
        Factor.DT: (ChannelKind.DiaABP.value, PULSE_PRESSURE),
        Factor.SC: _ALL,
        Factor.X: _ALL,
    },
}


def routed_channels(family: str, factor: Factor | str) -> tuple[str, ...]:
    return ROUTING[family][Factor(factor)]


def route_inputs(inputs: Mapping[ChannelKind, np.ndarray], names: Sequence[str]) -> np.ndarray:
    """Stack the named inputs as (n_channels, T); pulse pressure is derived from the
    (already normalised) ABP pair."""
    rows = []
    for name in names:
        if name == PULSE_PRESSURE:
            rows.append(inputs[ChannelKind.SysABP] - inputs[ChannelKind.DiaABP])
        else:
            rows.append(inputs[ChannelKind(name)])
    return np.asarray(rows, dtype=np.float64)


# -- feature layer


def _ols_rows(n: int) -> tuple[np.ndarray, np.ndarray]:
    x = np.arange(n, dtype=np.float64)
    xc = x - x.mean()
    slope = xc / np.dot(xc, xc)
    intercept = 1.0 / n - x.mean() * slope
    return slope, intercept


def _ewma_row(n: int, alpha: float) -> np.ndarray:
    """Weights reproducing the EWMA recursion's final value over n samples."""
    k = np.arange(n - 1)
    w = np.zeros(n)
    w[n - 1 - k] = alpha * (1.0 - alpha) ** k
    w[0] += (1.0 - alpha) ** (n - 1)
    return w


def init_feature_layer(spec: WindowSpec, channels: Sequence[str], alpha: float = DEFAULT_ALPHA) -> DenseLayer:
    """Linear masked layer whose rows compute the window features exactly.

    Input is the channel-major flattened window x[t-l .. t+r]; output
    order matches :func:`vitalgate.features.feature_names`.
    """
    if spec.l < 2:
        raise ValueError("window too short for a line fit")
    W = spec.width
    l, r = spec.l, spec.r
    kinds = [ChannelKind(c) for c in channels]
    rows, masks = [], []

    def row():
        return np.zeros(len(kinds) * W), np.zeros(len(kinds) * W)

    past = slice(0, l + 1)
    future = slice(l + 1, l + 1 + r)
    for ci in range(len(kinds)):
        base = ci * W
        ps, pi = _ols_rows(l + 1)
        for weights in (ps, pi):
            w, m = row()
            w[base + past.start : base + past.stop] = weights
            m[base + past.start : base + past.stop] = 1
            rows.append(w), masks.append(m)
        if spec.has_future_fit:
            fs, fi = _ols_rows(r)
            for weights in (fs, fi):
                w, m = row()
                w[base + future.start : base + future.stop] = weights
                m[base + future.start : base + future.stop] = 1
                rows.append(w), masks.append(m)
        w, m = row()
        w[base + past.start : base + past.stop] = _ewma_row(l + 1, alpha)
        m[base + past.start : base + past.stop] = 1
        rows.append(w), masks.append(m)
        w, m = row()
        w[base + l], w[base + l - 1] = 1.0, -1.0
        m[base + l] = m[base + l - 1] = 1
        rows.append(w), masks.append(m)
    if has_pulse_pressure(kinds):
        w, m = row()
        s, d = kinds.index(ChannelKind.SysABP), kinds.index(ChannelKind.DiaABP)
        w[s * W + l], w[d * W + l] = 1.0, -1.0
        m[s * W + l] = m[d * W + l] = 1
        rows.append(w), masks.append(m)
    Wm = np.asarray(rows)
    return DenseLayer(Wm, np.zeros(len(rows)), LINEAR, np.asarray(masks))


def window_matrix(x: np.ndarray, spec: WindowSpec) -> np.ndarray:
    """All complete windows of (n_ch, T) input as rows (T - l - r, n_ch * width)."""
    n_ch, T = x.shape
    if T < spec.width:
        raise ValueError(f"segment length {T} shorter than window width {spec.width}")
    v = np.lib.stride_tricks.sliding_window_view(x, spec.width, axis=1)
    return np.ascontiguousarray(v.transpose(1, 0, 2).reshape(T - spec.width + 1, n_ch * spec.width))


def _inputs_of(segment) -> Mapping[ChannelKind, np.ndarray]:
    return segment.inputs if isinstance(segment, EventSegment) else segment


# -- predictors


@dataclass
class MlpPredictor:
    factor: Factor
    channels: tuple[str, ...]
    window: WindowSpec
    net: MLP
    alpha: float = DEFAULT_ALPHA

    family = MLP_FAMILY

    @property
    def feature_layer(self) -> DenseLayer:
        return self.net.layers[0]

    def predict_routed(self, x: np.ndarray) -> np.ndarray:
        return self.net.forward(window_matrix(x, self.window))


@dataclass
class RnnPredictor:
    factor: Factor
    channels: tuple[str, ...]
    net: GRUClassifier
    delay: int = TARGET_DELAY

    family = RNN_FAMILY

    def predict_routed(self, x: np.ndarray) -> np.ndarray:
        return self.net.forward(x.T[:, None, :])[:, 0]


def mlp_predict(predictor: MlpPredictor, segment) -> np.ndarray:
    """P(factor at t | window) for each t in [l, len - r)."""
    x = route_inputs(_inputs_of(segment), predictor.channels)
    if x.shape[1] <= predictor.window.l + predictor.window.r:
        raise ValueError("segment shorter than the window")
    return predictor.predict_routed(x)


def rnn_predict(predictor: RnnPredictor, segment) -> np.ndarray:
    """One probability per timestep, starting from a zero hidden state."""
    x = route_inputs(_inputs_of(segment), predictor.channels)
    if x.shape[1] == 0:
        raise ValueError("empty segment")
    return predictor.predict_routed(x)


def predict(predictor, segment) -> np.ndarray:
    return mlp_predict(predictor, segment) if predictor.family == MLP_FAMILY else rnn_predict(predictor, segment)


def aligned_scores(predictor, segment: EventSegment) -> tuple[np.ndarray, np.ndarray]:
    """Scores paired with the original (undelayed) targets they predict.

    MLP boundary steps without full context are dropped; RNN outputs are
    shifted back by the target delay, so the last ``delay`` targets have no
    score.
    """
    y = segment.targets
    n = len(y)
    if predictor.family == MLP_FAMILY:
        if n < predictor.window.width:
            return np.empty(0), np.empty(0, dtype=np.int8)
        return mlp_predict(predictor, segment), y[predictor.window.l : n - predictor.window.r]
    d = predictor.delay
    if n <= d:
        return np.empty(0), np.empty(0, dtype=np.int8)
    p = rnn_predict(predictor, segment)
    return p[d:], y[: n - d]


# -- training


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 1
    max_epochs: int = 500
    window_batch: int | None = None  # MLP minibatch in windows; None falls back to batch_size
    check_interval: int = 5
    alpha: float = DEFAULT_ALPHA
    delay: int = TARGET_DELAY
    chunk: int = 256

    def __post_init__(self):
        if min(self.batch_size, self.max_epochs, self.chunk, self.window_batch or 1) < 1:
            raise ValueError("batch sizes, max_epochs and chunk must be positive")
        if self.max_epochs < self.check_interval:
            raise ValueError("max_epochs must allow at least one early-stopping check")


@dataclass
class TrainResult:
    predictor: object
    best_cost: float
    best_epoch: int | None
    epochs_run: int


def _mlp_arrays(segments, channels, spec):
    Xs, ys = [], []
    for seg in segments:
        if len(seg) < spec.width:
            continue
        x = route_inputs(seg.inputs, channels)
        Xs.append(window_matrix(x, spec))
        ys.append(seg.targets[spec.l : len(seg) - spec.r])
    if not Xs:
        return np.empty((0, len(channels) * spec.width)), np.empty(0)
    return np.concatenate(Xs), np.concatenate(ys).astype(np.float64)


def _check_labels(y: np.ndarray, what: str) -> None:
    if y.size == 0:
        raise DataError(f"empty {what} set")
    if y.min() == y.max():
        raise DataError(f"{what} set contains a single class")


def _check_finite(loss: float, epoch: int) -> None:
    if not np.isfinite(loss):
        raise NumericError(f"training diverged at epoch {epoch}")


def build_mlp(spec: WindowSpec, channels, depth: int, hidden: int, rng, alpha=DEFAULT_ALPHA) -> MLP:
    feat = init_feature_layer(spec, channels, alpha)
    layers = [feat]
    n_in = feat.n_out
    for _ in range(depth):
        layers.append(DenseLayer.init(n_in, hidden, RELU, rng))
        n_in = hidden
    layers.append(DenseLayer.init(n_in, 1, SIGMOID, rng))
    return MLP(layers)


def train_mlp(factor, train_segments, val_segments, hp: Mapping, seed: int, cfg: TrainConfig = TrainConfig()) -> TrainResult:
    factor = Factor(factor)
    channels = routed_channels(MLP_FAMILY, factor)
    spec = WindowSpec(int(hp["l"]), int(hp["r"]))
    X, y = _mlp_arrays(train_segments, channels, spec)
    _check_labels(y, "training")
    Xv, yv = _mlp_arrays(val_segments, channels, spec)
    if yv.size == 0:
        raise DataError("empty validation set")
    rng = np.random.default_rng(seed)
    net = build_mlp(spec, channels, int(hp["depth"]), int(hp["hidden"]), rng, cfg.alpha)
    params = net.params()
    opt = Adam(float(hp["lr"]))
    stopper = EarlyStopper(cfg.check_interval)
    epoch = 0
    batch = cfg.window_batch or cfg.batch_size
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(y))
        for s in range(0, len(order), batch):
            idx = order[s : s + batch]
            loss, grads = net.loss_and_grads(X[idx], y[idx])
            _check_finite(loss, epoch)
            opt.step(params, grads)
        if epoch % cfg.check_interval == 0:
            cost = bce_loss(net.forward(Xv), yv)
            _check_finite(cost, epoch)
            if stopper.check(epoch, cost, params):
                break
    restore(params, stopper.best_weights)
    pred = MlpPredictor(factor, channels, spec, net, cfg.alpha)
    return TrainResult(pred, float(stopper.best_cost), stopper.best_epoch, epoch)


def _rnn_sequences(segments, channels, delay):
    seqs = []
    for seg in segments:
        if len(seg) <= delay:
            continue
        x = route_inputs(seg.inputs, channels).T
        seqs.append((x, delay_targets(seg.targets, delay).astype(np.float64)))
    return seqs


def _pad_batch(seqs):
    T = max(len(x) for x, _ in seqs)
    d = seqs[0][0].shape[1]
    xs = np.zeros((T, len(seqs), d))
    ys = np.zeros((T, len(seqs)))
    w = np.zeros((T, len(seqs)))
    for b, (x, y) in enumerate(seqs):
        n = len(x)
        xs[:n, b], ys[:n, b], w[:n, b] = x, y, 1.0
    return xs, ys, w


def _rnn_cost(net: GRUClassifier, batch) -> float:
    xs, ys, w = batch
    return bce_loss(net.forward(xs), ys, w)


def train_rnn(factor, train_segments, val_segments, hp: Mapping, seed: int, cfg: TrainConfig = TrainConfig()) -> TrainResult:
    factor = Factor(factor)
    channels = routed_channels(RNN_FAMILY, factor)
    seqs = _rnn_sequences(train_segments, channels, cfg.delay)
    _check_labels(np.concatenate([y for _, y in seqs]) if seqs else np.empty(0), "training")
    vseqs = _rnn_sequences(val_segments, channels, cfg.delay)
    if not vseqs:
        raise DataError("empty validation set")
    val_batch = _pad_batch(vseqs)
    rng = np.random.default_rng(seed)
    hidden = int(hp["hidden"])
    net = GRUClassifier(GRUCell.init(len(channels), hidden, rng), DenseLayer.init(hidden, 1, SIGMOID, rng))
    params = net.params()
    opt = Adam(float(hp["lr"]))
    stopper = EarlyStopper(cfg.check_interval)
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(seqs))
        for s in range(0, len(order), cfg.batch_size):
            xs, ys, w = _pad_batch([seqs[i] for i in order[s : s + cfg.batch_size]])
            losses = tbptt_train(net, xs, ys, opt, chunk=cfg.chunk, weights=w)
            _check_finite(sum(losses), epoch)
        if epoch % cfg.check_interval == 0:
            cost = _rnn_cost(net, val_batch)
            _check_finite(cost, epoch)
            if stopper.check(epoch, cost, params):
                break
    restore(params, stopper.best_weights)
    pred = RnnPredictor(factor, channels, net, cfg.delay)
    return TrainResult(pred, float(stopper.best_cost), stopper.best_epoch, epoch)


def validation_cost(predictor, segments, cfg: TrainConfig = TrainConfig()) -> float:
    """The early-stopping cost, computed exactly as during training."""
    if predictor.family == MLP_FAMILY:
        Xv, yv = _mlp_arrays(segments, predictor.channels, predictor.window)
        return bce_loss(predictor.net.forward(Xv), yv)
    return _rnn_cost(predictor.net, _pad_batch(_rnn_sequences(segments, predictor.channels, predictor.delay)))


def train_predictor(
    family: str,
    factor,
    train_segments: Sequence[EventSegment],
    val_segments: Sequence[EventSegment],
    hyperparams: Mapping,
    seed: int,
    cfg: TrainConfig = TrainConfig(),
    stats: NormalizationStats | None = None,
) -> "ModelCheckpoint":
    if not train_segments:
        raise DataError("empty training set")
    trainer = {MLP_FAMILY: train_mlp, RNN_FAMILY: train_rnn}[family]
    res = trainer(factor, train_segments, val_segments, hyperparams, seed, cfg)
    return ModelCheckpoint.from_predictor(res.predictor, hyperparams, seed, cfg, stats, res)


# -- checkpoints


def _layer_dict(layer: DenseLayer) -> dict:
    return {
        "activation": layer.activation,
        "shape": list(layer.weights.shape),
        "weights": layer.weights.tolist(),
        "bias": layer.bias.tolist(),
        "mask": None if layer.mask is None else layer.mask.astype(int).tolist(),
    }


def _layer_from(d: Mapping) -> DenseLayer:
    return DenseLayer(np.array(d["weights"], dtype=np.float64).reshape(d["shape"]), np.array(d["bias"]), d["activation"],
                      None if d["mask"] is None else np.array(d["mask"], dtype=np.float64))


def _clean_hp(hp: Mapping) -> dict:
    out = {}
    for k in sorted(hp):
        v = hp[k]
        out[k] = int(v) if isinstance(v, (int, np.integer)) else float(v)
    return out


@dataclass
class ModelCheckpoint:
    """Everything needed for bit-exact inference, serialised as JSON text.

    Key order: format, version, family, factor, channels, hyperparams, seed,
    train_config, normalization, window | delay, alpha, feature_names,
    training, layers | cell+output.
    """

    family: str
    factor: Factor
    channels: tuple[str, ...]
    hyperparams: dict
    seed: int
    train_config: dict
    normalization: NormalizationStats | None
    predictor: object
    training: dict = field(default_factory=dict)

    FORMAT = "vitalgate-checkpoint/1"

    @classmethod
    def from_predictor(cls, predictor, hp, seed, cfg: TrainConfig, stats, res: TrainResult | None = None):
        training = {}
        if res is not None:
            training = {"best_validation_cost": res.best_cost, "best_epoch": res.best_epoch, "epochs_run": res.epochs_run}
        return cls(predictor.family, predictor.factor, tuple(predictor.channels), _clean_hp(hp), int(seed),
                   {k: getattr(cfg, k) for k in ("batch_size", "window_batch", "max_epochs", "check_interval", "alpha", "delay", "chunk")},
                   stats, predictor, training)

    def to_dict(self) -> dict:
        d = {
            "format": self.FORMAT,
            "version": __version__,
            "family": self.family,
            "factor": self.factor.value,
            "channels": list(self.channels),
            "hyperparams": self.hyperparams,
            "seed": self.seed,
            "train_config": self.train_config,
            "normalization": None if self.normalization is None else self.normalization.to_dict(),
        }
        p = self.predictor
        if self.family == MLP_FAMILY:
            d["window"] = {"l": p.window.l, "r": p.window.r}
            d["alpha"] = p.alpha
            d["feature_names"] = feature_names(p.channels, p.window)
            d["training"] = self.training
            d["layers"] = [_layer_dict(layer) for layer in p.net.layers]
        else:
            d["delay"] = p.delay
            d["training"] = self.training
            d["cell"] = {k: v.tolist() for k, v in p.net.cell.params().items()}
            d["output"] = _layer_dict(p.net.output)
        return d

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_text())
        return path

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelCheckpoint":
        if d.get("format") != cls.FORMAT:
            raise DataError(f"not a checkpoint (format={d.get('format')!r})")
        factor = Factor(d["factor"])
        channels = tuple(d["channels"])
        stats = None if d["normalization"] is None else NormalizationStats.from_dict(d["normalization"])
        if d["family"] == MLP_FAMILY:
            window = WindowSpec(d["window"]["l"], d["window"]["r"])
            pred = MlpPredictor(factor, channels, window, MLP([_layer_from(x) for x in d["layers"]]), d["alpha"])
        elif d["family"] == RNN_FAMILY:
            cell = GRUCell(**{k: np.array(v, dtype=np.float64) for k, v in d["cell"].items()})
            pred = RnnPredictor(factor, channels, GRUClassifier(cell, _layer_from(d["output"])), d["delay"])
        else:
            raise DataError(f"unknown family {d['family']!r}")
        return cls(d["family"], factor, channels, dict(d["hyperparams"]), d["seed"], dict(d["train_config"]), stats, pred,
                   dict(d.get("training", {})))

    @classmethod
    def from_text(cls, text: str) -> "ModelCheckpoint":
        try:
            return cls.from_dict(json.loads(text))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"malformed checkpoint: {exc}") from None

    @classmethod
    def load(cls, path: str | Path) -> "ModelCheckpoint":
        return cls.from_text(Path(path).read_text())
