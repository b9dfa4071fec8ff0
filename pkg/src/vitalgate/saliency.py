"""Gradient saliency: output vs input, and between recorded layer activations.

Layer numbering is per family.  MLP: 0 input window, 1 feature layer, then
one index per hidden layer, last the output probability.  RNN: 0 input,
1 hidden state, 2 output probability.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .neuralnet import GRUCell, gru_sequence_forward
from .plots import heatmap_svg
from .predictors import MLP_FAMILY, ModelCheckpoint, route_inputs, window_matrix
from .timeseries import EventSegment

ALL_STEPS = "all"


@dataclass
class SaliencyMap:
    values: np.ndarray  # (rows, timesteps)
    row_labels: tuple[str, ...]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.values.shape[0] != len(self.row_labels):
            raise ValueError("one label per row required")

    def to_csv(self, path: str | Path) -> Path:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row", *range(self.values.shape[1])])
            for label, row in zip(self.row_labels, self.values):
                w.writerow([label, *(repr(float(v)) for v in row)])
        return Path(path)

    def to_svg(self, path: str | Path) -> Path:
        title = f"{self.metadata.get('kind', 'saliency')} {self.metadata.get('segment', '')} t={self.metadata.get('t_out', '')}"
        Path(path).write_text(heatmap_svg(self.values, self.row_labels, title.strip()))
        return Path(path)


def checkpoint_id(ckpt: ModelCheckpoint) -> str:
    return hashlib.sha256(ckpt.to_text().encode()).hexdigest()[:16]


def _unpack(model):
    if isinstance(model, ModelCheckpoint):
        return model.predictor, checkpoint_id(model)
    return model, None


def _routed(predictor, segment) -> np.ndarray:
    inputs = segment.inputs if isinstance(segment, EventSegment) else segment
    return route_inputs(inputs, predictor.channels)


def _segment_name(segment) -> str | None:
    return segment.segment_id if isinstance(segment, EventSegment) else None


def valid_steps(predictor, T: int) -> range:
    if predictor.family == MLP_FAMILY:
        return range(predictor.window.l, T - predictor.window.r)
    return range(T)


def n_layers(predictor) -> int:
    """Number of activation layers, input included."""
    return len(predictor.net.layers) + 1 if predictor.family == MLP_FAMILY else 3


def layer_labels(predictor, layer: int) -> tuple[str, ...]:
    if layer == 0:
        return tuple(predictor.channels)
    if predictor.family == MLP_FAMILY:
        width = predictor.net.layers[layer - 1].n_out
        prefix = "feature" if layer == 1 else ("p" if layer == n_layers(predictor) - 1 else f"h{layer - 1}_")
    else:
        width = predictor.net.cell.hidden_size if layer == 1 else 1
        prefix = "h" if layer == 1 else "p"
    return ("p",) if prefix == "p" else tuple(f"{prefix}{i}" for i in range(width))


def _check_step(predictor, T: int, t_out: int) -> None:
    steps = valid_steps(predictor, T)
    if t_out not in steps:
        raise ValueError(f"t_out={t_out} outside the valid range [{steps.start}, {steps.stop})")


def _check_pair(predictor, source: int, target: int) -> None:
    n = n_layers(predictor)
    if not (0 <= source <= target < n):
        raise ValueError(f"invalid layer pair ({source}, {target}); layers are 0..{n - 1} and source <= target")


# -- forward passes with injectable perturbations (used by finite-difference checks)


def mlp_activations(predictor, x: np.ndarray, t_out: int, inject: tuple[int, np.ndarray] | None = None) -> list[np.ndarray]:
    """Activations of every layer for the window centred at ``t_out``.

    ``inject=(layer, delta)`` adds ``delta`` to that layer's activation before
    propagating; for layer 0 ``delta`` has the routed input's (n_ch, T) shape.
    """
    x = np.array(x, dtype=np.float64)
    if inject is not None and inject[0] == 0:
        x = x + inject[1]
    l, r = predictor.window.l, predictor.window.r
    acts = [x[:, t_out - l : t_out + r + 1].reshape(-1)]
    for i, layer in enumerate(predictor.net.layers, start=1):
        a = layer.forward(acts[-1])[0]
        if inject is not None and inject[0] == i:
            a = a + inject[1]
        acts.append(a)
    return acts


def rnn_activations(predictor, x: np.ndarray, inject: tuple[int, int, np.ndarray] | None = None) -> list[np.ndarray]:
    """[inputs (T, d), hidden states (T, c), probabilities (T, 1)] of one sequence.

    ``inject=(layer, t_in, delta)`` perturbs the input (layer 0) or the hidden
    state (layer 1) at ``t_in``; the perturbed state feeds all later steps.
    """
    xs = np.array(x, dtype=np.float64).T
    cell, out = predictor.net.cell, predictor.net.output
    if inject is not None and inject[0] == 0:
        xs[inject[1]] += inject[2]
    if inject is None or inject[0] == 0:
        hs = gru_sequence_forward(cell, xs[:, None, :], np.zeros((1, cell.hidden_size)))[0][:, 0]
    else:
        _, t_in, delta = inject
        head = gru_sequence_forward(cell, xs[: t_in + 1, None, :], np.zeros((1, cell.hidden_size)))[0][:, 0]
        head[t_in] += delta
        tail = gru_sequence_forward(cell, xs[t_in + 1 :, None, :], head[t_in][None])[0][:, 0]
        hs = np.concatenate([head, tail])
    return [xs, hs, out.forward(hs)[0]]


# -- backward passes


def _gru_backward_inputs(cell: GRUCell, tape, dhs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Input and state gradients for K independent output seeds sharing one tape.

    ``tape`` is from a batch-1 forward; ``dhs`` is (T, K, c).  Returns
    (dxs (T, K, d), dh_total (T, K, c)).
    """
    T, K, c = dhs.shape
    Uzr = np.concatenate([cell.U_z, cell.U_r])
    Wzr = np.concatenate([cell.W_z, cell.W_r])
    dxs = np.empty((T, K, cell.input_size))
    dh_total = np.empty((T, K, c))
    dh_next = np.zeros((K, c))
    for t in range(T - 1, -1, -1):
        dh = dhs[t] + dh_next
        dh_total[t] = dh
        hprev, z, r, hc = tape.h_prev[t], tape.z[t], tape.r[t], tape.hc[t]
        da_h = dh * z * (1.0 - hc * hc)
        drh = da_h @ cell.U_h
        dzr = np.concatenate([dh * (hc - hprev) * z * (1.0 - z), drh * hprev * r * (1.0 - r)], axis=1)
        dh_next = dh * (1.0 - z) + drh * r + dzr @ Uzr
        dxs[t] = dzr @ Wzr + da_h @ cell.W_h
    return dxs, dh_total


def _rnn_jacobian(predictor, x: np.ndarray, source: int, target: int, t_outs, unit: int) -> np.ndarray:
    """(K, source units, T) derivatives of a_target[unit](t_out) for each t_out."""
    cell, out = predictor.net.cell, predictor.net.output
    T = x.shape[1]
    t_outs = np.asarray(t_outs)
    K = len(t_outs)
    if source == target:
        width = x.shape[0] if source == 0 else (cell.hidden_size if source == 1 else 1)
        J = np.zeros((K, width, T))
        J[np.arange(K), unit, t_outs] = 1.0
        return J
    stop = int(t_outs.max()) + 1
    hs, tape = gru_sequence_forward(cell, x[:, :stop].T[:, None, :], np.zeros((1, cell.hidden_size)))
    seed = np.zeros((stop, K, cell.hidden_size))
    if target == 2:
        p = out.forward(hs[:, 0])[0][:, 0]
        seed[t_outs, np.arange(K)] = (p[t_outs] * (1.0 - p[t_outs]))[:, None] * out.weights[0]
    else:
        seed[t_outs, np.arange(K), unit] = 1.0
    dxs, dh_total = _gru_backward_inputs(cell, tape, seed)
    grads = dxs if source == 0 else dh_total
    J = np.zeros((K, grads.shape[2], T))
    J[:, :, :stop] = grads.transpose(1, 2, 0)
    return J


def _mlp_backward(predictor, windows: np.ndarray, source: int, target: int, unit: int) -> np.ndarray:
    """Gradient of a_target[unit] with respect to a_source, one row per window."""
    layers = predictor.net.layers
    acts, caches = [windows], []
    for layer in layers[:target]:
        a, cache = layer.forward(acts[-1])
        acts.append(a)
        caches.append(cache)
    g = np.zeros_like(acts[target])
    g[:, unit] = 1.0
    for i in range(target - 1, source - 1, -1):
        g, _ = layers[i].backward(g, caches[i])
    return g


def _mlp_jacobian(predictor, x: np.ndarray, source: int, target: int, t_outs, unit: int) -> np.ndarray:
    l, r = predictor.window.l, predictor.window.r
    T = x.shape[1]
    t_outs = np.asarray(t_outs)
    K = len(t_outs)
    windows = window_matrix(x, predictor.window)[t_outs - l]
    g = _mlp_backward(predictor, windows, source, target, unit)
    if source > 0:
        J = np.zeros((K, g.shape[1], T))
        J[np.arange(K), :, t_outs] = g
        return J
    n_ch = x.shape[0]
    J = np.zeros((K, n_ch, T))
    cols = t_outs[:, None] + np.arange(-l, r + 1)[None, :]
    for c in range(n_ch):
        J[np.arange(K)[:, None], c, cols] = g[:, c * predictor.window.width : (c + 1) * predictor.window.width]
    return J


def _jacobian(predictor, x, source, target, t_outs, unit):
    if predictor.family == MLP_FAMILY:
        return _mlp_jacobian(predictor, x, source, target, t_outs, unit)
    return _rnn_jacobian(predictor, x, source, target, t_outs, unit)


def _saliency(model, segment, source, target, t_out, unit, signed, kind, batch=64) -> SaliencyMap:
    predictor, ck_id = _unpack(model)
    _check_pair(predictor, source, target)
    x = _routed(predictor, segment)
    T = x.shape[1]
    n_target = len(layer_labels(predictor, target))
    if not 0 <= unit < n_target:
        raise ValueError(f"target unit {unit} outside layer {target} (width {n_target})")
    if t_out == ALL_STEPS:
        steps = np.array(valid_steps(predictor, T))
        if steps.size == 0:
            raise ValueError("segment too short for any output step")
        total = None
        for s in range(0, steps.size, batch):
            J = _jacobian(predictor, x, source, target, steps[s : s + batch], unit)
            part = (J if signed else np.abs(J)).sum(axis=0)
            total = part if total is None else total + part
        values = total / steps.size
    else:
        t_out = int(t_out)
        _check_step(predictor, T, t_out)
        J = _jacobian(predictor, x, source, target, [t_out], unit)[0]
        values = J if signed else np.abs(J)
    meta = {
        "kind": kind,
        "checkpoint": ck_id,
        "segment": _segment_name(segment),
        "t_out": t_out,
        "source_layer": source,
        "target_layer": target,
        "target_unit": unit,
        "signed": signed,
    }
    return SaliencyMap(values, layer_labels(predictor, source), meta)


def input_saliency(model, segment, t_out, signed: bool = False) -> SaliencyMap:
    """|dp(t_out)/dx(channel, t)| over the routed inputs.

    ``t_out="all"`` averages the per-step maps over every valid output step.
    RNN gradients use untruncated backpropagation from ``t_out``.
    """
    predictor, _ = _unpack(model)
    target = n_layers(predictor) - 1
    return _saliency(model, segment, 0, target, t_out, 0, signed, "input")


def activation_saliency(model, segment, source_layer: int, target_layer: int, t_out, target_unit: int = 0,
                        signed: bool = False) -> SaliencyMap:
    """|d a_target[unit](t_out) / d a_source(i, t)|, rows = source units."""
    return _saliency(model, segment, source_layer, target_layer, t_out, target_unit, signed, "activation")


def activation_jacobian(model, segment, source_layer: int, target_layer: int, t_out: int, t_in: int) -> np.ndarray:
    """Signed (target units, source units) Jacobian between activations at two steps."""
    predictor, _ = _unpack(model)
    _check_pair(predictor, source_layer, target_layer)
    x = _routed(predictor, segment)
    _check_step(predictor, x.shape[1], t_out)
    rows = [_jacobian(predictor, x, source_layer, target_layer, [t_out], u)[0][:, t_in]
            for u in range(len(layer_labels(predictor, target_layer)))]
    return np.array(rows)
