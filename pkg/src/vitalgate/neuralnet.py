"""Small reverse-mode network core: dense layers, GRU, BCE, Adam, early stopping, TBPTT.

Everything is float64 numpy.  Parameters live in plain arrays that the
optimiser updates in place; ``params()`` methods return name -> array
dicts whose arrays are the live parameters, and gradient dicts use the
same keys.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LINEAR, RELU, SIGMOID = "linear", "relu", "sigmoid"
ACTIVATIONS = (LINEAR, RELU, SIGMOID)

PROB_CLAMP = 1e-7


def glorot_uniform(rng: np.random.Generator, n_out: int, n_in: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-lim, lim, size=(n_out, n_in))


def sigmoid(a):
    # tanh form: overflow-free and cheaper than exp on small arrays
    return 0.5 * np.tanh(0.5 * a) + 0.5


def _activate(a: np.ndarray, kind: str) -> np.ndarray:
    if kind == LINEAR:
        return a
    if kind == RELU:
        return np.maximum(a, 0.0)
    return sigmoid(a)


def _activation_grad(dy: np.ndarray, a: np.ndarray, y: np.ndarray, kind: str) -> np.ndarray:
    if kind == LINEAR:
        return dy
    if kind == RELU:
        return dy * (a > 0)
    return dy * y * (1.0 - y)


@dataclass
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: str = LINEAR
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64)
        self.bias = np.array(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ValueError(f"bias shape {self.bias.shape} does not match weights {self.weights.shape}")
        if self.mask is not None:
            self.mask = np.array(self.mask, dtype=np.float64)
            if self.mask.shape != self.weights.shape:
                raise ValueError("mask shape must equal weight shape")
            self.weights *= self.mask

    @classmethod
    def init(cls, n_in: int, n_out: int, activation: str, rng: np.random.Generator, mask=None) -> "DenseLayer":
        return cls(glorot_uniform(rng, n_out, n_in), np.zeros(n_out), activation, mask)

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {"weights": self.weights, "bias": self.bias}

    def forward(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"input width {x.shape[-1]} != layer input size {self.n_in}")
        a = x @ self.weights.T + self.bias
        y = _activate(a, self.activation)
        return y, (x, a, y)

    def backward(self, dy: np.ndarray, cache):
        """Return (dx, grads) given dL/dy.  Masked weights receive zero gradient."""
        x, a, y = cache
        da = _activation_grad(dy, a, y, self.activation)
        x2 = x.reshape(-1, self.n_in)
        da2 = da.reshape(-1, self.n_out)
        dW = da2.T @ x2
        if self.mask is not None:
            dW *= self.mask
        dx = da @ self.weights
        return dx, {"weights": dW, "bias": da2.sum(axis=0)}


def dense_forward(layer: DenseLayer, x) -> np.ndarray:
    return layer.forward(x)[0]


@dataclass
class GRUCell:
    """z = s(Wz x + Uz h + bz); r = s(Wr x + Ur h + br);
    h~ = tanh(Wh x + Uh (r*h) + bh); h' = (1-z)*h + z*h~."""

    W_z: np.ndarray
    W_r: np.ndarray
    W_h: np.ndarray
    U_z: np.ndarray
    U_r: np.ndarray
    U_h: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray

    NAMES = ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")

    def __post_init__(self):
        for n in self.NAMES:
            setattr(self, n, np.array(getattr(self, n), dtype=np.float64))
        c, d = self.W_z.shape
        for n in ("W_r", "W_h"):
            if getattr(self, n).shape != (c, d):
                raise ValueError(f"{n} must have shape {(c, d)}")
        for n in ("U_z", "U_r", "U_h"):
            if getattr(self, n).shape != (c, c):
                raise ValueError(f"{n} must have shape {(c, c)}")
        for n in ("b_z", "b_r", "b_h"):
            if getattr(self, n).shape != (c,):
                raise ValueError(f"{n} must have shape {(c,)}")

    @classmethod
    def init(cls, n_in: int, hidden: int, rng: np.random.Generator) -> "GRUCell":
        W = [glorot_uniform(rng, hidden, n_in) for _ in range(3)]
        U = [glorot_uniform(rng, hidden, hidden) for _ in range(3)]
        b = [np.zeros(hidden) for _ in range(3)]
        return cls(*W, *U, *b)

    @classmethod
    def zeros(cls, n_in: int, hidden: int) -> "GRUCell":
        return cls(*(np.zeros((hidden, n_in)) for _ in range(3)),
                   *(np.zeros((hidden, hidden)) for _ in range(3)),
                   *(np.zeros(hidden) for _ in range(3)))

    @property
    def hidden_size(self) -> int:
        return self.W_z.shape[0]

    @property
    def input_size(self) -> int:
        return self.W_z.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in self.NAMES}


def gru_step(cell: GRUCell, h_prev, x) -> np.ndarray:
    h_prev = np.asarray(h_prev, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != cell.input_size or h_prev.shape[-1] != cell.hidden_size:
        raise ValueError("gru_step: input or state width does not match the cell")
    z = sigmoid(x @ cell.W_z.T + h_prev @ cell.U_z.T + cell.b_z)
    r = sigmoid(x @ cell.W_r.T + h_prev @ cell.U_r.T + cell.b_r)
    hc = np.tanh(x @ cell.W_h.T + (r * h_prev) @ cell.U_h.T + cell.b_h)
    return (1.0 - z) * h_prev + z * hc


@dataclass
class _GruTape:
    xs: np.ndarray
    h_prev: np.ndarray
    z: np.ndarray
    r: np.ndarray
    hc: np.ndarray


def gru_sequence_forward(cell: GRUCell, xs: np.ndarray, h0: np.ndarray):
    """Run the cell over ``xs`` of shape (T, B, d); returns hs (T, B, c) and a tape."""
    T, B = xs.shape[0], xs.shape[1]
    c = cell.hidden_size
    # z and r gates share one matmul per step: columns [:c] are z, [c:] are r
    xzr = xs @ np.concatenate([cell.W_z, cell.W_r]).T + np.concatenate([cell.b_z, cell.b_r])
    xh = xs @ cell.W_h.T + cell.b_h
    Uzr = np.ascontiguousarray(np.concatenate([cell.U_z, cell.U_r]).T)
    UhT = np.ascontiguousarray(cell.U_h.T)
    hs = np.empty((T, B, c))
    hp = np.empty((T, B, c))
    zrs = np.empty((T, B, 2 * c))
    hcs = np.empty((T, B, c))
    h = h0
    for t in range(T):
        hp[t] = h
        zr = sigmoid(xzr[t] + h @ Uzr)
        z, r = zr[:, :c], zr[:, c:]
        hc = np.tanh(xh[t] + (r * h) @ UhT)
        h = h + z * (hc - h)
        zrs[t], hcs[t], hs[t] = zr, hc, h
    return hs, _GruTape(xs, hp, zrs[..., :c], zrs[..., c:], hcs)


def gru_sequence_backward(cell: GRUCell, tape: _GruTape, dhs: np.ndarray):
    """Backpropagate per-step dL/dh_t (direct terms only) through the recurrence.

    Returns (grads, dxs, dh0, dh_total) where ``dh_total[t]`` is the full
    derivative of the loss with respect to h_t.
    """
    T, B, c = dhs.shape
    dazr = np.empty((T, B, 2 * c))
    dah = np.empty((T, B, c))
    dh_total = np.empty((T, B, c))
    Uzr = np.ascontiguousarray(np.concatenate([cell.U_z, cell.U_r]))
    Uh = np.ascontiguousarray(cell.U_h)
    dh_next = np.zeros((B, c))
    for t in range(T - 1, -1, -1):
        dh = dhs[t] + dh_next
        dh_total[t] = dh
        hprev, z, r, hc = tape.h_prev[t], tape.z[t], tape.r[t], tape.hc[t]
        da_h = dh * z * (1.0 - hc * hc)
        drh = da_h @ Uh
        dzr = dazr[t]
        dzr[:, :c] = dh * (hc - hprev) * z * (1.0 - z)
        dzr[:, c:] = drh * hprev * r * (1.0 - r)
        dh_next = dh * (1.0 - z) + drh * r + dzr @ Uzr
        dah[t] = da_h
    flat = lambda a: a.reshape(T * B, -1)
    xs, hp = flat(tape.xs), flat(tape.h_prev)
    fz, fr, fh = flat(dazr[..., :c]), flat(dazr[..., c:]), flat(dah)
    grads = {
        "W_z": fz.T @ xs,
        "W_r": fr.T @ xs,
        "W_h": fh.T @ xs,
        "U_z": fz.T @ hp,
        "U_r": fr.T @ hp,
        "U_h": fh.T @ (flat(tape.r) * hp),
        "b_z": fz.sum(axis=0),
        "b_r": fr.sum(axis=0),
        "b_h": fh.sum(axis=0),
    }
    dxs = dazr @ np.concatenate([cell.W_z, cell.W_r]) + dah @ cell.W_h
    return grads, dxs, dh_next, dh_total


# -- loss


def bce_loss(p, y, weights=None) -> float:
    """Mean binary cross-entropy with probabilities clamped to [1e-7, 1-1e-7].

    ``weights`` (0/1 target mask) restricts the mean to unmasked entries.
    """
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {y.shape}")
    w = np.ones_like(p) if weights is None else np.asarray(weights, dtype=np.float64)
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    terms = -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))
    n = w.sum()
    if n == 0:
        raise ValueError("bce_loss over zero unmasked entries")
    return float((terms * w).sum() / n)


def bce_grad(p, y, weights=None, norm: float | None = None) -> np.ndarray:
    """dL/dp for :func:`bce_loss`; zero where the clamp is active."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.ones_like(p) if weights is None else np.asarray(weights, dtype=np.float64)
    n = w.sum() if norm is None else norm
    inside = (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)
    safe = np.where(inside, p, 0.5)
    g = (-y / safe + (1.0 - y) / (1.0 - safe)) * w / n
    return np.where(inside, g, 0.0)


# -- models


class MLP:
    """Stack of dense layers ending in a one-unit sigmoid; inputs are (N, d)."""

    def __init__(self, layers: list[DenseLayer]):
        self.layers = list(layers)

    def params(self) -> dict[str, np.ndarray]:
        return {f"layer{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params().items()}

    def forward(self, X: np.ndarray, keep: bool = False):
        caches = []
        h = X
        for layer in self.layers:
            h, cache = layer.forward(h)
            caches.append(cache)
        p = h[..., 0]
        return (p, caches) if keep else p

    def backward(self, dp: np.ndarray, caches) -> tuple[dict[str, np.ndarray], np.ndarray]:
        dh = dp[..., None]
        grads = {}
        for i in range(len(self.layers) - 1, -1, -1):
            dh, g = self.layers[i].backward(dh, caches[i])
            for k, v in g.items():
                grads[f"layer{i}.{k}"] = v
        return grads, dh

    def loss_and_grads(self, X, y, weights=None):
        p, caches = self.forward(X, keep=True)
        loss = bce_loss(p, y, weights)
        grads, _ = self.backward(bce_grad(p, y, weights), caches)
        return loss, grads


class GRUClassifier:
    """GRU cell feeding a one-unit sigmoid read-out at every timestep.

    Sequences are (T, B, d); probabilities come back as (T, B).
    """

    def __init__(self, cell: GRUCell, output: DenseLayer):
        if output.n_in != cell.hidden_size or output.n_out != 1:
            raise ValueError("output layer must map hidden_size -> 1")
        self.cell = cell
        self.output = output

    def params(self) -> dict[str, np.ndarray]:
        out = {f"cell.{k}": v for k, v in self.cell.params().items()}
        out.update({f"out.{k}": v for k, v in self.output.params().items()})
        return out

    def initial_state(self, batch: int) -> np.ndarray:
        return np.zeros((batch, self.cell.hidden_size))

    def forward(self, xs: np.ndarray, h0: np.ndarray | None = None) -> np.ndarray:
        xs = _as_tbd(xs)
        h0 = self.initial_state(xs.shape[1]) if h0 is None else h0
        hs, _ = gru_sequence_forward(self.cell, xs, h0)
        return self.output.forward(hs)[0][..., 0]

    def _chunk(self, xs, ys, w, h0, norm):
        hs, tape = gru_sequence_forward(self.cell, xs, h0)
        p, ocache = self.output.forward(hs)
        p = p[..., 0]
        pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
        loss_sum = float((-(ys * np.log(pc) + (1 - ys) * np.log1p(-pc)) * w).sum())
        dp = bce_grad(p, ys, w, norm=norm)
        dhs, og = self.output.backward(dp[..., None], ocache)
        cg, dxs, dh0, _ = gru_sequence_backward(self.cell, tape, dhs)
        grads = {f"cell.{k}": v for k, v in cg.items()}
        grads.update({f"out.{k}": v for k, v in og.items()})
        return loss_sum, grads, hs[-1], dh0

    def sequence_gradients(self, xs, ys, weights=None, chunk: int | None = None, h0=None):
        """Loss (mean over unmasked steps) and its gradient.

        With ``chunk`` set, gradients are truncated at chunk boundaries while
        the hidden state is carried across them; ``chunk=None`` is full BPTT.
        """
        xs, ys, w = _as_tbd(xs), _as_tb(ys), _as_tb(weights if weights is not None else np.ones(np.shape(ys)))
        T = xs.shape[0]
        if T == 0:
            raise ValueError("empty sequence")
        norm = w.sum()
        h = self.initial_state(xs.shape[1]) if h0 is None else h0
        step = T if chunk is None else chunk
        total = 0.0
        grads = None
        for s in range(0, T, step):
            e = min(T, s + step)
            loss, g, h, _ = self._chunk(xs[s:e], ys[s:e], w[s:e], h, norm)
            total += loss
            grads = g if grads is None else {k: grads[k] + g[k] for k in grads}
        return total / norm, grads


def _as_tbd(xs) -> np.ndarray:
    xs = np.asarray(xs, dtype=np.float64)
    return xs[:, None, :] if xs.ndim == 2 else xs


def _as_tb(ys) -> np.ndarray:
    ys = np.asarray(ys, dtype=np.float64)
    return ys[:, None] if ys.ndim == 1 else ys


# -- optimisation


class Adam:
    def __init__(self, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update ``params`` in place with bias-corrected moments."""
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, p in params.items():
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adam_step(state: Adam, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    state.step(params, grads)
    return params


def snapshot(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in params.items()}


def restore(params: dict[str, np.ndarray], saved: dict[str, np.ndarray]) -> None:
    for k, v in params.items():
        v[...] = saved[k]


class EarlyStopper:
    """Stop after the validation cost worsens on two successive checks.

    Checks happen every ``interval`` epochs; each cost is compared with the
    previous check.  The minimum-cost weights are kept for restoration.
    """

    def __init__(self, interval: int = 5, patience: int = 2):
        self.interval = interval
        self.patience = patience
        self.worsened = 0
        self.last_cost: float | None = None
        self.best_cost = np.inf
        self.best_epoch: int | None = None
        self.best_weights: dict[str, np.ndarray] | None = None
        self.history: list[tuple[int, float]] = []

    def check(self, epoch: int, cost: float, weights: dict[str, np.ndarray]) -> bool:
        if epoch % self.interval:
            raise ValueError(f"early-stopping checks run every {self.interval} epochs, got epoch {epoch}")
        self.history.append((epoch, cost))
        if cost < self.best_cost:
            self.best_cost = cost
            self.best_epoch = epoch
            self.best_weights = snapshot(weights)
        if self.last_cost is not None and cost > self.last_cost:
            self.worsened += 1
        else:
            self.worsened = 0
        self.last_cost = cost
        return self.worsened >= self.patience


def early_stop_check(stopper: EarlyStopper, epoch: int, cost: float, weights: dict[str, np.ndarray]):
    """Return ``("continue", None)`` or ``("stop", best_weights)``."""
    if stopper.check(epoch, cost, weights):
        return "stop", stopper.best_weights
    return "continue", None


def tbptt_train(model: GRUClassifier, xs, ys, optimizer: Adam, chunk: int = 256, weights=None, h0=None) -> list[float]:
    """One pass of truncated BPTT with an optimiser step after every chunk.

    Targets are used as given (delay them beforehand).  The hidden state
    carries across chunks but gradients stop at chunk boundaries; the last,
    shorter chunk is trained as is.  Returns per-chunk mean losses.
    """
    xs, ys = _as_tbd(xs), _as_tb(ys)
    w = _as_tb(weights if weights is not None else np.ones(ys.shape))
    T = xs.shape[0]
    if T == 0:
        raise ValueError("empty sequence")
    h = model.initial_state(xs.shape[1]) if h0 is None else h0
    params = model.params()
    losses = []
    for s in range(0, T, chunk):
        e = min(T, s + chunk)
        n = w[s:e].sum()
        if n == 0:
            h = _advance(model, xs[s:e], h)
            continue
        loss, grads, h, _ = model._chunk(xs[s:e], ys[s:e], w[s:e], h, n)
        optimizer.step(params, grads)
        losses.append(loss / n)
    return losses


def _advance(model: GRUClassifier, xs, h):
    hs, _ = gru_sequence_forward(model.cell, xs, h)
    return hs[-1]


def chunk_bounds(T: int, chunk: int) -> list[tuple[int, int]]:
    return [(s, min(T, s + chunk)) for s in range(0, T, chunk)]
