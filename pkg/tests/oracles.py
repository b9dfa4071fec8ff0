"""Independent reference computations used by the unit and acceptance tests."""

import math

import numpy as np

from vitalgate.neuralnet import DenseLayer, GRUCell, gru_step


def rel_err(a, b) -> float:
    """Array-level relative error ||a - b|| / max(||a||, ||b||)."""
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def fd_gradients(loss, params: dict, eps: float = 1e-5) -> dict:
    """Central differences of ``loss()`` w.r.t. every entry of every array in ``params`` (mutated in place)."""
    out = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = loss()
            flat[i] = old - eps
            down = loss()
            flat[i] = old
            gflat[i] = (up - down) / (2 * eps)
        out[name] = g
    return out


def pair_auc(scores, labels) -> float:
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    pos, neg = s[y == 1], s[y == 0]
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def mc_expected_improvement(mu, sigma, f_best, n=10**6, seed=0, with_se=False):
    """Monte Carlo EI; ``with_se`` also returns the standard error of the estimate."""
    z = np.random.default_rng(seed).standard_normal(n)
    imp = np.maximum(f_best - (mu + sigma * z), 0.0)
    if with_se:
        return float(imp.mean()), float(imp.std() / np.sqrt(n))
    return float(imp.mean())


def matern52_scalar(a, b, ls, var) -> float:
    r = math.sqrt(sum(((x - y) / l) ** 2 for x, y, l in zip(a, b, ls)))
    s = math.sqrt(5.0) * r
    return var * (1 + s + s * s / 3) * math.exp(-s)


def gp_posterior_direct(X, y, Xq, ls, var, noise):
    """Posterior mean/variance by a plain linear solve (no Cholesky)."""
    K = np.array([[matern52_scalar(a, b, ls, var) for b in X] for a in X]) + noise * np.eye(len(X))
    Ks = np.array([[matern52_scalar(q, b, ls, var) for b in X] for q in Xq])
    mean = Ks @ np.linalg.solve(K, y)
    cov = var - np.einsum("ij,ji->i", Ks, np.linalg.solve(K, Ks.T))
    return mean, cov


def gru_unroll(cell: GRUCell, out: DenseLayer, xs, h0):
    """Step-by-step GRU + sigmoid read-out; returns (probabilities, final state)."""
    h = np.array(h0, dtype=float)
    ps = []
    for x in xs:
        h = gru_step(cell, h, x)
        ps.append(out.forward(h)[0][..., 0])
    return np.array(ps), h

