"""Dense forward/backward for the few model shapes the attack needs.

Parameters are plain ``dict[str, ndarray]``.  Every forward can record a
:class:`Tape` that the matching backward consumes.  Results are bit-stable for
a fixed BLAS thread count; set ``OMP_NUM_THREADS``/``GBL_THREADS`` to pin it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

HIDDEN = 32
SPARSE_DENSITY = 0.1


class TapeError(RuntimeError):
    pass


class DivergenceError(FloatingPointError):
    pass


@dataclass
class Tape:
    kind: str
    saved: dict = field(default_factory=dict)
    grad_rows: np.ndarray | None = None


def uniform_init(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def relu(x):
    return np.maximum(x, 0.0)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def ce_loss_and_grad(logits, labels, mask):
    """Mean cross-entropy over ``mask`` rows and its gradient w.r.t. logits."""
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size == 0:
        raise ValueError("cross-entropy over an empty node set")
    labels = np.asarray(labels, dtype=np.int64)
    y = labels[mask] if len(labels) == len(logits) else labels
    if len(y) != len(mask):
        raise ValueError("labels must cover every logit row or every masked row")
    if (y < 0).any() or (y >= logits.shape[1]).any():
        raise ValueError("class id outside the logit columns")
    sub = logits[mask]
    z = sub - sub.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsum - z[np.arange(len(y)), y]))
    p = np.exp(z - logsum[:, None])
    p[np.arange(len(y)), y] -= 1.0
    grad = np.zeros_like(logits)
    np.add.at(grad, mask, p / len(mask))
    return loss, grad


def feature_operand(X):
    """CSR copy of ``X`` when it is mostly zeros (bag-of-words features), else ``X``."""
    if sp.issparse(X) or X.size == 0:
        return X
    if np.count_nonzero(X) < SPARSE_DENSITY * X.size:
        return sp.csr_matrix(X)
    return X


# --------------------------------------------------------------------------- GCN

def init_gcn(rng, d, h=HIDDEN, out=None):
    out = h if out is None else out
    return {"W1": uniform_init(rng, d, (d, h)), "W2": uniform_init(rng, h, (h, out))}


def gcn_forward(params, A_hat, X, record=False, grad_rows=None):
    """logits = Â·relu(Â·X·W1)·W2."""
    W1, W2 = params["W1"], params["W2"]
    if X.shape[1] != W1.shape[0] or A_hat.shape[0] != X.shape[0]:
        raise ValueError(f"shape mismatch: A {A_hat.shape}, X {X.shape}, W1 {W1.shape}")
    Z = A_hat @ (X @ W1)
    Hd = relu(Z)
    out = A_hat @ (Hd @ W2)
    if not record:
        return out
    rows = None if grad_rows is None else np.asarray(grad_rows, dtype=np.int64)
    return out, Tape("gcn", {"A": A_hat, "X": X, "Z": Z, "H": Hd}, rows)


def gcn_backward(params, tape, dout, grad_rows=None):
    """Gradients for W1, W2 and optionally ``dX`` rows recorded at forward time."""
    if tape is None or tape.kind != "gcn":
        raise TapeError("no GCN forward recorded")
    s = tape.saved
    A = s["A"]
    dQ = A.T @ dout
    grads = {"W2": s["H"].T @ dQ}
    dZ = (dQ @ params["W2"].T) * (s["Z"] > 0)
    dP = A.T @ dZ
    grads["W1"] = s["X"].T @ dP
    if grad_rows is not None:
        grad_rows = np.asarray(grad_rows, dtype=np.int64)
        if tape.grad_rows is None or not np.isin(grad_rows, tape.grad_rows).all():
            raise TapeError("feature rows were not marked for gradients at forward time")
        grads["X"] = dP[grad_rows] @ params["W1"].T
    return grads


# ----------------------------------------------------------------- GraphSAGE (mean)

def init_sage(rng, d, h=HIDDEN, out=2):
    return {
        "Ws1": uniform_init(rng, d, (d, h)), "Wn1": uniform_init(rng, d, (d, h)),
        "b1": np.zeros(h),
        "Ws2": uniform_init(rng, h, (h, out)), "Wn2": uniform_init(rng, h, (h, out)),
        "b2": np.zeros(out),
    }


def sage_forward(params, M, X, record=False):
    """Two mean-aggregator SAGE layers; ``M`` is the row-normalized adjacency."""
    MX = M @ X
    Z = X @ params["Ws1"] + MX @ params["Wn1"] + params["b1"]
    Hd = relu(Z)
    MH = M @ Hd
    out = Hd @ params["Ws2"] + MH @ params["Wn2"] + params["b2"]
    if not record:
        return out
    return out, Tape("sage", {"M": M, "X": X, "MX": MX, "Z": Z, "H": Hd, "MH": MH})


def sage_backward(params, tape, dout):
    if tape is None or tape.kind != "sage":
        raise TapeError("no SAGE forward recorded")
    s = tape.saved
    M = s["M"]
    g = {"Ws2": s["H"].T @ dout, "Wn2": s["MH"].T @ dout, "b2": dout.sum(axis=0)}
    dH = dout @ params["Ws2"].T + M.T @ (dout @ params["Wn2"].T)
    dZ = dH * (s["Z"] > 0)
    g["Ws1"] = s["X"].T @ dZ
    g["Wn1"] = s["MX"].T @ dZ
    g["b1"] = dZ.sum(axis=0)
    return g


# ------------------------------------------------------------------------- MLP

def init_mlp(rng, d, h=HIDDEN, out=HIDDEN):
    return {"W1": uniform_init(rng, d, (d, h)), "b1": np.zeros(h),
            "W2": uniform_init(rng, h, (h, out)), "b2": np.zeros(out)}


def mlp_forward(params, X, record=False):
    """relu(relu(X·W1 + b1)·W2 + b2)."""
    Z1 = X @ params["W1"] + params["b1"]
    H1 = relu(Z1)
    Z2 = H1 @ params["W2"] + params["b2"]
    out = relu(Z2)
    if not record:
        return out
    return out, Tape("mlp", {"X": X, "Z1": Z1, "H1": H1, "Z2": Z2})


def mlp_backward(params, tape, dout):
    if tape is None or tape.kind != "mlp":
        raise TapeError("no MLP forward recorded")
    s = tape.saved
    dZ2 = dout * (s["Z2"] > 0)
    g = {"W2": s["H1"].T @ dZ2, "b2": dZ2.sum(axis=0)}
    dZ1 = (dZ2 @ params["W2"].T) * (s["Z1"] > 0)
    g["W1"] = s["X"].T @ dZ1
    g["b1"] = dZ1.sum(axis=0)
    return g, dZ1 @ params["W1"].T


# ------------------------------------------------------------------ optimizers

def _check_finite(grads):
    for k, v in grads.items():
        if not np.all(np.isfinite(v)):
            raise DivergenceError(f"non-finite gradient for {k}")


def sgd_step(params, grads, lr):
    """theta <- theta - lr * grad, returning a new dict."""
    _check_finite(grads)
    out = dict(params)
    for k, g in grads.items():
        if params[k].shape != np.shape(g):
            raise ValueError(f"gradient shape mismatch for {k}")
        out[k] = params[k] - lr * g
    return out


class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, lr=0.01, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        _check_finite(grads)
        self.t += 1
        out = dict(params)
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            if self.weight_decay:
                g = g + self.weight_decay * params[k]
            m = self.m.get(k, 0.0) * self.b1 + (1 - self.b1) * g
            v = self.v.get(k, 0.0) * self.b2 + (1 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            out[k] = params[k] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


class SGD:
    def __init__(self, lr=0.01, weight_decay=0.0):
        self.lr = lr
        self.weight_decay = weight_decay

    def step(self, params, grads):
        if self.weight_decay:
            grads = {k: g + self.weight_decay * params[k] for k, g in grads.items()}
        return sgd_step(params, grads, self.lr)


def make_optimizer(name, lr, weight_decay=0.0):
    if name == "adam":
        return Adam(lr, weight_decay)
    if name == "sgd":
        return SGD(lr, weight_decay)
    raise ValueError(f"unknown optimizer {name!r}")


# ------------------------------------------------------ finite-difference oracle

def numerical_gradient(f, x, eps=1e-4):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def relative_error(analytic, numeric):
    """max |a - n| scaled by the larger of the two max-magnitudes."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)
