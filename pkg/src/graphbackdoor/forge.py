"""Adaptive trigger generator and its bi-level training against a surrogate GCN.

The generator maps a node's features to a trigger of ``s`` nodes: an MLP body
followed by a feature head (``s*d`` outputs) and a structure head (``s*s``
outputs).  The structure head is symmetrized, squashed with a sigmoid and
thresholded at 0.5; the forward pass only ever sees the 0/1 adjacency while
gradients flow to the continuous values unchanged (straight-through).

Attack loss for a node is read from the surrogate's logit of that node with
only its own trigger attached to the clean graph.  For a two-layer GCN this
touches the node, its neighbours (whose normalization changes because the
node's degree grows by one) and the trigger; :func:`attached_logits` evaluates
it in closed form instead of materializing one graph per node.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields

import numpy as np
import scipy.sparse as sp

from . import nn
from .graph import UNLABELED, Trigger, attach_triggers, normalized_adjacency

log = logging.getLogger(__name__)


# ------------------------------------------------------------------- generator

@dataclass
class GeneratorParams:
    params: dict
    s: int
    d: int

    def validate(self):
        p, s, d = self.params, self.s, self.d
        h = p["W1"].shape[1]
        want = {"W1": (d, h), "b1": (h,), "W2": (h, p["W2"].shape[1]),
                "b2": (p["W2"].shape[1],)}
        hm = p["W2"].shape[1]
        want.update({"Wf": (hm, s * d), "bf": (s * d,), "Wa": (hm, s * s), "ba": (s * s,)})
        for k, shape in want.items():
            if k not in p or p[k].shape != shape:
                got = None if k not in p else p[k].shape
                raise ValueError(f"generator weight {k}: expected {shape}, got {got}")
        return self


def init_generator(rng, d, s, hidden=nn.HIDDEN):
    p = nn.init_mlp(rng, d, hidden, hidden)
    p["Wf"] = nn.uniform_init(rng, hidden, (hidden, s * d))
    p["bf"] = np.zeros(s * d)
    p["Wa"] = nn.uniform_init(rng, hidden, (hidden, s * s))
    p["ba"] = np.zeros(s * s)
    return GeneratorParams(p, s, d)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def generator_forward(gen, X, record=False, clamp=None):
    """Triggers for every row of ``X``.

    Returns ``(features (m,s,d), adj_continuous (m,s,s), adj_binary (m,s,s))``
    and a tape when ``record``.  ``clamp`` is an optional ``(lo, hi)`` pair of
    per-dimension bounds applied to the generated features.
    """
    p, s, d = gen.params, gen.s, gen.d
    X = np.atleast_2d(X)
    if X.shape[1] != d:
        raise ValueError(f"generator expects {d} features, got {X.shape[1]}")
    m = len(X)
    if record:
        hm, mlp_tape = nn.mlp_forward(p, X, record=True)
    else:
        hm = nn.mlp_forward(p, X)
    F = (hm @ p["Wf"] + p["bf"]).reshape(m, s, d)
    inside = None
    if clamp is not None:
        lo, hi = clamp
        inside = (F >= lo) & (F <= hi)
        F = np.clip(F, lo, hi)
    M = (hm @ p["Wa"] + p["ba"]).reshape(m, s, s)
    S = 0.5 * (M + M.transpose(0, 2, 1))
    off = 1.0 - np.eye(s)
    sig = _sigmoid(S)
    A_cont = sig * off
    A_bin = (sig >= 0.5) * off
    if not record:
        return F, A_cont, A_bin
    tape = nn.Tape("generator", {"mlp": mlp_tape, "hm": hm, "sig": sig, "inside": inside})
    return F, A_cont, A_bin, tape


def generator_backward(gen, tape, dF, dA):
    """Gradients of the generator weights given upstream grads w.r.t. trigger
    features and w.r.t. the (binarized) edge weights used downstream."""
    if tape is None or tape.kind != "generator":
        raise nn.TapeError("no generator forward recorded")
    p, s, d = gen.params, gen.s, gen.d
    sv = tape.saved
    m = len(sv["hm"])
    if sv["inside"] is not None:
        dF = dF * sv["inside"]
    off = 1.0 - np.eye(s)
    sig = sv["sig"]
    dS = dA * off * sig * (1.0 - sig)
    dM = 0.5 * (dS + dS.transpose(0, 2, 1))
    dF = dF.reshape(m, s * d)
    dM = dM.reshape(m, s * s)
    g = {"Wf": sv["hm"].T @ dF, "bf": dF.sum(axis=0),
         "Wa": sv["hm"].T @ dM, "ba": dM.sum(axis=0)}
    dhm = dF @ p["Wf"].T + dM @ p["Wa"].T
    gm, _ = nn.mlp_backward(p, sv["mlp"], dhm)
    g.update(gm)
    return g


def generate_trigger(gen, x, clamp=None):
    F, A_cont, A_bin = generator_forward(gen, np.asarray(x, dtype=np.float64)[None, :],
                                         clamp=clamp)
    return Trigger(F[0], A_bin[0], A_cont[0])


def generate_triggers(gen, X, clamp=None):
    if len(X) == 0:
        return []
    F, A_cont, A_bin = generator_forward(gen, X, clamp=clamp)
    return [Trigger(F[i], A_bin[i], A_cont[i]) for i in range(len(F))]


# -------------------------------------------------- per-node attached forward

@dataclass
class SurrogateContext:
    """Frozen-surrogate quantities of the clean graph the outer loss reuses."""

    A: sp.csr_matrix
    deg1: np.ndarray          # degree + 1 (self-loop)
    P: np.ndarray             # X W1
    Z: np.ndarray             # Â X W1
    S_nb: np.ndarray          # sum_j P_j / sqrt(deg1_j) over neighbours
    W1: np.ndarray
    W2: np.ndarray


def surrogate_context(graph, theta_s, A_hat=None, X_op=None):
    A = graph.adjacency()
    deg1 = graph.degrees().astype(np.float64) + 1.0
    A_hat = normalized_adjacency(graph) if A_hat is None else A_hat
    X_op = nn.feature_operand(graph.features) if X_op is None else X_op
    P = X_op @ theta_s["W1"]
    Z = A_hat @ P
    S_nb = A @ (P / np.sqrt(deg1)[:, None])
    return SurrogateContext(A, deg1, P, Z, S_nb, theta_s["W1"], theta_s["W2"])


def _neighbour_term(ctx, idx):
    """sum_j relu(Z_j + P_i c_ij) / sqrt(deg1_j) with node i's degree bumped by one."""
    sub = ctx.A[idx]
    counts = np.diff(sub.indptr)
    rows = np.repeat(np.arange(len(idx)), counts)
    cols = sub.indices
    di = ctx.deg1[idx]
    dj = ctx.deg1[cols]
    c = (1.0 / np.sqrt(di[rows] + 1.0) - 1.0 / np.sqrt(di[rows])) / np.sqrt(dj)
    vals = nn.relu(ctx.Z[cols] + ctx.P[idx][rows] * c[:, None]) / np.sqrt(dj)[:, None]
    R = np.zeros((len(idx), ctx.P.shape[1]))
    np.add.at(R, rows, vals)
    return R


def attached_logits(ctx, idx, F, B, record=False):
    """Logits of nodes ``idx`` under the frozen surrogate, each with its own
    trigger ``(F[k], B[k])`` attached through trigger node 0.

    ``B`` holds edge weights (0/1 in normal use; continuous values are allowed
    so the algebra can be gradient-checked).
    """
    idx = np.asarray(idx, dtype=np.int64)
    m, s, _ = F.shape
    W1, W2 = ctx.W1, ctx.W2
    di = ctx.deg1[idx] + 1.0
    e0 = np.zeros(s)
    e0[0] = 1.0
    delta = 1.0 + B.sum(axis=2) + e0                       # (m, s)
    rs = 1.0 / np.sqrt(delta)
    Q = F @ W1                                             # (m, s, h)
    N = (B + np.eye(s)) * rs[:, :, None] * rs[:, None, :]  # (m, s, s)
    Pi = ctx.P[idx]
    a0 = 1.0 / np.sqrt(di * delta[:, 0])                   # attachment edge weight
    zt = N @ Q
    zt[:, 0] += Pi * a0[:, None]
    zi = Pi / di[:, None] + ctx.S_nb[idx] / np.sqrt(di)[:, None] + Q[:, 0] * a0[:, None]
    R = _neighbour_term(ctx, idx)
    Hi = nn.relu(zi)
    Ht0 = nn.relu(zt[:, 0])
    hid = Hi / di[:, None] + R / np.sqrt(di)[:, None] + Ht0 * a0[:, None]
    logits = hid @ W2
    if not record:
        return logits
    tape = nn.Tape("attached", dict(idx=idx, di=di, delta=delta, rs=rs, Q=Q, N=N, Pi=Pi,
                                    a0=a0, zt=zt, zi=zi, Ht0=Ht0, B=B, F=F))
    return logits, tape


def attached_backward(ctx, tape, dlogits):
    """Gradients w.r.t. trigger features ``F`` and edge weights ``B``."""
    if tape is None or tape.kind != "attached":
        raise nn.TapeError("no attached forward recorded")
    t = tape.saved
    di, delta, rs, Q, N, Pi, a0 = (t[k] for k in ("di", "delta", "rs", "Q", "N", "Pi", "a0"))
    zt, zi, Ht0, B = t["zt"], t["zi"], t["Ht0"], t["B"]
    m, s, h = Q.shape
    dhid = dlogits @ ctx.W2.T                                   # (m, h)
    dzi = (dhid / di[:, None]) * (zi > 0)
    dHt0 = dhid * a0[:, None]
    da0 = np.einsum("mh,mh->m", dhid, Ht0)
    dzt = np.zeros_like(zt)
    dzt[:, 0] = dHt0 * (zt[:, 0] > 0)
    # zt = N Q + e0 Pi a0 ; zi = ... + Q0 a0
    dQ = N.transpose(0, 2, 1) @ dzt
    dQ[:, 0] += dzi * a0[:, None]
    da0 += np.einsum("mh,mh->m", dzt[:, 0], Pi) + np.einsum("mh,mh->m", dzi, Q[:, 0])
    dN = dzt @ Q.transpose(0, 2, 1)                             # (m, s, s)
    # a0 = (di * delta0)^-1/2
    ddelta = np.zeros_like(delta)
    ddelta[:, 0] += da0 * (-0.5) * a0 / delta[:, 0]
    # N_ab = (B_ab + I_ab) rs_a rs_b, rs = delta^-1/2
    Bi = B + np.eye(s)
    dB = dN * rs[:, :, None] * rs[:, None, :]
    drs = np.einsum("mab,mab,mb->ma", dN, Bi, rs) + np.einsum("mab,mab,ma->mb", dN, Bi, rs)
    ddelta += drs * (-0.5) * rs ** 3
    dB = dB + ddelta[:, :, None]                                # delta_a = 1 + sum_b B_ab + e0
    dF = dQ @ ctx.W1.T
    return dF, dB


# ---------------------------------------------------------- unnoticeable loss

def trigger_edge_similarities(x_targets, F, A_bin):
    """(attachment sims (m,), internal cosine matrix (m,s,s))."""
    nx = np.linalg.norm(x_targets, axis=1)
    nF = np.linalg.norm(F, axis=2)
    Fn = np.divide(F, nF[:, :, None], out=np.zeros_like(F), where=nF[:, :, None] > 0)
    xn = np.divide(x_targets, nx[:, None], out=np.zeros_like(x_targets), where=nx[:, None] > 0)
    att = np.einsum("md,md->m", xn, Fn[:, 0])
    G = Fn @ Fn.transpose(0, 2, 1)
    return np.clip(att, -1, 1), np.clip(G, -1, 1)


def unnoticeable_loss(x_targets, F, A_bin, T):
    """Sum over nodes of sum_{edges in E_B^i} max(0, T - sim), and d/dF.

    Contributing edges are the attachment edge plus the internal edges present
    in ``A_bin``; the attached node's features are constants.
    """
    m, s, _ = F.shape
    nx = np.sqrt(np.einsum("md,md->m", x_targets, x_targets))
    n2 = np.einsum("msd,msd->ms", F, F)
    nF = np.sqrt(n2)
    inv = np.divide(1.0, nF, out=np.zeros_like(nF), where=nF > 0)
    invx = np.divide(1.0, nx, out=np.zeros_like(nx), where=nx > 0)
    dot0 = np.einsum("md,md->m", x_targets, F[:, 0])
    att = dot0 * invx * inv[:, 0]
    G = (F @ F.transpose(0, 2, 1)) * inv[:, :, None] * inv[:, None, :]
    upper = np.triu(np.ones((s, s)), 1) * A_bin
    h_att = np.maximum(0.0, T - att)
    h_int = np.maximum(0.0, T - G) * upper
    loss = float(h_att.sum() + h_int.sum())

    # d cos(a, b) / d a = b / (|a||b|) - cos(a, b) a / |a|^2
    W = -((h_int > 0) * upper)
    W = W + W.transpose(0, 2, 1)
    coef = W * inv[:, :, None] * inv[:, None, :]
    dF = coef @ F - ((W * G).sum(axis=2) * inv * inv)[:, :, None] * F
    w_att = -(h_att > 0).astype(np.float64)
    dF[:, 0] += (w_att * invx * inv[:, 0])[:, None] * x_targets
    dF[:, 0] -= (w_att * att * inv[:, 0] ** 2)[:, None] * F[:, 0]
    return loss, dF


# ------------------------------------------------------------- bi-level loop

@dataclass
class BilevelConfig:
    target_class: int = 0
    trigger_size: int = 3
    beta: float = 1.0
    T: float = 0.5
    inner_steps: int = 5
    outer_epochs: int = 200
    lr_s: float = 0.01
    lr_g: float = 0.01
    optimizer: str = "adam"
    weight_decay: float = 5e-4
    hidden: int = nn.HIDDEN
    batch_size: int = 512
    full_batch_limit: int = 4096
    clamp_features: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if not 0.0 <= self.T <= 1.0:
            raise ValueError("T must lie in [0, 1]")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.trigger_size < 1:
            raise ValueError("trigger_size must be >= 1")


@dataclass
class TraceRow:
    epoch: int
    L_s: float
    L_g: float
    L_c: float | None


@dataclass
class FitResult:
    generator: GeneratorParams
    surrogate: dict
    trace: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)


def _clamp_bounds(graph, enabled):
    if not enabled:
        return None
    return graph.features.min(axis=0), graph.features.max(axis=0)


def poisoned_training_view(graph, labeled, vp, gen, target_class, clamp=None, X_op=None):
    """Training graph with V_P triggers attached, its Â, the feature operand for
    the surrogate and the loss mask / labels.

    ``X_op`` is ``nn.feature_operand(graph.features)`` if already computed.
    """
    vp = np.asarray(vp, dtype=np.int64)
    triggers = generate_triggers(gen, graph.features[vp], clamp=clamp)
    g, _ = attach_triggers(graph, vp, triggers) if len(vp) else (graph, [])
    if X_op is None:
        X_op = nn.feature_operand(graph.features)
    if sp.issparse(X_op):
        extra = g.features[graph.num_nodes:]
        Xs = sp.vstack([X_op, sp.csr_matrix(extra)], format="csr") if len(extra) else X_op
    else:
        Xs = g.features
    labels = np.full(g.num_nodes, UNLABELED, dtype=np.int64)
    labeled = np.asarray(labeled, dtype=np.int64)
    labels[labeled] = graph.labels[labeled]
    labels[vp] = target_class
    mask = np.concatenate([labeled, vp]).astype(np.int64)
    return g, normalized_adjacency(g), Xs, mask, labels


def surrogate_inner_update(theta_s, opt, A_hat, X, mask, labels):
    """One descent step of the surrogate on its cross-entropy over ``mask``."""
    logits, tape = nn.gcn_forward(theta_s, A_hat, X, record=True)
    loss, dlogits = nn.ce_loss_and_grad(logits, labels, mask)
    if not math.isfinite(loss):
        raise nn.DivergenceError("non-finite surrogate loss")
    grads = nn.gcn_backward(theta_s, tape, dlogits)
    return opt.step(theta_s, grads), loss


def outer_objective(gen, ctx, graph, batch, target_class, beta, T, clamp=None):
    """(L_g + beta L_c) / |batch| and its generator gradients.

    Returns ``(objective, grads, L_g_mean, L_c_mean)``.
    """
    X = graph.features[batch]
    F, _, A_bin, gtape = generator_forward(gen, X, record=True, clamp=clamp)
    logits, atape = attached_logits(ctx, batch, F, A_bin, record=True)
    m = len(batch)
    y = np.full(m, target_class, dtype=np.int64)
    lg, dlogits = nn.ce_loss_and_grad(logits, y, np.arange(m))
    dF, dB = attached_backward(ctx, atape, dlogits)
    lc_mean = None
    obj = lg
    if beta > 0:
        lc, dFc = unnoticeable_loss(X, F, A_bin, T)
        lc_mean = lc / m
        obj = lg + beta * lc_mean
        dF = dF + (beta / m) * dFc
    grads = generator_backward(gen, gtape, dF, dB)
    return obj, grads, lg, lc_mean


def generator_outer_update(gen, opt, ctx, graph, batch, target_class, beta, T, clamp=None):
    obj, grads, lg, lc = outer_objective(gen, ctx, graph, batch, target_class, beta, T, clamp)
    if not math.isfinite(obj):
        raise nn.DivergenceError("non-finite generator objective")
    return GeneratorParams(opt.step(gen.params, grads), gen.s, gen.d), lg, lc


def outer_pool(graph, labeled):
    return np.setdiff1d(np.arange(graph.num_nodes), np.asarray(labeled, dtype=np.int64))


def fit_generator(graph, labeled, vp, cfg):
    """Alternate ``inner_steps`` surrogate updates with one generator update.

    Graphs with more than ``cfg.full_batch_limit`` nodes use a fresh seeded
    minibatch of ``cfg.batch_size`` nodes per outer step.
    """
    rng = np.random.default_rng(cfg.seed)
    d, C = graph.num_features, graph.num_classes
    gen = init_generator(rng, d, cfg.trigger_size, cfg.hidden)
    theta_s = nn.init_gcn(rng, d, cfg.hidden, C)
    opt_s = nn.make_optimizer(cfg.optimizer, cfg.lr_s, cfg.weight_decay)
    opt_g = nn.make_optimizer(cfg.optimizer, cfg.lr_g, 0.0)
    clamp = _clamp_bounds(graph, cfg.clamp_features)
    pool = outer_pool(graph, labeled)
    A_clean = normalized_adjacency(graph)
    X_op = nn.feature_operand(graph.features)
    result = FitResult(gen, theta_s)
    for epoch in range(cfg.outer_epochs):
        t0 = time.perf_counter()
        _, A_hat, Xs, mask, labels = poisoned_training_view(graph, labeled, vp, gen,
                                                            cfg.target_class, clamp, X_op)
        try:
            for _ in range(cfg.inner_steps):
                theta_s, ls = surrogate_inner_update(theta_s, opt_s, A_hat, Xs, mask, labels)
            if graph.num_nodes > cfg.full_batch_limit and len(pool) > cfg.batch_size:
                batch = np.sort(rng.choice(pool, cfg.batch_size, replace=False))
            else:
                batch = pool
            ctx = surrogate_context(graph, theta_s, A_clean, X_op)
            gen, lg, lc = generator_outer_update(gen, opt_g, ctx, graph, batch,
                                                 cfg.target_class, cfg.beta, cfg.T, clamp)
        except nn.DivergenceError as e:
            raise nn.DivergenceError(f"epoch {epoch}: {e}") from None
        result.trace.append(TraceRow(epoch, ls, lg, lc))
        result.epoch_seconds.append(time.perf_counter() - t0)
    result.generator, result.surrogate = gen, theta_s
    return result


def poison_graph(graph, vp, gen, target_class, clamp=None):
    """Attach a generated trigger to every node of ``vp`` and relabel them.

    Returns ``(G_B, {node: target_class}, [TriggerEdgeSet, ...])``.
    """
    vp = [int(v) for v in vp]
    if not vp:
        return graph, {}, []
    triggers = generate_triggers(gen, graph.features[vp], clamp=clamp)
    g, edge_sets = attach_triggers(graph, vp, triggers)
    labels = g.labels.copy()
    labels[vp] = target_class
    return g.with_labels(labels), {v: target_class for v in vp}, edge_sets


def config_fields(cls):
    return [f.name for f in fields(cls)]
