"""Choosing which unlabeled nodes to poison.

A GCN encoder is fit on the labeled nodes; its hidden representations are
clustered separately per predicted (non-target) class, and nodes are ranked by
distance to their centroid plus a degree penalty.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import nn
from .graph import NodeSet, normalized_adjacency

log = logging.getLogger(__name__)


@dataclass
class SelectionConfig:
    budget: int
    target_class: int = 0
    lam: float = 1.0
    K: int | None = None
    encoder_epochs: int = 200
    lr: float = 0.01
    weight_decay: float = 5e-4
    optimizer: str = "adam"
    hidden: int = nn.HIDDEN
    selection_order: str = "asc"
    seed: int = 0

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if self.K is not None and self.K < 1:
            raise ValueError("K must be >= 1")
        if self.selection_order not in ("asc", "desc"):
            raise ValueError("selection_order must be 'asc' or 'desc'")

    def clusters_per_class(self, num_classes):
        if self.K is not None:
            return self.K
        return max(1, round(self.budget / max(num_classes - 1, 1)))


@dataclass
class ClusterModel:
    """Per non-target class: centroids (K, h) and member node ids per cluster."""

    centroids: dict
    members: dict

    def clusters(self):
        for c in sorted(self.members):
            for k, nodes in enumerate(self.members[c]):
                yield c, k, nodes


def train_encoder(graph, labeled, epochs=200, seed=0, hidden=nn.HIDDEN, lr=0.01,
                  weight_decay=5e-4, optimizer="adam"):
    """GCN encoder (d -> h -> h) plus a linear head; returns (params, H, Ŷ)."""
    labeled = np.asarray(labeled, dtype=np.int64)
    if labeled.size == 0:
        raise ValueError("encoder needs at least one labeled node")
    if (graph.labels[labeled] < 0).any():
        raise ValueError("labeled node without a label")
    rng = np.random.default_rng(seed)
    params = nn.init_gcn(rng, graph.num_features, hidden, hidden)
    params["W"] = nn.uniform_init(rng, hidden, (hidden, graph.num_classes))
    A_hat = normalized_adjacency(graph)
    X = nn.feature_operand(graph.features)
    opt = nn.make_optimizer(optimizer, lr, weight_decay)
    for _ in range(epochs):
        H, tape = nn.gcn_forward(params, A_hat, X, record=True)
        _, dlogits = nn.ce_loss_and_grad(H @ params["W"], graph.labels, labeled)
        grads = nn.gcn_backward(params, tape, dlogits @ params["W"].T)
        grads["W"] = H.T @ dlogits
        params = opt.step(params, grads)
    H = nn.gcn_forward(params, A_hat, X)
    return params, H, np.argmax(H @ params["W"], axis=1)


def _farthest_point_init(points, K, rng, greedy=True):
    """Seeded farthest-point start; ``greedy=False`` samples each next centre
    with probability proportional to its squared distance instead."""
    idx = [int(rng.integers(len(points)))]
    d2 = ((points - points[idx[0]]) ** 2).sum(axis=1)
    for _ in range(1, K):
        if greedy or d2.sum() == 0:
            nxt = int(np.argmax(d2))
        else:
            nxt = int(rng.choice(len(points), p=d2 / d2.sum()))
        idx.append(nxt)
        d2 = np.minimum(d2, ((points - points[nxt]) ** 2).sum(axis=1))
    return points[idx].copy()


def _lloyd(points, cent, max_iters):
    n, K = len(points), len(cent)
    assign = None
    for _ in range(max_iters):
        d2 = ((points[:, None, :] - cent[None, :, :]) ** 2).sum(axis=2)
        new = np.argmin(d2, axis=1)
        counts = np.bincount(new, minlength=K)
        for k in np.flatnonzero(counts == 0):
            far = int(np.argmax(d2[np.arange(n), new]))
            new[far] = k
            counts = np.bincount(new, minlength=K)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for k in range(K):
            cent[k] = points[assign == k].mean(axis=0)
    return assign, cent, float(((points - cent[assign]) ** 2).sum())


def kmeans(points, K, seed=0, max_iters=100, restarts=10):
    """Lloyd's algorithm from seeded farthest-point starts.

    The first start is the greedy farthest-point one; further ``restarts - 1``
    starts draw centres by squared distance.  The run with the lowest
    within-cluster sum of squares wins.  Returns ``(assignments, centroids)``.
    Empty clusters are reseeded with the point farthest from its centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n == 0:
        raise ValueError("kmeans on an empty point set")
    if n < K:
        log.warning("kmeans: %d points for K=%d, reducing K", n, K)
        K = n
    rng = np.random.default_rng(seed)
    best = None
    for r in range(max(1, restarts)):
        cent = _farthest_point_init(points, K, rng, greedy=r == 0)
        run = _lloyd(points, cent, max_iters)
        if best is None or run[2] < best[2]:
            best = run
    return best[0], best[1]


def cluster_by_class(H, pred, pool, target_class, K, seed=0):
    pool = np.asarray(pool, dtype=np.int64)
    centroids, members = {}, {}
    for c in np.unique(pred[pool]):
        if c == target_class:
            continue
        nodes = pool[pred[pool] == c]
        assign, cent = kmeans(H[nodes], K, seed=seed)
        centroids[int(c)] = cent
        members[int(c)] = [nodes[assign == k] for k in range(len(cent))]
    return ClusterModel(centroids, members)


def score_nodes(H, cluster, degrees, lam=1.0):
    """m(v) = ||h_v - c_k|| + lam * deg(v) for every clustered node."""
    scores = {}
    for c, k, nodes in cluster.clusters():
        dist = np.linalg.norm(H[nodes] - cluster.centroids[c][k], axis=1)
        for v, m in zip(nodes.tolist(), (dist + lam * degrees[nodes]).tolist()):
            scores[v] = m
    return scores


def allocate(queues, budget):
    """Fill ``budget`` from ranked per-cluster queues of ``(key, node)``.

    Each cluster first takes an equal floor share; the rest is handed out one
    node per pass to clusters in order of their best remaining key.
    """
    queues = [list(q) for q in queues if len(q)]
    if not queues:
        return []
    quota = budget // len(queues)
    chosen = []
    for q in queues:
        chosen.extend(v for _, v in q[:quota])
        del q[:quota]
    while len(chosen) < budget and any(queues):
        live = sorted((q[0], i) for i, q in enumerate(queues) if q)
        for _, i in live:
            if len(chosen) == budget:
                break
            chosen.append(queues[i].pop(0)[1])
    return chosen


def select_poisoned(graph, labeled, cfg, pool=None):
    """Pick at most ``cfg.budget`` nodes from ``pool`` (default: unlabeled nodes)."""
    labeled = np.asarray(labeled, dtype=np.int64)
    if pool is None:
        pool = np.setdiff1d(np.arange(graph.num_nodes), labeled)
    pool = np.setdiff1d(np.asarray(pool, dtype=np.int64), labeled)
    if pool.size == 0:
        raise ValueError("no unlabeled nodes to poison")
    _, H, pred = train_encoder(graph, labeled, cfg.encoder_epochs, cfg.seed, cfg.hidden,
                               cfg.lr, cfg.weight_decay, cfg.optimizer)
    K = cfg.clusters_per_class(graph.num_classes)
    cluster = cluster_by_class(H, pred, pool, cfg.target_class, K, cfg.seed)
    scores = score_nodes(H, cluster, graph.degrees().astype(np.float64), cfg.lam)
    sign = 1.0 if cfg.selection_order == "asc" else -1.0
    queues = [sorted((sign * scores[v], v) for v in nodes.tolist())
              for _, _, nodes in cluster.clusters()]
    eligible = sum(len(q) for q in queues)
    if eligible < cfg.budget:
        log.warning("budget %d exceeds %d eligible nodes; selecting all", cfg.budget, eligible)
    return NodeSet(sorted(allocate(queues, cfg.budget)))


def random_poisoned(pool, budget, seed=0):
    pool = np.asarray(pool, dtype=np.int64)
    rng = np.random.default_rng(seed)
    k = min(budget, len(pool))
    return NodeSet(sorted(rng.choice(pool, k, replace=False).tolist()))
