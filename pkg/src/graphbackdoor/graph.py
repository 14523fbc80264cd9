"""Attributed graph container, GCN propagation matrix, cosine similarity and
trigger attachment."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

UNLABELED = -1


class GraphError(ValueError):
    pass


def _readonly(a):
    if a.flags.writeable or not a.flags.c_contiguous:
        a = np.array(a, order="C")
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class AttributedGraph:
    """Undirected graph in CSR form (both directions stored) with a dense
    feature matrix and per-node labels (``UNLABELED`` for none)."""

    num_nodes: int
    indptr: np.ndarray
    indices: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        for name in ("indptr", "indices", "features", "labels"):
            object.__setattr__(self, name, _readonly(getattr(self, name)))

    @classmethod
    def from_edges(cls, num_nodes, edges, features, labels=None, num_classes=None,
                   validate=True):
        """Build from an iterable/array of undirected ``(u, v)`` pairs, each
        listed once in either orientation."""
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != num_nodes:
            raise GraphError(
                f"feature matrix has {features.shape[0] if features.ndim else 0} rows, "
                f"expected {num_nodes}")
        if labels is None:
            labels = np.full(num_nodes, UNLABELED, dtype=np.int64)
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (num_nodes,):
            raise GraphError("label vector length differs from num_nodes")
        if num_classes is None:
            num_classes = int(labels.max()) + 1 if (labels >= 0).any() else 0
        if validate and len(edges):
            if edges.min() < 0 or edges.max() >= num_nodes:
                raise GraphError("edge references a node id out of range")
            if (edges[:, 0] == edges[:, 1]).any():
                raise GraphError("self-loops are not allowed")
            lo = np.minimum(edges[:, 0], edges[:, 1])
            hi = np.maximum(edges[:, 0], edges[:, 1])
            key = lo * num_nodes + hi
            if len(np.unique(key)) != len(key):
                raise GraphError("duplicate edges are not allowed")
        if validate and ((labels < UNLABELED) | (labels >= num_classes)).any():
            raise GraphError("label out of range")
        both = np.concatenate([edges, edges[:, ::-1]]) if len(edges) else edges
        adj = sp.csr_matrix(
            (np.ones(len(both)), (both[:, 0], both[:, 1])) if len(both) else
            (np.zeros(0), (np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))),
            shape=(num_nodes, num_nodes))
        adj.sort_indices()
        return cls(num_nodes, adj.indptr.astype(np.int64), adj.indices.astype(np.int64),
                   features, labels, int(num_classes))

    @property
    def num_features(self):
        return self.features.shape[1]

    @property
    def num_edges(self):
        """Undirected edge count."""
        return len(self.indices) // 2

    def degrees(self):
        return np.diff(self.indptr)

    def neighbors(self, u):
        return self.indices[self.indptr[u]:self.indptr[u + 1]]

    def adjacency(self):
        data = np.ones(len(self.indices))
        return sp.csr_matrix((data, self.indices, self.indptr),
                             shape=(self.num_nodes, self.num_nodes))

    def edge_array(self):
        """Undirected edges as an (E, 2) array with u < v, sorted."""
        rows = np.repeat(np.arange(self.num_nodes), self.degrees())
        keep = rows < self.indices
        return np.stack([rows[keep], self.indices[keep]], axis=1)

    def with_labels(self, labels):
        return AttributedGraph(self.num_nodes, self.indptr, self.indices, self.features,
                               np.asarray(labels, dtype=np.int64), self.num_classes)

    def without_edges(self, edges):
        """Copy with the given undirected edges removed."""
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if not len(edges):
            return self
        cur = self.edge_array()
        n = self.num_nodes
        drop = set((np.minimum(edges[:, 0], edges[:, 1]) * n
                    + np.maximum(edges[:, 0], edges[:, 1])).tolist())
        keys = cur[:, 0] * n + cur[:, 1]
        mask = np.array([k not in drop for k in keys.tolist()], dtype=bool)
        return AttributedGraph.from_edges(n, cur[mask], self.features, self.labels,
                                          self.num_classes, validate=False)

    def induced_subgraph(self, nodes):
        """Subgraph on ``nodes`` (re-indexed in the given order)."""
        nodes = np.asarray(nodes, dtype=np.int64)
        sub = self.adjacency()[nodes][:, nodes].tocsr()
        sub.sort_indices()
        return AttributedGraph(len(nodes), sub.indptr.astype(np.int64),
                               sub.indices.astype(np.int64), self.features[nodes],
                               self.labels[nodes], self.num_classes)

    def fingerprint(self):
        h = hashlib.sha256()
        for a in (self.indptr, self.indices, self.features, self.labels):
            h.update(np.ascontiguousarray(a).tobytes())
        h.update(str((self.num_nodes, self.num_classes)).encode())
        return h.hexdigest()


class NodeSet(tuple):
    """Ordered, de-duplicated tuple of node ids."""

    def __new__(cls, ids=(), num_nodes=None):
        seen = dict.fromkeys(int(i) for i in ids)
        if num_nodes is not None and any(i < 0 or i >= num_nodes for i in seen):
            raise GraphError("node id out of range for node set")
        return super().__new__(cls, seen)

    def array(self):
        return np.asarray(self, dtype=np.int64)


@dataclass(frozen=True)
class Trigger:
    features: np.ndarray             # s x d
    adjacency_binary: np.ndarray     # s x s, symmetric 0/1, zero diagonal
    adjacency_continuous: np.ndarray | None = None

    @property
    def size(self):
        return self.features.shape[0]

    def internal_edges(self):
        a, b = np.nonzero(np.triu(self.adjacency_binary, 1))
        return np.stack([a, b], axis=1).astype(np.int64)


# list of (u, v) pairs in the attached graph's ids; the first is the attachment edge
TriggerEdgeSet = tuple


def normalized_adjacency(graph):
    """D^-1/2 (A + I) D^-1/2 as CSR."""
    a = graph.adjacency() + sp.identity(graph.num_nodes, format="csr")
    dinv = 1.0 / np.sqrt(np.asarray(a.sum(axis=1)).ravel())
    d = sp.diags(dinv)
    out = (d @ a @ d).tocsr()
    out.sort_indices()
    return out


def mean_aggregator(graph):
    """Row-normalized adjacency without self-loops; isolated rows are zero."""
    deg = graph.degrees().astype(np.float64)
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    return (sp.diags(inv) @ graph.adjacency()).tocsr()


def cosine_similarity(x_u, x_v):
    x_u = np.asarray(x_u, dtype=np.float64)
    x_v = np.asarray(x_v, dtype=np.float64)
    if x_u.shape != x_v.shape:
        raise GraphError(f"dimension mismatch: {x_u.shape} vs {x_v.shape}")
    nu, nv = np.linalg.norm(x_u), np.linalg.norm(x_v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.clip(x_u @ x_v / (nu * nv), -1.0, 1.0))


def edge_cosine(features, edges):
    """Row-wise cosine similarity for an (E, 2) edge array; zero-norm -> 0."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if not len(edges):
        return np.zeros(0)
    a = features[edges[:, 0]]
    b = features[edges[:, 1]]
    num = np.einsum("ij,ij->i", a, b)
    den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    out = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return np.clip(out, -1.0, 1.0)


def attach_triggers(graph, targets, triggers, trigger_label=UNLABELED):
    """Attach one trigger per target; trigger copies are disjoint.

    Returns the new graph and one edge set per target, each starting with the
    attachment edge ``(target, first trigger node)``.
    """
    targets = [int(t) for t in targets]
    if len(targets) != len(triggers):
        raise GraphError("need exactly one trigger per target")
    n = graph.num_nodes
    new_edges = [graph.edge_array()]
    feats = [graph.features]
    edge_sets = []
    offset = n
    for t, trig in zip(targets, triggers):
        if not 0 <= t < graph.num_nodes:
            raise GraphError(f"target {t} out of range")
        if trig.size < 1:
            raise GraphError("trigger must have at least one node")
        internal = trig.internal_edges() + offset
        es = [(t, offset)] + [(int(u), int(v)) for u, v in internal]
        edge_sets.append(TriggerEdgeSet(es))
        new_edges.append(np.asarray(es, dtype=np.int64).reshape(-1, 2))
        feats.append(np.asarray(trig.features, dtype=np.float64))
        offset += trig.size
    labels = np.concatenate([graph.labels,
                             np.full(offset - n, trigger_label, dtype=np.int64)])
    out = AttributedGraph.from_edges(offset, np.concatenate(new_edges), np.vstack(feats),
                                     labels, graph.num_classes, validate=False)
    return out, edge_sets


def attach_trigger(graph, target, trigger):
    g, sets = attach_triggers(graph, [target], [trigger])
    return g, sets[0]
