"""Similarity-based edge pruning, label discarding and edge-similarity histograms."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .graph import edge_cosine

MODES = ("none", "prune", "prune_ld")
HIST_BINS = 50


@dataclass
class DefenseConfig:
    mode: str = "none"
    quantile: float | None = 0.1
    threshold: float | None = None
    apply_at_inference: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown defense {self.mode!r}; expected one of {', '.join(MODES)}")
        if self.threshold is not None:
            self.quantile = None
        if self.quantile is None and self.threshold is None:
            raise ValueError("set either quantile or threshold")
        if self.quantile is not None and not 0.0 <= self.quantile <= 1.0:
            raise ValueError("quantile must lie in [0, 1]")


def quantile_threshold(sims, q):
    """Similarity value at the ``q`` position of the sorted edge similarities.

    Removing edges strictly below it drops at most ``ceil(q |E|)`` edges.
    """
    if len(sims) == 0:
        return -math.inf
    k = math.ceil(q * len(sims) - 1e-9)
    if k <= 0:
        return -math.inf
    srt = np.sort(sims)
    return float(srt[min(k, len(srt) - 1)]) if k < len(srt) else math.inf


def similarity_threshold(graph, cfg):
    if cfg.threshold is not None:
        return float(cfg.threshold)
    return quantile_threshold(edge_cosine(graph.features, graph.edge_array()), cfg.quantile)


def prune(graph, cfg, threshold=None):
    """Remove edges with cosine similarity strictly below the threshold.

    Returns ``(graph', removed (k, 2), threshold)``.
    """
    edges = graph.edge_array()
    sims = edge_cosine(graph.features, edges)
    if threshold is None:
        threshold = (float(cfg.threshold) if cfg.threshold is not None
                     else quantile_threshold(sims, cfg.quantile))
    drop = sims < threshold
    removed = edges[drop]
    return graph.without_edges(removed), removed, threshold


def prune_ld(graph, labeled, cfg, poisoned_labels=None, threshold=None):
    """Prune, then forget labels of every endpoint of a removed edge.

    Returns ``(graph', labeled', removed, discarded, poisoned_labels', threshold)``.
    """
    g, removed, thr = prune(graph, cfg, threshold)
    touched = np.unique(removed.ravel())
    labeled = np.asarray(labeled, dtype=np.int64)
    keep = ~np.isin(labeled, touched)
    discarded = labeled[~keep]
    table = None
    if poisoned_labels is not None:
        table = {v: y for v, y in poisoned_labels.items() if v not in set(touched.tolist())}
    return g, labeled[keep], removed, discarded, table, thr


def apply_defense(graph, labeled, cfg, poisoned_labels=None):
    """Dispatch on ``cfg.mode``; returns a dict of the defended artifacts."""
    labeled = np.asarray(labeled, dtype=np.int64)
    if cfg.mode == "none":
        return dict(graph=graph, labeled=labeled, removed=np.zeros((0, 2), dtype=np.int64),
                    discarded=np.zeros(0, dtype=np.int64), threshold=None,
                    poisoned_labels=poisoned_labels)
    if cfg.mode == "prune":
        g, removed, thr = prune(graph, cfg)
        return dict(graph=g, labeled=labeled, removed=removed,
                    discarded=np.zeros(0, dtype=np.int64), threshold=thr,
                    poisoned_labels=poisoned_labels)
    g, lab, removed, disc, table, thr = prune_ld(graph, labeled, cfg, poisoned_labels)
    return dict(graph=g, labeled=lab, removed=removed, discarded=disc, threshold=thr,
                poisoned_labels=table)


def trigger_edge_flags(graph, trigger_edges):
    """Boolean flag per row of ``graph.edge_array()``: came from a trigger."""
    edges = graph.edge_array()
    n = graph.num_nodes
    keys = set()
    for es in trigger_edges:
        for u, v in es:
            keys.add(min(u, v) * n + max(u, v))
    return np.array([k in keys for k in (edges[:, 0] * n + edges[:, 1]).tolist()], dtype=bool)


def edge_similarity_histogram(graph, flags, bins=HIST_BINS):
    """Counts of trigger and clean edge similarities over ``bins`` bins in [-1, 1]."""
    sims = edge_cosine(graph.features, graph.edge_array())
    flags = np.asarray(flags, dtype=bool)
    edges_b = np.linspace(-1.0, 1.0, bins + 1)
    trig, _ = np.histogram(sims[flags], bins=edges_b)
    clean, _ = np.histogram(sims[~flags], bins=edges_b)
    return edges_b[:-1], trig, clean


def histogram_csv(bin_left, trig, clean):
    lines = ["bin_left,trigger_count,clean_count"]
    lines += [f"{b:.2f},{t},{c}" for b, t, c in zip(bin_left, trig, clean)]
    return "\n".join(lines) + "\n"
