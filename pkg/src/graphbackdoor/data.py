"""Plain-text graph bundles, synthetic graph generators and artifact persistence.

Bundle layout (one directory)::

    meta.txt      key=value lines (name, num_nodes, d, C, format_version)
    edges.txt     "u v" per undirected edge
    features.txt  one whitespace-separated row per node
    labels.txt    class id or "-" per node

Poisoned bundles add ``poisoned_labels.txt`` ("node label"), ``vp.txt`` and
``trigger_edges.txt`` ("owner u v"; the first row of each owner is its
attachment edge).
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import UNLABELED, AttributedGraph, GraphError, TriggerEdgeSet

FORMAT_VERSION = 1
POISONED_VERSION = 1
GENERATOR_VERSION = 1
_BIN_MAGIC = b"GBLF"


class BundleError(ValueError):
    pass


class MissingFileError(BundleError, FileNotFoundError):
    pass


class MalformedRowError(BundleError):
    pass


class IdOutOfRangeError(BundleError):
    pass


class VersionMismatchError(BundleError):
    pass


class ShapeMismatchError(BundleError):
    pass


# ------------------------------------------------------------------ text helpers

def _fmt(x):
    return repr(float(x))


def write_kv(path, items):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for k, v in items.items():
            f.write(f"{k}={v}\n")


def read_kv(path):
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise MalformedRowError(f"{path}:{lineno}: expected key=value, got {line!r}")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def _need(path):
    if not os.path.exists(path):
        raise MissingFileError(f"missing bundle file: {path}")
    return path


def _write_features(path, features):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in features.tolist():
            f.write(" ".join(map(_fmt, row)))
            f.write("\n")


def _write_features_bin(path, features):
    rows, cols = features.shape
    with open(path, "wb") as f:
        f.write(_BIN_MAGIC + struct.pack("<III", FORMAT_VERSION, rows, cols))
        f.write(np.ascontiguousarray(features, dtype="<f8").tobytes())


def _read_features_bin(path, n, d):
    with open(path, "rb") as f:
        head = f.read(16)
        if head[:4] != _BIN_MAGIC:
            raise MalformedRowError(f"{path}: bad binary feature header")
        version, rows, cols = struct.unpack("<III", head[4:])
        if version != FORMAT_VERSION:
            raise VersionMismatchError(f"{path}: binary format version {version}")
        if (rows, cols) != (n, d):
            raise ShapeMismatchError(f"{path}: {rows}x{cols} features, meta says {n}x{d}")
        return np.frombuffer(f.read(), dtype="<f8").reshape(rows, cols).astype(np.float64)


def _read_features(path, n, d):
    rows = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if len(parts) != d:
                raise MalformedRowError(
                    f"{path}:{lineno}: expected {d} values, found {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as e:
                raise MalformedRowError(f"{path}:{lineno}: {e}") from None
    if len(rows) != n:
        raise MalformedRowError(f"{path}: {len(rows)} feature rows, expected {n}")
    return np.asarray(rows, dtype=np.float64).reshape(n, d)


def _read_edges(path, n):
    edges = []
    seen = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2:
                raise MalformedRowError(f"{path}:{lineno}: expected 'u v', got {line.strip()!r}")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise MalformedRowError(f"{path}:{lineno}: non-integer node id") from None
            for x in (u, v):
                if not 0 <= x < n:
                    raise IdOutOfRangeError(
                        f"{path}:{lineno}: node id {x} out of range for {n} nodes")
            if u == v:
                raise MalformedRowError(f"{path}:{lineno}: self-loop on node {u}")
            key = (min(u, v), max(u, v))
            if key in seen:
                raise MalformedRowError(
                    f"{path}:{lineno}: duplicate edge {key} (first on line {seen[key]})")
            seen[key] = lineno
            edges.append(key)
    return np.asarray(edges, dtype=np.int64).reshape(-1, 2)


def _read_labels(path, n, C):
    labels = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            tok = line.strip()
            if tok == "-":
                labels.append(UNLABELED)
                continue
            try:
                y = int(tok)
            except ValueError:
                raise MalformedRowError(f"{path}:{lineno}: bad label {tok!r}") from None
            if not 0 <= y < C:
                raise IdOutOfRangeError(f"{path}:{lineno}: class {y} outside [0, {C})")
            labels.append(y)
    if len(labels) != n:
        raise MalformedRowError(f"{path}: {len(labels)} labels, expected {n}")
    return np.asarray(labels, dtype=np.int64)


# ------------------------------------------------------------------- bundle I/O

def save_bundle(path, graph, name="graph", binary=False, extra_meta=None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {"name": name, "num_nodes": graph.num_nodes, "d": graph.num_features,
            "C": graph.num_classes, "format_version": FORMAT_VERSION}
    meta.update(extra_meta or {})
    write_kv(path / "meta.txt", meta)
    with open(path / "edges.txt", "w", encoding="utf-8", newline="\n") as f:
        for u, v in graph.edge_array().tolist():
            f.write(f"{u} {v}\n")
    if binary:
        _write_features_bin(path / "features.bin", graph.features)
    else:
        _write_features(path / "features.txt", graph.features)
    with open(path / "labels.txt", "w", encoding="utf-8", newline="\n") as f:
        for y in graph.labels.tolist():
            f.write("-\n" if y == UNLABELED else f"{y}\n")


def load_bundle(path):
    path = Path(path)
    meta = read_kv(_need(path / "meta.txt"))
    try:
        n, d, C = int(meta["num_nodes"]), int(meta["d"]), int(meta["C"])
    except (KeyError, ValueError) as e:
        raise MalformedRowError(f"{path / 'meta.txt'}: missing or bad key {e}") from None
    version = int(meta.get("format_version", FORMAT_VERSION))
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: bundle format {version}, expected {FORMAT_VERSION}")
    edges = _read_edges(_need(path / "edges.txt"), n)
    if (path / "features.txt").exists():
        X = _read_features(path / "features.txt", n, d)
    elif (path / "features.bin").exists():
        X = _read_features_bin(path / "features.bin", n, d)
    else:
        raise MissingFileError(f"missing bundle file: {path / 'features.txt'}")
    y = _read_labels(_need(path / "labels.txt"), n, C)
    try:
        return AttributedGraph.from_edges(n, edges, X, y, C)
    except GraphError as e:
        raise BundleError(f"{path}: {e}") from None


def bundle_name(path):
    return read_kv(_need(Path(path) / "meta.txt")).get("name", Path(path).name)


# --------------------------------------------------------------- poisoned graphs

@dataclass
class PoisonedBundle:
    graph: AttributedGraph
    poisoned_labels: dict
    vp: list
    trigger_edges: list      # list[TriggerEdgeSet], one per poisoned node


def save_poisoned(path, graph, poisoned_labels, vp, trigger_edges, name="poisoned"):
    path = Path(path)
    save_bundle(path, graph, name=name, extra_meta={"poisoned_version": POISONED_VERSION})
    with open(path / "poisoned_labels.txt", "w", encoding="utf-8", newline="\n") as f:
        for node in sorted(poisoned_labels):
            f.write(f"{node} {poisoned_labels[node]}\n")
    with open(path / "vp.txt", "w", encoding="utf-8", newline="\n") as f:
        for v in vp:
            f.write(f"{int(v)}\n")
    with open(path / "trigger_edges.txt", "w", encoding="utf-8", newline="\n") as f:
        for owner, es in zip(vp, trigger_edges):
            for u, v in es:
                f.write(f"{int(owner)} {int(u)} {int(v)}\n")


def _int_rows(path, width):
    rows = []
    with open(_need(path), encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != width:
                raise MalformedRowError(f"{path}:{lineno}: expected {width} integers")
            try:
                rows.append([int(p) for p in parts])
            except ValueError:
                raise MalformedRowError(f"{path}:{lineno}: non-integer value") from None
    return rows


def load_poisoned(path):
    path = Path(path)
    meta = read_kv(_need(path / "meta.txt"))
    version = int(meta.get("poisoned_version", -1))
    if version != POISONED_VERSION:
        raise VersionMismatchError(
            f"{path}: poisoned bundle version {version}, expected {POISONED_VERSION}")
    graph = load_bundle(path)
    plabels = {u: y for u, y in _int_rows(path / "poisoned_labels.txt", 2)}
    vp = [r[0] for r in _int_rows(path / "vp.txt", 1)]
    by_owner = {v: [] for v in vp}
    for owner, u, v in _int_rows(path / "trigger_edges.txt", 3):
        if owner not in by_owner:
            raise MalformedRowError(f"{path}: trigger edge owner {owner} not in vp.txt")
        by_owner[owner].append((u, v))
    return PoisonedBundle(graph, plabels, vp, [TriggerEdgeSet(by_owner[v]) for v in vp])


# ------------------------------------------------------------ generator storage

def save_generator(path, gen, attack_config=None):
    """Write generator weights as .npy files plus a key=value header."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {"generator_version": GENERATOR_VERSION, "d": gen.d, "s": gen.s,
            "keys": ",".join(sorted(gen.params))}
    if attack_config is not None:
        meta.update({f"config.{k}": v for k, v in attack_config.to_items()})
    write_kv(path / "generator.txt", meta)
    for k, v in gen.params.items():
        np.save(path / f"{k}.npy", np.ascontiguousarray(v, dtype="<f8"), allow_pickle=False)


def load_generator(path, expected_d=None):
    from .forge import GeneratorParams

    path = Path(path)
    meta = read_kv(_need(path / "generator.txt"))
    if int(meta.get("generator_version", -1)) != GENERATOR_VERSION:
        raise VersionMismatchError(f"{path}: unsupported generator version")
    d, s = int(meta["d"]), int(meta["s"])
    if expected_d is not None and expected_d != d:
        raise ShapeMismatchError(
            f"generator expects {d}-dimensional features, bundle has {expected_d}")
    params = {k: np.load(_need(path / f"{k}.npy"), allow_pickle=False).astype(np.float64)
              for k in meta["keys"].split(",")}
    gen = GeneratorParams(params, s=s, d=d)
    try:
        return gen.validate()
    except ValueError as e:
        raise ShapeMismatchError(f"{path}: {e}") from None


# ------------------------------------------------------------------- synthetic

@dataclass(frozen=True)
class SbmSpec:
    blocks: int = 4
    nodes_per_block: int = 500
    p_intra: float = 0.0128
    p_inter: float = 0.0011
    feature_dim: int = 16
    separation: float = 4.0
    noise: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for p in (self.p_intra, self.p_inter):
            if not 0.0 <= p <= 1.0:
                raise ValueError("edge probabilities must lie in [0, 1]")
        if self.blocks < 1 or self.nodes_per_block < 1:
            raise ValueError("need at least one block with one node")


def _pair_index_to_tri(k, n):
    # inverse of the row-major strict upper-triangle enumeration of an n x n grid
    i = n - 2 - np.floor(np.sqrt(-8.0 * k + 4.0 * n * (n - 1) - 7) / 2.0 - 0.5).astype(np.int64)
    j = k + i + 1 - n * (n - 1) // 2 + (n - i) * ((n - i) - 1) // 2
    return i, j


def _sample_block_pairs(rng, na, nb, p, same):
    """Bernoulli(p) pairs between two blocks (or within one when ``same``)."""
    total = na * (na - 1) // 2 if same else na * nb
    if total == 0 or p <= 0.0:
        return np.zeros((0, 2), dtype=np.int64)
    if total <= 4_000_000:
        keys = np.flatnonzero(rng.random(total) < p)
    else:
        m = rng.binomial(total, p)
        keys = np.unique(rng.integers(0, total, size=m))
        while len(keys) < m:
            extra = rng.integers(0, total, size=m - len(keys))
            keys = np.unique(np.concatenate([keys, extra]))
    if same:
        i, j = _pair_index_to_tri(keys.astype(np.int64), na)
    else:
        i, j = keys // nb, keys % nb
    return np.stack([i, j], axis=1).astype(np.int64)


def sbm_edges(rng, sizes, prob):
    """Edges of a stochastic block model; ``prob(a, b)`` gives block-pair density."""
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    parts = []
    for a in range(len(sizes)):
        for b in range(a, len(sizes)):
            pairs = _sample_block_pairs(rng, sizes[a], sizes[b], prob(a, b), a == b)
            pairs[:, 0] += offsets[a]
            pairs[:, 1] += offsets[b]
            parts.append(pairs)
    return np.concatenate(parts) if parts else np.zeros((0, 2), dtype=np.int64)


def class_centers(k, d, separation, rng=None):
    """k centers of dimension d with pairwise distance ``separation``."""
    if d >= k:
        return np.eye(k, d) * (separation / np.sqrt(2.0))
    # fewer dims than classes: random directions, rescaled to the requested minimum gap
    c = rng.standard_normal((k, d))
    dmin = min(np.linalg.norm(c[a] - c[b]) for a in range(k) for b in range(a + 1, k))
    return c * (separation / dmin)


def synth_sbm(spec):
    rng = np.random.default_rng(spec.seed)
    sizes = [spec.nodes_per_block] * spec.blocks
    edges = sbm_edges(rng, sizes, lambda a, b: spec.p_intra if a == b else spec.p_inter)
    labels = np.repeat(np.arange(spec.blocks), spec.nodes_per_block)
    centers = class_centers(spec.blocks, spec.feature_dim, spec.separation, rng)
    X = centers[labels] + spec.noise * rng.standard_normal((len(labels), spec.feature_dim))
    return AttributedGraph.from_edges(len(labels), edges, X, labels, spec.blocks)


def desk_sbm(num_nodes=2000, blocks=4, avg_degree=8.0, homophily=0.8, feature_dim=16,
             separation=4.0, noise=0.5, seed=0):
    """SbmSpec with densities chosen for a target mean degree and edge homophily."""
    npb = num_nodes // blocks
    p_intra = avg_degree * homophily / max(npb - 1, 1)
    p_inter = avg_degree * (1 - homophily) / max(num_nodes - npb, 1)
    return SbmSpec(blocks, npb, min(p_intra, 1.0), min(p_inter, 1.0), feature_dim,
                   separation, noise, seed)


# Cora's per-class node counts, used for the bag-of-words stand-in.
CORA_CLASS_SIZES = (351, 217, 418, 818, 426, 298, 180)


@dataclass(frozen=True)
class CitationSpec:
    """Bag-of-words citation-style SBM with sub-topic communities."""

    class_sizes: tuple = CORA_CLASS_SIZES
    vocab: int = 1433
    words_per_node: int = 18
    subtopics: int = 4
    subtopic_words: int = 40
    bridge_words: int = 12
    topic_fraction: float = 0.7
    zipf_exponent: float = 0.8
    num_edges: int = 5278
    homophily: float = 0.81
    subtopic_affinity: float = 0.6
    bridge_affinity: float = 0.7
    edge_share_prob: float = 0.85
    seed: int = 0


def synth_citation(spec=CitationSpec()):
    """Binary sparse features and a homophilous degree-heterogeneous edge set.

    Nodes belong to a class and a sub-topic inside it.  A node's words come
    from its sub-topic vocabulary with probability ``topic_fraction`` and from
    a Zipf-distributed background otherwise.  Every sub-topic shares a few
    words with a partner sub-topic of another class; cross-class edges mostly
    follow these partnerships.  Every node gets at least one edge, and each
    edge end copies one of its own words to the other end with probability
    ``edge_share_prob`` (linked documents share vocabulary).
    """
    rng = np.random.default_rng(spec.seed)
    sizes = np.asarray(spec.class_sizes)
    C, n, V, S = len(sizes), int(sizes.sum()), spec.vocab, spec.subtopics
    labels = np.repeat(np.arange(C), sizes)
    group = labels * S + rng.integers(0, S, size=n)
    G = C * S
    partner = np.array([((g // S + 1 + (g % S) % (C - 1)) % C) * S + g % S
                        for g in range(G)]) if C > 1 else np.arange(G)
    topic_vocab = np.stack([rng.choice(V, spec.subtopic_words, replace=False)
                            for _ in range(G)])
    b = spec.bridge_words
    if b:
        for g in range(G):
            topic_vocab[g, -b:] = topic_vocab[partner[g], :b]
    ranks = np.arange(1, V + 1, dtype=np.float64)
    background = ranks ** -spec.zipf_exponent
    background /= background.sum()
    background = background[rng.permutation(V)]
    X = np.zeros((n, V))
    for i in range(n):
        k = max(1, spec.words_per_node + int(rng.integers(-6, 7)))
        n_topic = min(rng.binomial(k, spec.topic_fraction), spec.subtopic_words)
        words = set(rng.choice(topic_vocab[group[i]], n_topic, replace=False).tolist())
        while len(words) < k:
            words.add(int(rng.choice(V, p=background)))
        X[i, list(words)] = 1.0

    propensity = rng.pareto(2.5, size=n) + 1.0
    by_class = [np.flatnonzero(labels == c) for c in range(C)]
    not_class = [np.flatnonzero(labels != c) for c in range(C)]
    by_group = [np.flatnonzero(group == g) for g in range(G)]
    prob_all = propensity / propensity.sum()

    def partner_of(u):
        if rng.random() < spec.homophily or C == 1:
            pool = by_group[group[u]] if rng.random() < spec.subtopic_affinity \
                else by_class[labels[u]]
        elif rng.random() < spec.bridge_affinity and len(by_group[partner[group[u]]]):
            pool = by_group[partner[group[u]]]
        else:
            pool = not_class[labels[u]]
        w = propensity[pool]
        return int(pool[rng.choice(len(pool), p=w / w.sum())])

    edges = set()
    for u in rng.permutation(n).tolist():
        if len(edges) >= spec.num_edges:
            break
        v = partner_of(u)
        while v == u:
            v = partner_of(u)
        edges.add((min(u, v), max(u, v)))
    while len(edges) < spec.num_edges:
        u = int(rng.choice(n, p=prob_all))
        v = partner_of(u)
        if u != v:
            edges.add((min(u, v), max(u, v)))
    edges = np.asarray(sorted(edges), dtype=np.int64)
    base = X.copy()
    for u, v in edges.tolist():
        for a, b in ((u, v), (v, u)):
            if rng.random() < spec.edge_share_prob:
                X[b, rng.choice(np.flatnonzero(base[a]))] = 1.0
    return AttributedGraph.from_edges(n, edges, X, labels, C)
