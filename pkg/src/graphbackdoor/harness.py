"""Inductive evaluation: split, target training, ASR / clean accuracy, multi-seed runs."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import nn
from .baselines import DISPLAY, run_attack
from .defense import (DefenseConfig, apply_defense, edge_similarity_histogram,
                      trigger_edge_flags)
from .graph import AttributedGraph, edge_cosine, mean_aggregator, normalized_adjacency

log = logging.getLogger(__name__)

ARCHS = ("gcn", "sage")
CHUNK_NODES = 4000


class StageError(RuntimeError):
    def __init__(self, stage, seed, err):
        super().__init__(f"[{stage}] seed {seed}: {err}")
        self.stage = stage


# ----------------------------------------------------------------------- split

@dataclass
class InductiveSplit:
    graph: AttributedGraph           # full dataset
    train_ids: np.ndarray            # original ids of train-graph nodes, local order
    train_graph: AttributedGraph
    labeled: np.ndarray              # train-graph ids
    validation: np.ndarray           # train-graph ids
    target_nodes: np.ndarray         # original ids
    clean_test: np.ndarray           # original ids

    def attack_pool(self):
        used = np.concatenate([self.labeled, self.validation])
        return np.setdiff1d(np.arange(self.train_graph.num_nodes), used)


def make_inductive_split(graph, seed=0):
    n = graph.num_nodes
    if n < 20:
        raise ValueError(f"need at least 20 nodes for a split, got {n}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_mask = int(round(0.2 * n))
    n_train = n - n_mask
    train_ids = np.sort(perm[:n_train])
    masked = perm[n_train:]
    half = n_mask // 2
    n_lab = min(int(round(0.1 * n)), n_train)
    n_val = min(int(round(0.1 * n)), n_train - n_lab)
    local = rng.permutation(n_train)
    return InductiveSplit(graph, train_ids, graph.induced_subgraph(train_ids),
                          np.sort(local[:n_lab]), np.sort(local[n_lab:n_lab + n_val]),
                          np.sort(masked[:half]), np.sort(masked[half:]))


# --------------------------------------------------------------- target model

@dataclass
class TargetModel:
    arch: str
    params: dict

    def logits(self, graph):
        if self.arch == "gcn":
            return nn.gcn_forward(self.params, normalized_adjacency(graph),
                                  nn.feature_operand(graph.features))
        return nn.sage_forward(self.params, mean_aggregator(graph),
                               nn.feature_operand(graph.features))


def train_target(arch, graph, labeled, epochs=200, seed=0, lr=0.01, weight_decay=5e-4,
                 hidden=nn.HIDDEN, optimizer="adam"):
    """Fresh GCN or SAGE fit on ``labeled`` nodes of ``graph``."""
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture {arch!r}")
    labeled = np.asarray(labeled, dtype=np.int64)
    if labeled.size == 0:
        raise ValueError("target training needs labeled nodes")
    rng = np.random.default_rng(seed)
    d, C = graph.num_features, graph.num_classes
    if arch == "gcn":
        params = nn.init_gcn(rng, d, hidden, C)
        A = normalized_adjacency(graph)
        fwd, bwd = nn.gcn_forward, nn.gcn_backward
    else:
        params = nn.init_sage(rng, d, hidden, C)
        A = mean_aggregator(graph)
        fwd, bwd = nn.sage_forward, nn.sage_backward
    opt = nn.make_optimizer(optimizer, lr, weight_decay)
    X = nn.feature_operand(graph.features)
    for _ in range(epochs):
        out, tape = fwd(params, A, X, record=True)
        _, dout = nn.ce_loss_and_grad(out, graph.labels, labeled)
        params = opt.step(params, bwd(params, tape, dout))
    return TargetModel(arch, params)


# ------------------------------------------------------ test-time neighborhoods

def _local_index(split):
    inv = np.full(split.graph.num_nodes, -1, dtype=np.int64)
    inv[split.train_ids] = np.arange(len(split.train_ids))
    return inv


def _ball(A, seeds, hops):
    cur = np.unique(seeds)
    for _ in range(hops):
        if not len(cur):
            break
        cur = np.union1d(cur, A[cur].indices)
    return cur


def test_time_logits(model, graph, split, nodes, trigger_fn=None, threshold=None):
    """Logits of masked ``nodes`` (original ids), each inserted alone into ``graph``.

    A node keeps its original edges into the train graph; with ``trigger_fn`` a
    trigger generated from its features is attached.  If ``threshold`` is given,
    the node's own edges and its trigger's edges below it are dropped.
    """
    nodes = np.asarray(nodes, dtype=np.int64)
    if not len(nodes):
        return np.zeros((0, graph.num_classes))
    inv = _local_index(split)
    full = split.graph
    A = graph.adjacency()
    X = graph.features
    triggers = trigger_fn(full.features[nodes]) if trigger_fn is not None else None
    out = np.zeros((len(nodes), graph.num_classes))

    pending, rows, size = [], [], 0

    def flush():
        nonlocal pending, rows, size
        if not pending:
            return
        feats, edges, off = [], [], 0
        for f, e in pending:
            feats.append(f)
            edges.append(e + off)
            off += len(f)
        g = AttributedGraph.from_edges(off, np.concatenate(edges), np.vstack(feats),
                                       None, graph.num_classes, validate=False)
        logits = model.logits(g)
        for k, r in rows:
            out[k] = logits[r]
        pending, rows, size = [], [], 0

    for k, v in enumerate(nodes.tolist()):
        x_v = full.features[v]
        nb = inv[full.neighbors(v)]
        nb = nb[nb >= 0]
        if threshold is not None and len(nb):
            sims = edge_cosine(np.vstack([x_v[None, :], X[nb]]),
                               np.stack([np.zeros(len(nb), dtype=np.int64),
                                         np.arange(1, len(nb) + 1)], axis=1))
            nb = nb[sims >= threshold]
        ball = _ball(A, nb, 2) if len(nb) else np.zeros(0, dtype=np.int64)
        sub = A[ball][:, ball].tocoo()
        keep = sub.row < sub.col
        pos = np.searchsorted(ball, nb)
        e = [np.stack([sub.row[keep], sub.col[keep]], axis=1) + 1,
             np.stack([np.zeros(len(nb), dtype=np.int64), pos + 1], axis=1)]
        f = [x_v[None, :], X[ball]]
        if triggers is not None:
            trig = triggers[k]
            base = 1 + len(ball)
            tedges = [(0, base)] + [(base + a, base + b) for a, b in trig.internal_edges()]
            tedges = np.asarray(tedges, dtype=np.int64)
            feats_local = np.vstack([x_v[None, :], trig.features])
            if threshold is not None:
                # map 0 -> node, base+j -> trigger row j+1
                loc = np.where(tedges == 0, 0, tedges - base + 1)
                tedges = tedges[edge_cosine(feats_local, loc) >= threshold]
            e.append(tedges.reshape(-1, 2))
            f.append(trig.features)
        feats = np.vstack(f)
        pending.append((feats, np.concatenate(e).astype(np.int64)))
        rows.append((k, size))
        size += len(feats)
        if size >= CHUNK_NODES:
            flush()
    flush()
    return out


def attack_success_rate(model, graph, split, nodes, trigger_fn, target_class,
                        threshold=None, exclude_target_class=False):
    nodes = np.asarray(nodes, dtype=np.int64)
    if exclude_target_class:
        nodes = nodes[split.graph.labels[nodes] != target_class]
    if not len(nodes):
        return 0.0
    pred = np.argmax(test_time_logits(model, graph, split, nodes, trigger_fn, threshold), axis=1)
    return float(np.mean(pred == target_class))


def clean_accuracy(model, graph, split, nodes, threshold=None):
    nodes = np.asarray(nodes, dtype=np.int64)
    if not len(nodes):
        return 0.0
    pred = np.argmax(test_time_logits(model, graph, split, nodes, None, threshold), axis=1)
    return float(np.mean(pred == split.graph.labels[nodes]))


# ------------------------------------------------------------------ experiments

@dataclass
class SeedResult:
    seed: int
    defense: str
    asr: float
    asr_all: float
    asr_excluding_target: float
    clean_acc: float
    clean_graph_acc: float
    removed_edges: int
    trigger_edges: int
    trigger_edges_removed: int
    discarded_labels: int
    poisoned_labels_kept: int
    vp: list = field(default_factory=list)


def _mean_std(vals):
    a = np.asarray(vals, dtype=np.float64)
    return float(a.mean()), float(a.std())


@dataclass
class EvalReport:
    dataset: str
    attack: str
    arch: str
    defenses: list
    seeds: list
    config: dict
    per_seed: list = field(default_factory=list)
    histograms: dict = field(default_factory=dict)
    timings: list = field(default_factory=list)

    def summary(self, defense):
        rows = [r for r in self.per_seed if r.defense == defense]
        out = {}
        for key in ("asr", "asr_all", "asr_excluding_target", "clean_acc", "clean_graph_acc"):
            m, s = _mean_std([getattr(r, key) for r in rows])
            out[key] = {"mean": m, "std": s}
        return out

    def to_json_dict(self):
        return {
            "dataset": self.dataset,
            "attack": self.attack,
            "attack_display": DISPLAY.get(self.attack, self.attack),
            "arch": self.arch,
            "seeds": list(self.seeds),
            "config": self.config,
            "summary": {d: self.summary(d) for d in self.defenses},
            "per_seed": [asdict(r) for r in self.per_seed],
            "histograms": self.histograms,
        }

    def csv_rows(self):
        t = {(r["seed"], r["defense"]): r["seconds"] for r in self.timings}
        yield "dataset,attack,defense,seed,asr,clean_acc,timing"
        for r in self.per_seed:
            yield (f"{self.dataset},{self.attack},{r.defense},{r.seed},{r.asr!r},"
                   f"{r.clean_acc!r},{t.get((r.seed, r.defense), 0.0):.3f}")


def reference_accuracy(split, arch, dcfg, seed, target_epochs=200):
    """Clean accuracy of a model trained on the un-poisoned (but defended) train graph."""
    ref = apply_defense(split.train_graph, split.labeled, dcfg)
    model = train_target(arch, ref["graph"], ref["labeled"], target_epochs, seed)
    thr = ref["threshold"] if dcfg.apply_at_inference else None
    return clean_accuracy(model, ref["graph"], split, split.clean_test, thr)


def _fresh(src):
    return src.fresh() if hasattr(src, "fresh") else src


def run_seed(graph, attack, defenses, cfg, seed, arch="gcn", exclude_target_class=False,
             target_epochs=200, histograms=True, reference_cache=None):
    """One seed of the pipeline; returns ``(results, histogram or None, timings, outcome)``.

    ``reference_cache`` maps ``(seed, mode, quantile, threshold, inference)`` to a
    clean-graph accuracy so several attacks on the same split can share it.
    """
    try:
        split = make_inductive_split(graph, seed)
    except Exception as e:
        raise StageError("split", seed, e) from e
    scfg = replace(cfg, seed=seed)
    t0 = time.perf_counter()
    try:
        outcome = run_attack(attack, split.train_graph, split.labeled, scfg,
                             split.attack_pool())
    except Exception as e:
        raise StageError("attack", seed, e) from e
    t_attack = time.perf_counter() - t0
    hist = None
    if histograms:
        flags = trigger_edge_flags(outcome.graph, outcome.trigger_edges)
        left, trig, clean = edge_similarity_histogram(outcome.graph, flags)
        hist = {"bin_left": left.round(2).tolist(), "trigger_count": trig.tolist(),
                "clean_count": clean.tolist()}
    results, timings = [], []
    n = outcome.graph.num_nodes
    tkeys = [min(u, v) * n + max(u, v) for es in outcome.trigger_edges for u, v in es]
    for dcfg in defenses:
        t1 = time.perf_counter()
        try:
            defended = apply_defense(outcome.graph, outcome.labeled, dcfg,
                                     outcome.poisoned_labels)
            model = train_target(arch, defended["graph"], defended["labeled"],
                                 target_epochs, seed)
            thr = defended["threshold"] if dcfg.apply_at_inference else None
            g_def = defended["graph"]
            asr_all = attack_success_rate(model, g_def, split, split.target_nodes,
                                          _fresh(outcome.trigger_fn), cfg.target_class, thr)
            asr_ex = attack_success_rate(model, g_def, split, split.target_nodes,
                                         _fresh(outcome.trigger_fn), cfg.target_class, thr,
                                         exclude_target_class=True)
            acc = clean_accuracy(model, g_def, split, split.clean_test, thr)
            key = (seed, dcfg.mode, dcfg.quantile, dcfg.threshold, dcfg.apply_at_inference,
                   arch, target_epochs)
            if reference_cache is not None and key in reference_cache:
                ref_acc = reference_cache[key]
            else:
                ref_acc = reference_accuracy(split, arch, dcfg, seed, target_epochs)
                if reference_cache is not None:
                    reference_cache[key] = ref_acc
        except Exception as e:
            raise StageError(f"evaluate:{dcfg.mode}", seed, e) from e
        removed = defended["removed"]
        rkeys = set((removed[:, 0] * n + removed[:, 1]).tolist())
        kept = defended["poisoned_labels"] or {}
        results.append(SeedResult(
            seed, dcfg.mode, asr_ex if exclude_target_class else asr_all, asr_all, asr_ex,
            acc, ref_acc, int(len(removed)), len(tkeys), sum(k in rkeys for k in tkeys),
            int(len(defended["discarded"])), len(kept), [int(v) for v in outcome.vp]))
        timings.append({"seed": seed, "defense": dcfg.mode, "attack_seconds": t_attack,
                        "seconds": t_attack + time.perf_counter() - t1})
    return results, hist, timings, outcome


def _seed_job(args):
    graph, attack, defenses, cfg, seed, kw = args
    res, hist, timings, _ = run_seed(graph, attack, defenses, cfg, seed, **kw)
    return res, hist, timings


def run_experiment(graph, attack, defenses, cfg, seeds, arch="gcn", dataset="dataset",
                   exclude_target_class=False, target_epochs=200, histograms=True,
                   workers=1, reference_cache=None):
    """split -> poison -> defend -> train target -> metrics, for every seed.

    One poisoning per seed is shared by all ``defenses`` (each a DefenseConfig).
    With ``workers > 1`` seeds run in separate processes; the merged report is
    identical to the sequential one.
    """
    defenses = list(defenses)
    report = EvalReport(dataset, attack, arch, [d.mode for d in defenses], list(seeds),
                        {k: v for k, v in cfg.to_items()})
    kw = dict(arch=arch, exclude_target_class=exclude_target_class,
              target_epochs=target_epochs, histograms=histograms)
    if workers > 1 and len(seeds) > 1:
        from concurrent.futures import ProcessPoolExecutor
        jobs = [(graph, attack, defenses, cfg, s, kw) for s in seeds]
        with ProcessPoolExecutor(max_workers=min(workers, len(seeds))) as ex:
            outs = list(ex.map(_seed_job, jobs))
    else:
        outs = []
        for s in seeds:
            res, hist, timings, _ = run_seed(graph, attack, defenses, cfg, s,
                                             reference_cache=reference_cache, **kw)
            outs.append((res, hist, timings))
    for s, (res, hist, timings) in zip(seeds, outs):
        report.per_seed.extend(res)
        report.timings.extend(timings)
        if hist is not None:
            report.histograms[str(s)] = hist
    return report
