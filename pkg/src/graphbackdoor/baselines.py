"""Attack dispatcher: UGBA, its ablations and the subgraph-injection baselines.

Every attack returns an :class:`AttackOutcome` holding the backdoored training
graph and a ``trigger_fn`` that produces triggers for unseen nodes at test
time.  ``ugba-noCS`` (random poisoned nodes, no unnoticeable loss) is what the
reports call "GTA-like".
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import forge
from .graph import Trigger, attach_triggers
from .selection import SelectionConfig, random_poisoned, select_poisoned

log = logging.getLogger(__name__)

ATTACKS = ("ugba", "ugba-noC", "ugba-noS", "ugba-noCS", "sba-samp", "sba-gen")
DISPLAY = {"ugba-noCS": "GTA-like"}


@dataclass
class AttackConfig:
    budget: int = 10
    trigger_size: int = 3
    target_class: int = 0
    beta: float = 1.0
    T: float = 0.5
    inner_steps: int = 5
    outer_epochs: int = 200
    lr: float = 0.01
    weight_decay: float = 5e-4
    optimizer: str = "adam"
    lam: float = 1.0
    K: int = 0                       # 0 -> derived from budget
    selection_order: str = "asc"
    encoder_epochs: int = 200
    clamp_features: bool = False
    sba_p: float = 0.8
    sba_universal: bool = False
    seed: int = 0

    def to_items(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    def bilevel(self, beta=None):
        return forge.BilevelConfig(
            target_class=self.target_class, trigger_size=self.trigger_size,
            beta=self.beta if beta is None else beta, T=self.T,
            inner_steps=self.inner_steps, outer_epochs=self.outer_epochs,
            lr_s=self.lr, lr_g=self.lr, optimizer=self.optimizer,
            weight_decay=self.weight_decay, clamp_features=self.clamp_features,
            seed=self.seed)

    def selection(self):
        return SelectionConfig(
            budget=self.budget, target_class=self.target_class, lam=self.lam,
            K=self.K or None, encoder_epochs=self.encoder_epochs, lr=self.lr,
            weight_decay=self.weight_decay, optimizer=self.optimizer,
            selection_order=self.selection_order, seed=self.seed)


@dataclass
class SbaConfig:
    s: int = 3
    p_er: float = 0.8
    feature_mode: str = "sample"     # sample | gaussian
    universal: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_er <= 1.0:
            raise ValueError("p_er must lie in [0, 1]")
        if self.feature_mode not in ("sample", "gaussian"):
            raise ValueError(f"unknown feature_mode {self.feature_mode!r}")


def sba_trigger(cfg, graph, rng):
    """One Erdős–Rényi trigger with sampled or Gaussian features."""
    s = cfg.s
    upper = np.triu(rng.random((s, s)) < cfg.p_er, 1)
    adj = (upper | upper.T).astype(np.float64)
    X = graph.features
    if cfg.feature_mode == "sample":
        feats = X[rng.integers(0, graph.num_nodes, size=s)].copy()
    else:
        feats = rng.normal(X.mean(axis=0), X.std(axis=0), size=(s, X.shape[1]))
    return Trigger(feats, adj)


class SbaSource:
    """Trigger source for SBA; independent of the node it is attached to."""

    def __init__(self, cfg, graph, stream=0):
        self.cfg = cfg
        self.graph = graph
        self.stream = stream
        seed = cfg.seed if stream == 0 else [cfg.seed, stream]
        self.rng = np.random.default_rng(seed)
        universal_rng = np.random.default_rng(cfg.seed)
        self.fixed = sba_trigger(cfg, graph, universal_rng) if cfg.universal else None

    def fresh(self):
        """Same distribution (and universal trigger), independent draws."""
        return SbaSource(self.cfg, self.graph, self.stream + 1)

    def __call__(self, X):
        if self.fixed is not None:
            return [self.fixed] * len(X)
        return [sba_trigger(self.cfg, self.graph, self.rng) for _ in range(len(X))]


class GeneratorSource:
    def __init__(self, gen, clamp=None):
        self.gen = gen
        self.clamp = clamp

    def __call__(self, X):
        return forge.generate_triggers(self.gen, X, clamp=self.clamp)


@dataclass
class AttackOutcome:
    name: str
    graph: object                    # backdoored training graph G_B
    labeled: np.ndarray              # V_L ∪ V_P in G_B ids
    vp: tuple
    poisoned_labels: dict
    trigger_edges: list
    trigger_fn: object
    generator: forge.GeneratorParams | None = None
    trace: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)


def _poison_with(graph, labeled, vp, triggers, target_class):
    vp = [int(v) for v in vp]
    if not vp:
        return graph, {}, []
    g, edge_sets = attach_triggers(graph, vp, triggers)
    labels = g.labels.copy()
    labels[vp] = target_class
    return g.with_labels(labels), {v: target_class for v in vp}, edge_sets


def run_attack(name, graph, labeled, cfg, pool=None):
    """Poison ``graph`` (the attacker-visible training graph).

    ``pool`` restricts candidate poisoned nodes (default: all unlabeled nodes).
    """
    if name not in ATTACKS:
        raise ValueError(f"unknown attack {name!r}; expected one of {', '.join(ATTACKS)}")
    labeled = np.asarray(labeled, dtype=np.int64)
    if pool is None:
        pool = np.arange(graph.num_nodes)
    pool = np.setdiff1d(np.asarray(pool, dtype=np.int64), labeled)

    if name in ("ugba", "ugba-noC"):
        vp = select_poisoned(graph, labeled, cfg.selection(), pool)
    else:
        vp = random_poisoned(pool, cfg.budget, cfg.seed)

    if name.startswith("sba"):
        mode = "sample" if name == "sba-samp" else "gaussian"
        src = SbaSource(SbaConfig(cfg.trigger_size, cfg.sba_p, mode, cfg.sba_universal,
                                  cfg.seed), graph)
        g, table, edges = _poison_with(graph, labeled, vp, src(graph.features[list(vp)]),
                                       cfg.target_class)
        return AttackOutcome(name, g, np.concatenate([labeled, list(vp)]).astype(np.int64),
                             tuple(vp), table, edges, src)

    beta = 0.0 if name in ("ugba-noC", "ugba-noCS") else cfg.beta
    bcfg = cfg.bilevel(beta)
    fit = forge.fit_generator(graph, labeled, vp.array(), bcfg)
    clamp = forge._clamp_bounds(graph, bcfg.clamp_features)
    g, table, edges = forge.poison_graph(graph, vp, fit.generator, cfg.target_class, clamp)
    return AttackOutcome(name, g, np.concatenate([labeled, list(vp)]).astype(np.int64),
                         tuple(vp), table, edges, GeneratorSource(fit.generator, clamp),
                         fit.generator, fit.trace, fit.epoch_seconds)


def run_baseline(name, graph, labeled, budget, cfg, pool=None):
    return run_attack(name, graph, labeled, replace(cfg, budget=budget), pool)
