"""Acceptance criteria, one test each; every test reports a single PASS/FAIL line.

Citation-scale criteria use the bundle named by ``CORA_BUNDLE`` when set and the
calibrated bag-of-words stand-in otherwise.
"""
import functools
import json
import os
import time

import numpy as np
from conftest import ACCEPTANCE_LINES, random_graph
from graphbackdoor import cli, data, forge, harness, nn
from graphbackdoor.baselines import AttackConfig
from graphbackdoor.defense import DefenseConfig, prune
from graphbackdoor.graph import edge_cosine, normalized_adjacency

SEEDS = [0, 1, 2, 3, 4]
NONE, PRUNE, PRUNE_LD = DefenseConfig("none"), DefenseConfig("prune"), DefenseConfig("prune_ld")


def report(cid, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {cid}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# ------------------------------------------------------------ 1. gradients

def test_c01_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    g = random_graph(rng, 8, 0.4, d=4, C=3)
    labeled, vp = np.array([0, 1, 2]), np.array([3, 4])
    gen = forge.init_generator(rng, 4, 2, hidden=8)
    errs = {}

    # L_s w.r.t. the surrogate
    theta = nn.init_gcn(rng, 4, 6, 3)
    _, A_hat, Xs, mask, labels = forge.poisoned_training_view(g, labeled, vp, gen, 0)
    ls = lambda: nn.ce_loss_and_grad(nn.gcn_forward(theta, A_hat, Xs), labels, mask)[0]
    out, tape = nn.gcn_forward(theta, A_hat, Xs, record=True)
    grads = nn.gcn_backward(theta, tape, nn.ce_loss_and_grad(out, labels, mask)[1])
    errs["L_s"] = max(nn.relative_error(grads[k], nn.numerical_gradient(ls, theta[k], 1e-5))
                      for k in theta)

    ctx = forge.surrogate_context(g, theta)
    pool = forge.outer_pool(g, labeled)
    y = np.zeros(len(pool), dtype=np.int64)
    _, _, A_bin = forge.generator_forward(gen, g.features[pool])

    def lg(B=None):
        F, A_cont, _ = forge.generator_forward(gen, g.features[pool])
        return nn.ce_loss_and_grad(forge.attached_logits(ctx, pool, F, A_bin if B is None
                                                         else A_cont), y, np.arange(len(y)))[0]

    def lg_grads(continuous):
        F, A_cont, Ab, gt = forge.generator_forward(gen, g.features[pool], record=True)
        B = A_cont if continuous else Ab
        logits, at = forge.attached_logits(ctx, pool, F, B, record=True)
        dF, dB = forge.attached_backward(ctx, at, nn.ce_loss_and_grad(logits, y,
                                                                      np.arange(len(y)))[1])
        return forge.generator_backward(gen, gt, dF, dB if continuous else np.zeros_like(dB))

    # L_g: feature path at the binarized structure, and the straight-through
    # structure path evaluated on the continuous adjacency it differentiates
    gf, gc = lg_grads(False), lg_grads(True)
    e = [nn.relative_error(gf[k], nn.numerical_gradient(lg, gen.params[k], 1e-5))
         for k in gen.params if k not in ("Wa", "ba")]
    e += [nn.relative_error(gc[k], nn.numerical_gradient(lambda: lg(True), gen.params[k], 1e-5))
          for k in gen.params]
    errs["L_g"] = max(e)

    def lc():
        F, _, _ = forge.generator_forward(gen, g.features[pool])
        return forge.unnoticeable_loss(g.features[pool], F, A_bin, 0.9)[0]

    F, _, _, gt = forge.generator_forward(gen, g.features[pool], record=True)
    _, dF = forge.unnoticeable_loss(g.features[pool], F, A_bin, 0.9)
    gcg = forge.generator_backward(gen, gt, dF, np.zeros_like(A_bin))
    errs["L_c"] = max(nn.relative_error(gcg[k], nn.numerical_gradient(lc, gen.params[k], 1e-5))
                      for k in gen.params if k not in ("Wa", "ba"))
    assert lc() > 0
    secs = time.perf_counter() - t0
    worst = max(errs.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    report(1, worst < 1e-4 and secs < 10,
           f"max relative error {worst:.1e} < 1e-4 ({detail}); {secs:.2f}s < 10s")


# --------------------------------------------------- 2. computation graph

def _computation_graph_logits(theta, A_full, X, i):
    """Node i's logits from its 2-hop computation graph alone."""
    A = A_full.toarray()
    hop1 = np.flatnonzero(A[i])
    ball = sorted({i, *hop1, *[k for j in hop1 for k in np.flatnonzero(A[j])]})
    sub = A[np.ix_(ball, ball)]
    h = np.maximum(sub @ X[ball] @ theta["W1"], 0)
    return (sub @ h @ theta["W2"])[ball.index(i)]


def test_c02_full_graph_equals_computation_graph():
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        n = int(rng.integers(5, 21))
        g = random_graph(rng, n, float(rng.uniform(0.1, 0.4)), d=5, C=3)
        theta = nn.init_gcn(rng, 5, 8, 3)
        A = normalized_adjacency(g)
        full = nn.gcn_forward(theta, A, g.features)
        for i in range(n):
            worst = max(worst, np.abs(full[i] - _computation_graph_logits(
                theta, A, g.features, i)).max())
    report(2, worst < 1e-9, f"max |delta| {worst:.1e} < 1e-9 over 10 graphs of <= 20 nodes")


# ------------------------------------------------- citation-scale runs

@functools.lru_cache(maxsize=None)
def citation_graph():
    path = os.environ.get("CORA_BUNDLE")
    if path:
        return data.load_bundle(path), "cora"
    return data.synth_citation(), "citation stand-in"


_REF = {}


@functools.lru_cache(maxsize=None)
def citation_run(attack, modes):
    """Per-seed results of one attack over all seeds, sharing clean references."""
    graph, _ = citation_graph()
    defenses = [DefenseConfig(m) for m in modes]
    cfg = AttackConfig(budget=10, trigger_size=3, target_class=0)
    rows = []
    for seed in SEEDS:
        res, _, _, _ = harness.run_seed(graph, attack, defenses, cfg, seed, arch="gcn",
                                        histograms=False, reference_cache=_REF)
        rows.extend(res)
    return rows


def mean(rows, mode, key="asr"):
    return float(np.mean([getattr(r, key) for r in rows if r.defense == mode]))


UGBA_MODES = ("none", "prune", "prune_ld")


def test_c03_citation_ugba_effectiveness():
    t0 = time.perf_counter()
    rows = citation_run("ugba", UGBA_MODES)
    name = citation_graph()[1]
    parts, ok = [], True
    for m in UGBA_MODES:
        asr, acc, ref = mean(rows, m), mean(rows, m, "clean_acc"), mean(rows, m, "clean_graph_acc")
        ok &= asr >= 0.90 and abs(acc - ref) <= 0.03
        parts.append(f"{m} ASR {asr:.3f} clean {acc:.3f} vs ref {ref:.3f}")
    report(3, ok, f"{name}, 5 seeds, ASR >= 0.90 and |clean - ref| <= 0.03: "
           + "; ".join(parts) + f" ({time.perf_counter() - t0:.0f}s)")


def test_c04_baselines_collapse_under_prune_ld():
    ugba = mean(citation_run("ugba", UGBA_MODES), "prune_ld")
    gta = mean(citation_run("ugba-noCS", ("prune_ld",)), "prune_ld")
    sba = mean(citation_run("sba-samp", ("prune_ld",)), "prune_ld")
    report(4, gta <= 0.35 and sba <= 0.35 and ugba >= 0.90,
           f"Prune+LD ASR: GTA-like {gta:.3f} <= 0.35, SBA-Samp {sba:.3f} <= 0.35, "
           f"UGBA {ugba:.3f} >= 0.90")


# Outer epochs for the converged run; the default 200 leaves L_c still falling on
# 1433-dimensional bag-of-words features, and the similarity fractions plateau by here.
CONVERGED_EPOCHS = 1200


def test_c06_unnoticeable_triggers():
    graph, name = citation_graph()
    cfg = AttackConfig(budget=10, trigger_size=3, target_class=0, T=0.5,
                       outer_epochs=CONVERGED_EPOCHS)
    res, _, _, out = harness.run_seed(graph, "ugba", [PRUNE], cfg, 0, histograms=False)
    lc = [r.L_c for r in out.trace]
    edges = np.array([e for es in out.trigger_edges for e in es])
    similar = float(np.mean(edge_cosine(out.graph.features, edges) >= 0.45))
    ugba_removed = res[0].trigger_edges_removed / res[0].trigger_edges
    # SBA-Gen on the same split and seed
    _, _, _, sba = harness.run_seed(graph, "sba-gen", [], cfg, 0, histograms=False)
    _, removed, _ = prune(sba.graph, PRUNE)
    gone = {tuple(e) for e in removed.tolist()}
    att = [tuple(sorted(es[0])) for es in sba.trigger_edges]
    sba_att = sum(e in gone for e in att) / len(att)
    report(6, similar >= 0.95 and ugba_removed < 0.05 and sba_att >= 0.70,
           f"{name}, seed 0, {CONVERGED_EPOCHS} outer epochs (L_c {lc[0]:.3f} -> {lc[-1]:.3f}): "
           f"trigger edges with sim >= 0.45 {similar:.3f} >= 0.95; removed by Prune "
           f"{ugba_removed:.3f} < 0.05; SBA-Gen attachment edges removed {sba_att:.3f} >= 0.70")


def test_c07_ablation_separation():
    ugba = mean(citation_run("ugba", UGBA_MODES), "prune_ld")
    no_c = mean(citation_run("ugba-noC", ("prune_ld",)), "prune_ld")
    no_cs = mean(citation_run("ugba-noCS", ("prune_ld",)), "prune_ld")
    report(7, ugba - no_c >= 0.30 and ugba - no_cs >= 0.30,
           f"Prune+LD ASR: UGBA {ugba:.3f} vs UGBA\\C {no_c:.3f} (gap {ugba - no_c:.3f}) and "
           f"UGBA\\CS {no_cs:.3f} (gap {ugba - no_cs:.3f}), gaps >= 0.30")


# ----------------------------------------------------------- SBM trends

@functools.lru_cache(maxsize=None)
def sbm_graph():
    return data.synth_sbm(data.desk_sbm())


@functools.lru_cache(maxsize=None)
def sbm_asr(attack, budget, trigger_size):
    cfg = AttackConfig(budget=budget, trigger_size=trigger_size)
    rep = harness.run_experiment(sbm_graph(), attack, [NONE], cfg, SEEDS, histograms=False)
    return float(np.mean([r.asr for r in rep.per_seed]))


def near_monotone(vals, tol=0.02):
    drops = [a - b for a, b in zip(vals, vals[1:]) if b < a]
    return len(drops) <= 1 and all(d <= tol for d in drops)


def test_c05_budget_trend_on_sbm():
    budgets = (2, 4, 8, 16)
    ugba = [sbm_asr("ugba", b, 3) for b in budgets]
    rnd = [sbm_asr("ugba-noS", b, 3) for b in budgets]
    gap = ugba[2] - rnd[2]
    fmt = lambda v: "/".join(f"{x:.3f}" for x in v)
    report(5, gap >= 0.10 and near_monotone(ugba) and near_monotone(rnd),
           f"SBM budgets {budgets}: UGBA {fmt(ugba)}, UGBA\\S {fmt(rnd)}; gap at 8 = {gap:.3f} "
           f">= 0.10; monotone (one <= 2-point inversion): {near_monotone(ugba)}/"
           f"{near_monotone(rnd)}")


def test_c08_trigger_size_trend_on_sbm():
    s1, s3 = sbm_asr("ugba", 10, 1), sbm_asr("ugba", 10, 3)
    report(8, s3 >= s1 - 0.02, f"SBM ASR s=3 {s3:.3f} >= s=1 {s1:.3f} (2-point tolerance)")


# ------------------------------------------------------------- scaling

def test_c09_epoch_time_scales_linearly():
    graphs = {n: data.synth_sbm(data.desk_sbm(num_nodes=n, seed=0)) for n in (5000, 10000)}
    times = {n: np.inf for n in graphs}
    # two interleaved rounds; fastest epoch after warm-up, as timeit does on a shared CPU
    for _ in range(2):
        for n, g in graphs.items():
            fit = forge.fit_generator(g, np.arange(0, n, 10), np.arange(1, n, 97)[:10],
                                      forge.BilevelConfig(outer_epochs=20))
            times[n] = min(times[n], float(np.min(fit.epoch_seconds[2:])))
    ratio = times[10000] / times[5000]
    report(9, 1.5 <= ratio <= 3.0,
           f"fastest outer epoch {times[5000] * 1e3:.1f}ms (5k) vs {times[10000] * 1e3:.1f}ms "
           f"(10k): ratio {ratio:.2f} in [1.5, 3.0]")


# --------------------------------------------------------- determinism

def test_c10_evaluate_is_deterministic(tmp_path):
    args = ["evaluate", "--dataset", "sbm", "--attack", "ugba", "--seeds", "0",
            "--defense", "none,prune_ld"]
    for d in ("a", "b"):
        assert cli.main(args + ["--out", str(tmp_path / d)]) == 0
    a = (tmp_path / "a" / "report.json").read_bytes()
    b = (tmp_path / "b" / "report.json").read_bytes()
    json.loads(a)
    report(10, a == b, f"two cmd_evaluate runs give byte-identical report.json ({len(a)} bytes)")
