"""Command-line entry point.

    graphbackdoor attack   --dataset DIR|sbm|citation --attack ugba --out runs/a
    graphbackdoor defend   --poisoned runs/a/poisoned --defense prune_ld --out runs/d
    graphbackdoor evaluate --config run.cfg --defense none,prune,prune_ld
    graphbackdoor ablate   --sweep budget --out runs/sweep
    graphbackdoor report   runs/x runs/y --out runs/summary

Exit status: 0 on success, 1 for configuration errors, 2 for runtime errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import data, nn
from .baselines import run_attack
from .config import SWEEPS, ConfigError, RunConfig, load_config
from .defense import DefenseConfig, apply_defense, histogram_csv
from .harness import make_inductive_split, run_experiment

log = logging.getLogger("graphbackdoor")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def load_dataset(cfg):
    if cfg.dataset == "sbm":
        spec = data.desk_sbm(cfg.sbm_nodes, cfg.sbm_blocks, cfg.sbm_avg_degree,
                             cfg.sbm_homophily, cfg.sbm_feature_dim, cfg.sbm_separation,
                             cfg.sbm_noise, cfg.dataset_seed)
        return data.synth_sbm(spec), "sbm"
    if cfg.dataset == "citation":
        return data.synth_citation(data.CitationSpec(seed=cfg.dataset_seed)), "citation"
    return data.load_bundle(cfg.dataset), data.bundle_name(cfg.dataset)


def workers():
    raw = os.environ.get("GBL_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"GBL_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("GBL_THREADS must be >= 1")
    return n


def _write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    os.replace(tmp, path)


def _save_config(cfg, out):
    _write(Path(out) / "config.txt", cfg.to_text())


def _json(obj):
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


# ------------------------------------------------------------------ commands

def cmd_attack(cfg):
    graph, name = load_dataset(cfg)
    seed = cfg.seed_list()[0]
    split = make_inductive_split(graph, seed)
    outcome = run_attack(cfg.attack, split.train_graph, split.labeled, cfg.attack_config(seed),
                         split.attack_pool())
    out = Path(cfg.out)
    visible = np.full(outcome.graph.num_nodes, -1, dtype=np.int64)
    visible[outcome.labeled] = outcome.graph.labels[outcome.labeled]
    data.save_poisoned(out / "poisoned", outcome.graph.with_labels(visible),
                       outcome.poisoned_labels, list(outcome.vp), outcome.trigger_edges,
                       name=f"{name}-{cfg.attack}")
    split_lines = [f"{k}={','.join(str(int(v)) for v in getattr(split, k))}"
                   for k in ("train_ids", "labeled", "validation", "target_nodes", "clean_test")]
    _write(out / "split.txt", "\n".join(split_lines) + "\n")
    if outcome.generator is not None:
        data.save_generator(out / "generator", outcome.generator, cfg.attack_config(seed))
        rows = ["epoch,L_s,L_g,L_c"] + [
            f"{r.epoch},{r.L_s!r},{r.L_g!r},{'' if r.L_c is None else repr(r.L_c)}"
            for r in outcome.trace]
        _write(out / "trace.csv", "\n".join(rows) + "\n")
        _write(out / "timings.json", _json({"epoch_seconds": outcome.epoch_seconds}))
    _save_config(cfg, out)
    print(f"poisoned {len(outcome.vp)} nodes; artifacts in {out}")
    return EXIT_OK


def cmd_defend(poisoned, dcfg, out):
    pb = data.load_poisoned(poisoned)
    g = pb.graph
    labeled = np.flatnonzero(g.labels >= 0)
    res = apply_defense(g, labeled, dcfg, pb.poisoned_labels)
    gd = res["graph"]
    labels = np.full(gd.num_nodes, -1, dtype=np.int64)
    labels[res["labeled"]] = gd.labels[res["labeled"]]
    removed = res["removed"]
    n = g.num_nodes
    rkeys = set((removed[:, 0] * n + removed[:, 1]).tolist())
    kept_sets = [tuple((u, v) for u, v in es if min(u, v) * n + max(u, v) not in rkeys)
                 for es in pb.trigger_edges]
    n_trig = sum(len(es) for es in pb.trigger_edges)
    n_trig_removed = n_trig - sum(len(es) for es in kept_sets)
    att = [es[0] for es in pb.trigger_edges if es]
    att_removed = sum(min(u, v) * n + max(u, v) in rkeys for u, v in att)
    table = res["poisoned_labels"] or {}
    out = Path(out)
    data.save_poisoned(out / "defended", gd.with_labels(labels), table, pb.vp, kept_sets,
                       name=data.bundle_name(poisoned) + f"-{dcfg.mode}")
    report = {
        "mode": dcfg.mode,
        "threshold": None if res["threshold"] is None else float(res["threshold"]),
        "removed_edges": int(len(removed)),
        "trigger_edges": n_trig,
        "trigger_edges_removed": n_trig_removed,
        "removed_trigger_fraction": (n_trig_removed / n_trig) if n_trig else 0.0,
        "attachment_edges": len(att),
        "attachment_edges_removed": att_removed,
        "discarded_labels": int(len(res["discarded"])),
        "poisoned_labels_kept": len(table),
    }
    _write(out / "pruning_report.json", _json(report))
    print(f"removed {report['removed_edges']} edges "
          f"({n_trig_removed}/{n_trig} trigger edges), "
          f"discarded {report['discarded_labels']} labels")
    return EXIT_OK


def _hist_csv(hists):
    left = trig = clean = None
    for h in hists:
        if left is None:
            left, trig, clean = h["bin_left"], np.array(h["trigger_count"]), np.array(
                h["clean_count"])
        else:
            trig = trig + np.array(h["trigger_count"])
            clean = clean + np.array(h["clean_count"])
    return histogram_csv(left, trig, clean)


def _experiment(cfg, graph, name, **over):
    c = replace(cfg, **over) if over else cfg
    return run_experiment(graph, c.attack, c.defense_configs(), c.attack_config(), c.seed_list(),
                          arch=c.arch, dataset=name, exclude_target_class=c.exclude_target_class,
                          target_epochs=c.target_epochs, workers=workers())


def cmd_evaluate(cfg):
    graph, name = load_dataset(cfg)
    report = _experiment(cfg, graph, name)
    out = Path(cfg.out)
    _write(out / "report.json", _json(report.to_json_dict()))
    _write(out / "report.csv", "\n".join(report.csv_rows()) + "\n")
    _write(out / "timings.json", _json(report.timings))
    for seed, h in report.histograms.items():
        _write(out / "histograms" / f"seed_{seed}.csv",
               histogram_csv(h["bin_left"], h["trigger_count"], h["clean_count"]))
    _save_config(cfg, out)
    for d in report.defenses:
        s = report.summary(d)
        print(f"{name} {cfg.attack} {d}: ASR {s['asr']['mean']:.3f}±{s['asr']['std']:.3f} "
              f"clean {s['clean_acc']['mean']:.3f} (ref {s['clean_graph_acc']['mean']:.3f})")
    return EXIT_OK


def cmd_ablate(cfg):
    if not cfg.sweep:
        raise ConfigError("ablate needs --sweep (one of: " + ", ".join(SWEEPS) + ")")
    graph, name = load_dataset(cfg)
    rows = ["sweep,value,seed,defense,asr,clean_acc"]
    summary = ["sweep,value,defense,asr_mean,asr_std,clean_acc_mean,clean_acc_std"]
    for value in cfg.sweep_list():
        report = _experiment(cfg, graph, name, **{cfg.sweep: value})
        for r in report.per_seed:
            rows.append(f"{cfg.sweep},{value},{r.seed},{r.defense},{r.asr!r},{r.clean_acc!r}")
        for d in report.defenses:
            s = report.summary(d)
            summary.append(f"{cfg.sweep},{value},{d},{s['asr']['mean']!r},{s['asr']['std']!r},"
                           f"{s['clean_acc']['mean']!r},{s['clean_acc']['std']!r}")
        print(f"{cfg.sweep}={value}: " + ", ".join(
            f"{d} ASR {report.summary(d)['asr']['mean']:.3f}" for d in report.defenses))
    out = Path(cfg.out)
    _write(out / "sweep.csv", "\n".join(rows) + "\n")
    _write(out / "sweep_summary.csv", "\n".join(summary) + "\n")
    _save_config(cfg, out)
    return EXIT_OK


def cmd_report(run_dirs, out):
    if not run_dirs:
        raise ConfigError("report needs at least one run directory")
    groups, hists = {}, {}
    for d in run_dirs:
        p = Path(d) / "report.json"
        if not p.exists():
            raise ConfigError(f"{d}: no report.json")
        rep = json.loads(p.read_text(encoding="utf-8"))
        for r in rep["per_seed"]:
            key = (rep["dataset"], rep["attack_display"], rep["arch"], r["defense"])
            groups.setdefault(key, []).append((r["asr"], r["clean_acc"]))
        hists.setdefault((rep["dataset"], rep["attack"]), []).extend(rep["histograms"].values())
    lines = ["dataset,attack,arch,defense,runs,asr_mean,asr_std,clean_acc_mean,clean_acc_std"]
    for key in sorted(groups):
        v = np.array(groups[key])
        stats = (v[:, 0].mean(), v[:, 0].std(), v[:, 1].mean(), v[:, 1].std())
        lines.append(",".join(key) + f",{len(v)}," + ",".join(repr(float(x)) for x in stats))
    out = Path(out)
    _write(out / "summary.csv", "\n".join(lines) + "\n")
    for (ds, atk), hs in sorted(hists.items()):
        if hs:
            _write(out / f"histogram_{ds}_{atk}.csv", _hist_csv(hs))
    print("\n".join(lines))
    return EXIT_OK


# --------------------------------------------------------------------- parser

_DEFENSE_KEYS = ("defense", "quantile", "threshold", "apply_at_inference")


def _add_run_flags(p, only=None):
    p.add_argument("--config", help="key=value file; flags override it")
    for f in fields(RunConfig):
        if only is not None and f.name not in only:
            continue
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None,
                       metavar=f.name.upper())


def build_parser():
    p = _Parser(prog="graphbackdoor", description="Graph backdoor attack lab")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in ("attack", "evaluate", "ablate"):
        _add_run_flags(sub.add_parser(name))
    d = sub.add_parser("defend")
    d.add_argument("--poisoned", required=True)
    _add_run_flags(d, only=_DEFENSE_KEYS + ("out",))
    r = sub.add_parser("report")
    r.add_argument("runs", nargs="*")
    r.add_argument("--out", required=True)
    return p


def _overrides(ns):
    skip = {"command", "verbose", "config", "poisoned", "runs"}
    return {k: v for k, v in vars(ns).items() if k not in skip and v is not None}


def _defend_config(ns):
    over = _overrides(ns)
    cfg = load_config(ns.config, over)
    modes = cfg.defense_modes()
    if len(modes) != 1:
        raise ConfigError("defend takes exactly one --defense mode")
    if not Path(ns.poisoned).is_dir():
        raise ConfigError(f"--poisoned {ns.poisoned!r} is not a directory")
    return cfg.defense_configs()[0], cfg.out


def main(argv=None):
    try:
        ns = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if ns.command == "report":
            return cmd_report(ns.runs, ns.out)
        if ns.command == "defend":
            dcfg, out = _defend_config(ns)
            return cmd_defend(ns.poisoned, dcfg, out)
        cfg = load_config(ns.config, _overrides(ns))
        workers()
        return {"attack": cmd_attack, "evaluate": cmd_evaluate,
                "ablate": cmd_ablate}[ns.command](cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except nn.DivergenceError as e:
        print(f"runtime error: divergence: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (data.BundleError, RuntimeError, ValueError, OSError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
