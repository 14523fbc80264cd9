"""Run configuration: ``key=value`` files, flag overrides and validation."""
from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace

from .baselines import ATTACKS, AttackConfig
from .defense import MODES, DefenseConfig
from .harness import ARCHS


class ConfigError(ValueError):
    pass


SWEEPS = {
    "budget": (2, 4, 8, 16),
    "beta": (0.0, 0.5, 1.0, 50.0, 100.0),
    "T": (0.0, 0.2, 0.4, 0.6, 0.8, 1.0),
    "trigger_size": (1, 2, 3, 4, 5),
}


@dataclass
class RunConfig:
    dataset: str = "sbm"             # bundle directory, "sbm" or "citation"
    dataset_seed: int = 0
    sbm_nodes: int = 2000
    sbm_blocks: int = 4
    sbm_avg_degree: float = 8.0
    sbm_homophily: float = 0.8
    sbm_feature_dim: int = 16
    sbm_separation: float = 4.0
    sbm_noise: float = 0.5
    attack: str = "ugba"
    arch: str = "gcn"
    defense: str = "none"            # comma list for evaluate / ablate
    quantile: float = 0.1
    threshold: float | None = None
    apply_at_inference: bool = True
    exclude_target_class: bool = False
    seeds: str = "0,1,2,3,4"
    target_epochs: int = 200
    sweep: str = ""
    sweep_values: str = ""
    out: str = "runs/out"
    # attack
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
    K: int = 0
    selection_order: str = "asc"
    encoder_epochs: int = 200
    clamp_features: bool = False
    sba_p: float = 0.8
    sba_universal: bool = False

    # ------------------------------------------------------------- derived
    def seed_list(self):
        return [int(s) for s in self.seeds.split(",") if s.strip()]

    def defense_modes(self):
        return [m.strip() for m in self.defense.split(",") if m.strip()]

    def defense_configs(self):
        return [DefenseConfig(m, None if self.threshold is not None else self.quantile,
                              self.threshold, self.apply_at_inference)
                for m in self.defense_modes()]

    def attack_config(self, seed=0):
        names = {f.name for f in fields(AttackConfig)}
        return AttackConfig(**{k: getattr(self, k) for k in names if k != "seed"}, seed=seed)

    def sweep_list(self):
        if not self.sweep:
            return []
        if not self.sweep_values:
            return list(SWEEPS[self.sweep])
        cast = int if self.sweep in ("budget", "trigger_size") else float
        return [cast(v) for v in self.sweep_values.split(",") if v.strip()]

    def validate(self):
        if self.attack not in ATTACKS:
            raise ConfigError(f"attack: unknown {self.attack!r} (choose from {', '.join(ATTACKS)})")
        if self.arch not in ARCHS:
            raise ConfigError(f"arch: unknown {self.arch!r}")
        modes = self.defense_modes()
        if not modes or any(m not in MODES for m in modes):
            raise ConfigError(f"defense: expected a comma list of {', '.join(MODES)}")
        try:
            seeds = self.seed_list()
        except ValueError:
            raise ConfigError(f"seeds: not a comma list of integers: {self.seeds!r}") from None
        if not seeds:
            raise ConfigError("seeds: at least one seed required")
        if self.sweep and self.sweep not in SWEEPS:
            raise ConfigError(f"sweep: unknown {self.sweep!r} (choose from {', '.join(SWEEPS)})")
        try:
            self.sweep_list()
        except ValueError:
            raise ConfigError(f"sweep_values: cannot parse {self.sweep_values!r}") from None
        if self.dataset not in ("sbm", "citation") and not os.path.isdir(self.dataset):
            raise ConfigError(f"dataset: {self.dataset!r} is neither a bundle directory "
                              "nor 'sbm'/'citation'")
        for name in ("budget", "trigger_size", "inner_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1")
        for name in ("outer_epochs", "encoder_epochs", "target_epochs", "K"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("optimizer: expected adam or sgd")
        try:
            self.defense_configs()
            self.attack_config().bilevel()
            self.attack_config().selection()
            if self.sba_p < 0 or self.sba_p > 1:
                raise ValueError("sba_p must lie in [0, 1]")
        except ValueError as e:
            raise ConfigError(str(e)) from None
        return self

    # ----------------------------------------------------------- file I/O
    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={'' if v is None else _fmt(v)}")
        return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


_DEFAULTS = RunConfig()


def _parse_bool(key, raw):
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {raw!r}")


def coerce(key, raw):
    """Convert a string value for ``key`` to the field's type."""
    if key not in {f.name for f in fields(RunConfig)}:
        raise ConfigError(f"unknown config key {key!r}")
    default = getattr(_DEFAULTS, key)
    if isinstance(raw, str):
        raw = raw.strip()
    else:
        return raw
    if key == "threshold":
        return None if raw in ("", "none", "None") else _to(float, key, raw)
    if isinstance(default, bool):
        return _parse_bool(key, raw)
    if isinstance(default, int):
        return _to(int, key, raw)
    if isinstance(default, float):
        return _to(float, key, raw)
    return raw


def _to(cast, key, raw):
    try:
        return cast(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {cast.__name__}") from None


def parse_config_text(text, source="<config>"):
    values = {}
    for no, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{no}: expected key=value")
        key, raw = line.split("=", 1)
        key = key.strip().replace("-", "_")
        try:
            values[key] = coerce(key, raw)
        except ConfigError as e:
            raise ConfigError(f"{source}:{no}: {e}") from None
    return values


def load_config(path=None, overrides=None):
    values = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        values.update(parse_config_text(text, path))
    for k, v in (overrides or {}).items():
        values[k] = coerce(k, v)
    return replace(RunConfig(), **values).validate()
