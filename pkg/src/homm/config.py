"""Experiment configuration: profiles, INI loading and the resolved echo."""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .domains import cards, poly

DOMAINS = ("poly", "cards")
PROFILES = ("paper", "desk")
ABLATIONS = ("none", "separate-z", "conditioned-f")


class ConfigError(ValueError):
    pass


@dataclass
class ArchitectureConfig:
    z_dim: int = 512
    i_layers: int = 3
    i_hidden: int = 64
    t_layers: int = 1
    o_layers: int = 1
    o_hidden: int = 512
    mh_hidden: int = 512
    h_layers: int = 4
    f_layers: int = 4
    f_hidden: int = 64
    l_layers: int = 2
    l_hidden: int = 512


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    base_lr: float = 3e-5
    meta_lr: float = 1e-5
    base_decay: float = 0.85
    meta_decay: float = 0.85
    base_lr_min: float = 3e-8
    meta_lr_min: float = 1e-7
    decay_period: int = 100
    cached_embedding_lr: float = 1e-3


@dataclass
class DataConfig:
    epochs: int = 4000
    dataset_size: int = 1024
    refresh_period: int = 50
    m_batch_size: int = 50
    eval_every: int = 0  # 0: evaluate only at the end


@dataclass
class TaskConfig:
    # polynomials
    n_vars: int = 4
    max_degree: int = 2
    n_trained_sources: int = 60
    n_new_tasks: int = 40
    trained_mappings: tuple = tuple(m.name for m in poly.TRAINED_MAPPINGS)
    held_out_mappings: tuple = tuple(m.name for m in poly.HELD_OUT_MAPPINGS)
    classifications: tuple = tuple(poly.CLASSIFICATIONS)
    # cards
    holdout: str = "random"  # random | targeted
    include_suits_rule: bool = True
    win_rule: str = "rank"
    card_mappings: tuple = ("losers", "suits_rule", "switch_suit")
    card_classifications: tuple = cards.GAMES + cards.ATTRIBUTES


@dataclass
class ContinualConfig:
    n_old: int = 100
    n_new: int = 100
    steps: int = 3000
    target_fraction: float = 0.1  # target loss as a fraction of the mean-predictor loss
    m_batch_size: int = 128
    replay_ratio: float = 1.0


@dataclass
class ExperimentConfig:
    domain: str = "poly"
    profile: str = "paper"
    seed: int = 0
    ablation: str = "none"
    language: bool = False
    language_alone: bool = False
    out: str = "runs/default"
    architecture: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    tasks: TaskConfig = field(default_factory=TaskConfig)
    continual: ContinualConfig = field(default_factory=ContinualConfig)

    def validate(self) -> "ExperimentConfig":
        if self.domain not in DOMAINS:
            raise ConfigError(f"domain must be one of {DOMAINS}")
        if self.profile not in PROFILES:
            raise ConfigError(f"profile must be one of {PROFILES}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}")
        if self.optimizer.kind not in ("adam", "rmsprop"):
            raise ConfigError("optimizer kind must be adam or rmsprop")
        if self.tasks.holdout not in ("random", "targeted"):
            raise ConfigError("holdout must be random or targeted")
        if self.tasks.win_rule not in ("rank", "opponent"):
            raise ConfigError("win_rule must be rank or opponent")
        if not 0 < self.data.m_batch_size < self.data.dataset_size:
            raise ConfigError("m_batch_size must leave at least one probe")
        if self.architecture.z_dim < 1 or self.data.epochs < 0:
            raise ConfigError("sizes must be positive")
        for name in self.tasks.trained_mappings + self.tasks.held_out_mappings:
            poly.PolyMetaMapping.from_name(name)
        unknown = set(self.tasks.card_classifications) - set(cards.GAMES + cards.ATTRIBUTES)
        if unknown:
            raise ConfigError(f"unknown card classifications {sorted(unknown)}")
        if self.language_alone and self.domain != "cards":
            raise ConfigError("language-alone task descriptions exist only for cards")
        if set(self.tasks.trained_mappings) & set(self.tasks.held_out_mappings):
            raise ConfigError("a mapping cannot be both trained and held out")
        return self


def _poly_paper() -> ExperimentConfig:
    return ExperimentConfig(domain="poly")


def _cards_paper() -> ExperimentConfig:
    return ExperimentConfig(
        domain="cards",
        architecture=ArchitectureConfig(o_layers=3, l_layers=1),
        optimizer=OptimizerConfig(kind="rmsprop", base_lr=1e-4, meta_lr=1e-4, base_decay=0.85,
                                  meta_decay=0.9, base_lr_min=3e-8, meta_lr_min=3e-7),
        data=DataConfig(epochs=40000, dataset_size=1024, m_batch_size=768),
    )


DESK_TRAINED_MAPPINGS = ("add_1", "add_-1", "multiply_-1", "permute_3210")
DESK_HELD_OUT_MAPPINGS = ("add_2", "multiply_-2")


def _desk(cfg: ExperimentConfig) -> ExperimentConfig:
    cfg.profile = "desk"
    a = cfg.architecture
    a.z_dim, a.i_hidden, a.mh_hidden, a.f_hidden, a.l_hidden = 64, 32, 32, 16, 32
    if a.o_layers > 1:
        a.o_hidden = 32
    o = cfg.optimizer
    if cfg.domain == "poly":
        cfg.data = DataConfig(epochs=500, dataset_size=256, refresh_period=50, m_batch_size=50)
        o.base_lr, o.meta_lr = 1e-3, 1e-3
        o.base_decay = o.meta_decay = 0.85
        o.decay_period = 80
        t = cfg.tasks
        t.max_degree = 1
        t.n_trained_sources, t.n_new_tasks = 30, 20
        t.trained_mappings = DESK_TRAINED_MAPPINGS
        t.held_out_mappings = DESK_HELD_OUT_MAPPINGS
        t.classifications = ()
    else:
        cfg.data = DataConfig(epochs=1000, dataset_size=256, refresh_period=50, m_batch_size=128)
        o.base_lr, o.meta_lr = 1e-3, 1e-3
        o.decay_period = 200
        cfg.tasks.holdout = "targeted"
        cfg.tasks.card_classifications = ()
    cfg.continual = ContinualConfig(n_old=12, n_new=8, steps=300, m_batch_size=50)
    return cfg


def default_config(domain: str = "poly", profile: str = "paper") -> ExperimentConfig:
    if domain not in DOMAINS:
        raise ConfigError(f"domain must be one of {DOMAINS}")
    cfg = _poly_paper() if domain == "poly" else _cards_paper()
    if profile == "desk":
        cfg = _desk(cfg)
    elif profile != "paper":
        raise ConfigError(f"profile must be one of {PROFILES}")
    return cfg.validate()


SECTIONS = ("architecture", "optimizer", "data", "tasks", "continual")


def _coerce(value: str, current):
    if isinstance(current, bool):
        v = value.strip().lower()
        if v not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"not a boolean: {value!r}")
        return v in ("true", "1", "yes")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, tuple):
        return tuple(s.strip() for s in value.split(",") if s.strip())
    return value.strip()


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def apply_overrides(cfg: ExperimentConfig, parser: configparser.ConfigParser) -> ExperimentConfig:
    for section in parser.sections():
        if section == "experiment":
            target = cfg
        elif section in SECTIONS:
            target = getattr(cfg, section)
        else:
            raise ConfigError(f"unknown section [{section}]")
        known = {f.name: f for f in fields(target) if f.name not in SECTIONS}
        for key, value in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            try:
                setattr(target, key, _coerce(value, getattr(target, key)))
            except ValueError as exc:
                raise ConfigError(f"bad value for {section}.{key}: {exc}") from exc
    return cfg


def load_config(path: str | os.PathLike | None = None, *, domain: str | None = None,
                profile: str | None = None) -> ExperimentConfig:
    """Read an INI file over the defaults of its domain and profile."""
    parser = configparser.ConfigParser()
    if path is not None:
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    exp = parser["experiment"] if parser.has_section("experiment") else {}
    domain = domain or exp.get("domain", "poly")
    profile = profile or exp.get("profile", "paper")
    cfg = default_config(domain, profile)
    apply_overrides(cfg, parser)
    cfg.domain, cfg.profile = domain, profile
    return cfg.validate()


def to_ini(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser()
    parser["experiment"] = {f.name: _format(getattr(cfg, f.name))
                            for f in fields(cfg) if f.name not in SECTIONS}
    for section in SECTIONS:
        sub = getattr(cfg, section)
        parser[section] = {f.name: _format(getattr(sub, f.name)) for f in fields(sub)}
    lines = []
    for section in parser.sections():
        lines.append(f"[{section}]")
        lines += [f"{k} = {v}" for k, v in parser[section].items()]
        lines.append("")
    return "\n".join(lines)


def write_resolved(cfg: ExperimentConfig, out_dir: str | os.PathLike) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "resolved-config"
    path.write_text(to_ini(cfg))
    return path


def replace(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    return dataclasses.replace(cfg, **changes)
