"""Experiment configuration and the glue that turns it into runs."""

from __future__ import annotations

import dataclasses
import math
import threading
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import accounting, federation, vit
from .data import DomainShift, TaskSpec, make_synthetic, partition
from .errors import ConfigError
from .federation import FederationConfig, FedSetup
from .peft import PeftConfig, parse_strategy
from .rng import Rng
from .vit import VitConfig


@dataclass(frozen=True)
class DataConfig:
    num_classes: int = 4
    train_per_class: int = 48
    test_per_class: int = 50
    margin: float = 1.0
    noise: float = 0.25
    partition: str = "iid"  # iid | dirichlet | size
    beta: float = 0.3
    size_weights: tuple = ()
    domain_shift: bool = False
    seed: int = 0


@dataclass(frozen=True)
class PretrainConfig:
    num_classes: int = 8
    train_per_class: int = 64
    epochs: int = 20
    lr: float = 0.05
    seed: int = 0


@dataclass(frozen=True)
class WarmStartConfig:
    holdout: int = 3
    epochs: int = 5
    lr: float = 1e-2


@dataclass(frozen=True)
class ExperimentConfig:
    strategies: tuple = ("vpt",)
    seeds: int = 3
    base_seed: int = 0
    vit: VitConfig = field(default_factory=VitConfig)
    peft: PeftConfig = field(default_factory=PeftConfig)
    fed: FederationConfig = field(default_factory=FederationConfig)
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    warm: WarmStartConfig = field(default_factory=WarmStartConfig)

    @property
    def seed_list(self):
        return [self.base_seed + i for i in range(self.seeds)]


SECTIONS = {"vit": VitConfig, "peft": PeftConfig, "fed": FederationConfig,
            "data": DataConfig, "pretrain": PretrainConfig, "warm": WarmStartConfig}

# desk-scale preset used by the acceptance suite and `configs/desk.yaml`
DESK_OVERRIDES = {
    "peft.num_prompts": 8,
    "peft.prompt_rank": 4,
    "fed.rounds": 50,
}


def _coerce(value, default, key):
    if isinstance(default, bool):
        if isinstance(value, str):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return bool(value)
    if isinstance(default, tuple):
        if isinstance(value, str):
            items = [v.strip() for v in value.split(",") if v.strip()]
        elif isinstance(value, (list, tuple)):
            items = list(value)
        else:
            items = [value]
        if default and isinstance(default[0], (int, float)) and not isinstance(default[0], bool):
            return tuple(type(default[0])(v) for v in items)
        if key.endswith("size_weights"):
            return tuple(float(v) for v in items)
        return tuple(str(v) for v in items)
    try:
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot interpret {value!r}") from exc
    return str(value)


def apply_overrides(cfg: ExperimentConfig, flat: dict) -> ExperimentConfig:
    """Apply ``{"section.field": value}`` overrides; unknown keys are errors."""
    top = {}
    nested = {name: {} for name in SECTIONS}
    for key, value in flat.items():
        if "." in key:
            section, name = key.split(".", 1)
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section in {key!r}")
            known = {f.name: f for f in fields(SECTIONS[section])}
            if name not in known:
                raise ConfigError(f"unknown config key {key!r}")
            default = getattr(getattr(cfg, section), name)
            nested[section][name] = _coerce(value, default, key)
        else:
            known = {f.name for f in fields(ExperimentConfig)} - set(SECTIONS)
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            top[key] = _coerce(value, getattr(cfg, key), key)
    try:
        for section, vals in nested.items():
            if vals:
                top[section] = replace(getattr(cfg, section), **vals)
        out = replace(cfg, **top)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    for s in out.strategies:
        parse_strategy(s)
    if out.seeds < 1:
        raise ConfigError("seeds must be >= 1")
    return out


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        doc = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a mapping of dotted keys")
    return apply_overrides(ExperimentConfig(), doc)


def desk_config(**overrides) -> ExperimentConfig:
    return apply_overrides(ExperimentConfig(), {**DESK_OVERRIDES, **overrides})


def flatten(cfg: ExperimentConfig) -> dict:
    out = {"strategies": list(cfg.strategies), "seeds": cfg.seeds, "base_seed": cfg.base_seed}
    for section in SECTIONS:
        for k, v in dataclasses.asdict(getattr(cfg, section)).items():
            out[f"{section}.{k}"] = list(v) if isinstance(v, tuple) else v
    return out


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(flatten(cfg), sort_keys=True, default_flow_style=False)


# building blocks -----------------------------------------------------------

def task_spec(cfg: ExperimentConfig) -> TaskSpec:
    d = cfg.data
    return TaskSpec(num_classes=d.num_classes, train_per_class=d.train_per_class,
                    test_per_class=d.test_per_class, image_size=cfg.vit.image_size,
                    channels=cfg.vit.channels, margin=d.margin, noise=d.noise,
                    family="target", shift=DomainShift() if d.domain_shift else None)


def build_task(cfg: ExperimentConfig):
    if cfg.data.num_classes != cfg.vit.num_classes:
        raise ConfigError("data.num_classes and vit.num_classes disagree")
    task = make_synthetic(task_spec(cfg), Rng(cfg.data.seed))
    d = cfg.data
    part = partition(task.train.labels, cfg.fed.num_clients, d.partition,
                     Rng(d.seed).child("partition"), beta=d.beta,
                     weights=d.size_weights or None)
    return task, part


_base_cache = {}
_base_lock = threading.Lock()


def pretrained_base(cfg: ExperimentConfig):
    """Backbone trained on the synthetic source task; memoised per process."""
    p = cfg.pretrain
    src_vit = replace(cfg.vit, num_classes=p.num_classes)
    key = (src_vit, p, cfg.data.noise, cfg.data.margin)
    with _base_lock:
        if key not in _base_cache:
            spec = TaskSpec(num_classes=p.num_classes, train_per_class=p.train_per_class,
                            test_per_class=1, image_size=src_vit.image_size,
                            channels=src_vit.channels, margin=cfg.data.margin,
                            noise=cfg.data.noise, family="source")
            src = make_synthetic(spec, Rng(p.seed))
            rng = Rng(p.seed).child("pretrain")
            init = vit.init_params(src_vit, rng.child("init"))
            _base_cache[key] = vit.pretrain_desk(src_vit, init, src.train, p.epochs,
                                                 rng.child("sgd"), lr=p.lr)
        return _base_cache[key].copy()


def setup_for(cfg: ExperimentConfig, strategy, seed: int, **fed_overrides) -> FedSetup:
    fed = replace(cfg.fed, **fed_overrides) if fed_overrides else cfg.fed
    return FedSetup(parse_strategy(strategy), cfg.vit, cfg.peft, fed, seed)


def final_accuracy(records) -> float:
    return records[-1].balanced_accuracy if records else float("nan")


def mean_std(values):
    arr = np.asarray(values, dtype=float)
    std = float(arr.std(ddof=1)) if arr.size > 1 else None
    return {"mean": float(arr.mean()), "std": std, "n": int(arr.size)}


def check_accounting(cfg: ExperimentConfig, setup: FedSetup, records) -> accounting.Verification:
    row = accounting.count_exchangeable(setup.strategy, cfg.vit, cfg.peft)
    return accounting.verify_against_runtime(row, records, setup.fed.num_clients, cfg.vit, cfg.peft)


def spread(values) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return max(vals) - min(vals) if vals else float("nan")


def run_one(cfg: ExperimentConfig, strategy, seed: int, task=None, part=None, base=None):
    if task is None:
        task, part = build_task(cfg)
    if base is None:
        base = pretrained_base(cfg)
    setup = setup_for(cfg, strategy, seed)
    return setup, federation.run_federation(setup, task, part, base)
