"""YAML run configuration with dotted ``key=value`` overrides."""

from __future__ import annotations

import copy
from pathlib import Path

import yaml

from .augment import CropSpec
from .curriculum import CurriculumParams
from .experiments import NoisyLabelConfig
from .synthcells import GeneratorConfig, PopulationSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "generate": {"workers": 1},
    "train": {"manifest": None},
    "eval": {"methods": ["baseline", "mvm", "mvwcos"], "views": 10, "seed": 1234, "trace": False,
             "manifest": None},
    "noisy": {},
    # competence curve drawn by `report`
    "report": {"curriculum": {"alpha": 0.5, "beta": 0.5, "c0": 0.05, "T": 1000, "p": 2.0}},
}


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (extra or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_override(item: str) -> tuple[list[str], object]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    keys = key.strip().split(".")
    if not all(keys):
        raise ConfigError(f"bad override key {key!r}")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value in override {item!r}: {exc}") from exc
    return keys, value


def apply_override(cfg: dict, keys: list[str], value) -> None:
    node = cfg
    for k in keys[:-1]:
        if node.get(k) is None:
            node[k] = {}
        node = node[k]
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {'.'.join(keys)}: {k} is not a section")
    node[keys[-1]] = value


def load(path=None, overrides=()) -> dict:
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{p}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
    cfg = _merge(DEFAULTS, raw)
    for item in overrides:
        apply_override(cfg, *parse_override(item))
    return cfg


def _build(cls, section: str, d: dict, **kw):
    try:
        obj = cls.from_dict(d, **kw) if hasattr(cls, "from_dict") else cls(**d)
    except TypeError as exc:
        raise ConfigError(f"[{section}] {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"[{section}] {exc}") from exc
    return obj


def generator_config(cfg: dict) -> GeneratorConfig:
    d = {k: v for k, v in cfg.get("generate", {}).items() if k != "workers"}
    gen = _build(GeneratorConfig, "generate", d)
    try:
        gen.validate()
    except ValueError as exc:
        raise ConfigError(f"[generate] {exc}") from exc
    return gen


def train_config(cfg: dict, population: PopulationSpec | None = None) -> TrainConfig:
    d = {k: v for k, v in cfg.get("train", {}).items() if k != "manifest"}
    cur = d.get("curriculum")
    if cur in (False, "off", None):
        d["curriculum"] = None
    else:
        cur = {} if cur in (True, "on") else dict(cur)
        epochs = int(d.get("epochs", TrainConfig.epochs))
        task = d.get("task", TrainConfig.task)
        # curriculum phase defaults to the first half of training
        cur.setdefault("T", max(1, epochs // 2))
        try:
            d["curriculum"] = CurriculumParams.for_task(task, population, **cur)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[train.curriculum] {exc}") from exc
    if isinstance(d.get("crop"), dict):
        try:
            d["crop"] = CropSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in d["crop"].items()})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[train.crop] {exc}") from exc
    tc = _build(TrainConfig, "train", d)
    try:
        tc.validate()
    except ValueError as exc:
        raise ConfigError(f"[train] {exc}") from exc
    return tc


def noisy_config(cfg: dict) -> NoisyLabelConfig:
    d = dict(cfg.get("noisy", {}))
    if isinstance(d.get("crop"), dict):
        d["crop"] = CropSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in d["crop"].items()})
    if "seeds" in d:
        d["seeds"] = tuple(d["seeds"])
    if isinstance(d.get("transition_map"), dict):
        d["transition_map"] = {int(k): int(v) for k, v in d["transition_map"].items()}
    try:
        nc = NoisyLabelConfig(**d)
    except TypeError as exc:
        raise ConfigError(f"[noisy] {exc}") from exc
    if not 0 <= nc.noise_rate < 1:
        raise ConfigError("[noisy] noise_rate must lie in [0, 1)")
    if nc.views < 1 or nc.epochs < 1 or nc.n_train < 1:
        raise ConfigError("[noisy] views, epochs and n_train must be >= 1")
    try:
        nc.train_config().validate()
    except ValueError as exc:
        raise ConfigError(f"[noisy] {exc}") from exc
    return nc


def report_curriculum(cfg: dict) -> CurriculumParams:
    try:
        return CurriculumParams(**cfg.get("report", {}).get("curriculum", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[report.curriculum] {exc}") from exc
