"""Engine configuration: one TOML file covering every subcommand.

Sections are optional and default sensibly; flags override file values.
Paths referenced by the service section are validated when the config
loads, so a bad deployment fails at startup instead of first request.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .augment import AugmentPolicy
from .losses import TrainerConfig
from .metrics import EvalConfig


class ConfigError(ValueError):
    """Raised for unreadable config files or invalid values."""


@dataclass
class VariantConfig:
    index: str
    query_embeddings: Optional[str] = None


@dataclass
class ServiceConfig:
    metadata: str
    variants: dict
    sessions_log: str = "sessions.jsonl"
    enrichment_cache: Optional[str] = None
    static_image_root: Optional[str] = None
    host: str = "127.0.0.1"
    port: int = 8077
    assignment_seed: int = 0
    cors_origin: str = "*"
    k_cap: int = 100
    bearer_token_env: Optional[str] = None
    study_tasks: list = field(default_factory=list)  # of (task_id, record_id)


@dataclass
class EngineConfig:
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    metrics: EvalConfig = field(default_factory=EvalConfig)
    service: Optional[ServiceConfig] = None


def _build(cls, section: dict, what: str):
    try:
        return cls(**section)
    except TypeError as exc:
        raise ConfigError(f"bad [{what}] section: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"bad [{what}] value: {exc}") from exc


def _parse_service(section: dict, base: Path) -> ServiceConfig:
    section = dict(section)
    raw_variants = section.pop("variants", None)
    if not raw_variants:
        raise ConfigError("service config needs at least one [service.variants.X] table")
    variants = {}
    for name, sub in raw_variants.items():
        variants[name] = _build(VariantConfig, sub, f"service.variants.{name}")
    raw_tasks = section.pop("study_tasks", [])
    tasks = []
    for i, t in enumerate(raw_tasks):
        if "task_id" not in t or "record_id" not in t:
            raise ConfigError(f"study_tasks[{i}] needs task_id and record_id")
        tasks.append((str(t["task_id"]), str(t["record_id"])))
    cfg = _build(ServiceConfig, {**section, "variants": variants, "study_tasks": tasks},
                 "service")

    def resolve(p: Optional[str]) -> Optional[str]:
        if p is None:
            return None
        rp = Path(p)
        return str(rp if rp.is_absolute() else base / rp)

    cfg.metadata = resolve(cfg.metadata)
    cfg.sessions_log = resolve(cfg.sessions_log)
    cfg.enrichment_cache = resolve(cfg.enrichment_cache)
    cfg.static_image_root = resolve(cfg.static_image_root)
    for v in cfg.variants.values():
        v.index = resolve(v.index)
        v.query_embeddings = resolve(v.query_embeddings)

    missing = []
    if not Path(cfg.metadata).exists():
        missing.append(cfg.metadata)
    for v in cfg.variants.values():
        if not Path(v.index).exists():
            missing.append(v.index)
        if v.query_embeddings and not Path(v.query_embeddings).exists():
            missing.append(v.query_embeddings)
    if cfg.enrichment_cache and not Path(cfg.enrichment_cache).exists():
        missing.append(cfg.enrichment_cache)
    if missing:
        raise ConfigError(f"service config references missing paths: {', '.join(missing)}")
    return cfg


def load_config(path) -> EngineConfig:
    """Parse a TOML engine config; relative service paths resolve against
    the config file's directory."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc

    cfg = EngineConfig()
    if "augment" in data:
        section = dict(data["augment"])
        for key in ("crop_scale_range", "erase_area_range", "gridmask_unit_range"):
            if key in section:
                section[key] = tuple(section[key])
        cfg.augment = _build(AugmentPolicy, section, "augment")
    if "trainer" in data:
        cfg.trainer = _build(TrainerConfig, dict(data["trainer"]), "trainer")
    if "metrics" in data:
        section = dict(data["metrics"])
        if "k_list" in section:
            section["k_list"] = tuple(int(k) for k in section["k_list"])
        cfg.metrics = _build(EvalConfig, section, "metrics")
    if "service" in data:
        cfg.service = _parse_service(dict(data["service"]), path.resolve().parent)
    return cfg
