"""Run configuration: JSON file format, defaults, and validation."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .cache import VARIANTS
from .network import CacheOptions, TimingConfig
from .ordering import OrdererConfig
from .policy import (
    PolicySyntaxError,
    PolicyTopologyError,
    Topology,
    check_against,
    parse_policy,
)
from .workload import WorkloadConfig

CACHE_CHOICES = ("baseline",) + VARIANTS
MODES = ("deterministic", "concurrent")


class ConfigError(ValueError):
    def __init__(self, errors: list[str]) -> None:
        super().__init__("; ".join(errors))
        self.errors = errors


def default_policy(n_orgs: int) -> str:
    return "AND(" + ",".join(f"'Org{i}.member'" for i in range(1, n_orgs + 1)) + ")"


@dataclass
class RunConfig:
    """Defaults follow the reference setup: 2 orgs x 2 peers, AND over both,
    500-tx blocks cut after at most 2 s, 40% conflicting transactions."""

    peers: list[int] = field(default_factory=lambda: [2, 2])
    policy: str | None = None
    cache: str = "syncmap"
    mode: str = "deterministic"
    orderer: OrdererConfig = field(default_factory=OrdererConfig)
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)
    timing: TimingConfig = field(default_factory=TimingConfig)
    cache_options: CacheOptions = field(default_factory=CacheOptions)
    out: str | None = None

    def __post_init__(self) -> None:
        if self.policy is None:
            self.policy = default_policy(len(self.peers))

    @property
    def seed(self) -> int:
        return self.workload.seed

    @property
    def topology(self) -> Topology:
        return Topology.from_counts(list(self.peers))

    def replace(self, **changes) -> "RunConfig":
        new = copy.deepcopy(self)
        for key, value in changes.items():
            set_path(new, key, value)
        if "peers" in changes and "policy" not in changes and self.policy == default_policy(len(self.peers)):
            new.policy = default_policy(len(new.peers))
        return new

    def validate(self) -> None:
        errors: list[str] = []
        if not self.peers or any(int(m) < 1 for m in self.peers):
            errors.append("topology.peers_per_org: need >= 1 org, each with >= 1 peer")
        if self.cache not in CACHE_CHOICES:
            errors.append(f"cache: must be one of {', '.join(CACHE_CHOICES)}")
        if self.mode not in MODES:
            errors.append(f"mode: must be one of {', '.join(MODES)}")
        try:
            policy = parse_policy(self.policy)
            if not errors:
                check_against(policy, self.topology)
        except (PolicySyntaxError, PolicyTopologyError, ValueError) as exc:
            errors.append(f"policy: {exc}")
        errors += self.orderer.validate()
        errors += self.workload.validate()
        errors += self.timing.validate()
        if self.cache_options.ttl <= 0:
            errors.append("cache_options.ttl_ms: must be positive")
        if self.cache_options.lockfree_threshold < 1:
            errors.append("cache_options.lockfree_threshold: must be >= 1")
        if errors:
            raise ConfigError(errors)

    def header(self) -> dict:
        """Run parameters recorded at the head of the event stream."""
        return {
            "peers": list(self.peers),
            "policy": self.policy,
            "cache": self.cache,
            "mode": self.mode,
            "batch_size": self.orderer.batch_size,
            "batch_timeout_ms": self.orderer.batch_timeout * 1000.0,
            "tx_rate": self.workload.tx_rate,
            "total_tx": self.workload.total_tx,
            "conflict_rate": self.workload.conflict_rate,
            "workload_mode": self.workload.mode,
            "zipf_s": self.workload.zipf_s,
            "key_universe": self.workload.key_universe,
            "retry_aborted": self.workload.retry_aborted,
            "seed": self.workload.seed,
            "timing": dict(vars(self.timing)),
        }

    def to_json(self) -> dict:
        return {
            "topology": {"peers_per_org": list(self.peers)},
            "policy": self.policy,
            "cache": self.cache,
            "mode": self.mode,
            "orderer": {
                "batch_size": self.orderer.batch_size,
                "batch_timeout_ms": self.orderer.batch_timeout * 1000.0,
            },
            "workload": {
                f.name: getattr(self.workload, f.name) for f in fields(self.workload)
            },
            "timing": dict(vars(self.timing)),
            "cache_options": {
                "ttl_ms": self.cache_options.ttl * 1000.0,
                "lockfree_threshold": self.cache_options.lockfree_threshold,
                "syncmap_promote_after": self.cache_options.syncmap_promote_after,
            },
            "out": self.out,
        }


# dotted JSON key -> (attribute path, converter)
_KEYS: dict[str, tuple[str, Any]] = {
    "topology.peers_per_org": ("peers", lambda v: [int(x) for x in v]),
    "policy": ("policy", str),
    "cache": ("cache", str),
    "mode": ("mode", str),
    "seed": ("workload.seed", int),
    "out": ("out", lambda v: None if v is None else str(v)),
    "orderer.batch_size": ("orderer.batch_size", int),
    "orderer.batch_timeout_ms": ("orderer.batch_timeout", lambda v: float(v) / 1000.0),
    "workload.tx_rate": ("workload.tx_rate", float),
    "workload.total_tx": ("workload.total_tx", int),
    "workload.conflict_rate": ("workload.conflict_rate", float),
    "workload.mode": ("workload.mode", str),
    "workload.zipf_s": ("workload.zipf_s", float),
    "workload.key_universe": ("workload.key_universe", int),
    "workload.retry_aborted": ("workload.retry_aborted", bool),
    "workload.max_retries": ("workload.max_retries", int),
    "workload.workers": ("workload.workers", int),
    "workload.seed": ("workload.seed", int),
    "cache_options.ttl_ms": ("cache_options.ttl", lambda v: float(v) / 1000.0),
    "cache_options.lockfree_threshold": ("cache_options.lockfree_threshold", int),
    "cache_options.syncmap_promote_after": (
        "cache_options.syncmap_promote_after",
        lambda v: None if v is None else int(v),
    ),
}
for _name in ("endorse_ms", "order_ms", "deliver_ms", "validate_ms_per_tx", "commit_ms_per_block"):
    _KEYS[f"timing.{_name}"] = (f"timing.{_name}", float)


def set_path(obj: Any, path: str, value: Any) -> None:
    *parents, last = path.split(".")
    for name in parents:
        obj = getattr(obj, name)
    setattr(obj, last, value)


def _flatten(raw: dict, prefix: str = "") -> dict[str, Any]:
    flat = {}
    for key, value in raw.items():
        path = f"{prefix}{key}"
        if isinstance(value, dict) and path not in _KEYS:
            flat.update(_flatten(value, path + "."))
        else:
            flat[path] = value
    return flat


def config_from_dict(raw: dict, base: RunConfig | None = None) -> RunConfig:
    config = copy.deepcopy(base) if base is not None else RunConfig()
    errors = []
    explicit_policy = "policy" in raw
    for path, value in _flatten(raw).items():
        if path not in _KEYS:
            errors.append(f"{path}: unknown configuration key")
            continue
        attr, convert = _KEYS[path]
        try:
            set_path(config, attr, convert(value))
        except (TypeError, ValueError) as exc:
            errors.append(f"{path}: {exc}")
    if errors:
        raise ConfigError(errors)
    if not explicit_policy and base is None:
        config.policy = default_policy(len(config.peers))
    config.validate()
    return config


def load_config(path: str | Path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: invalid JSON ({exc})"]) from exc
    if not isinstance(raw, dict):
        raise ConfigError([f"{path}: top level must be an object"])
    return config_from_dict(raw)
