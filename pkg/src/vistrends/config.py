"""Run configuration: one YAML file plus flag overrides."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, is_dataclass
from datetime import datetime
from pathlib import Path
from typing import Any, Mapping

import yaml

from .corpus import GROUPING_RADIUS_M, MIN_IMAGES, parse_time
from .index import LOOSE, TIGHT
from .trends import DEFAULT_N, RANK_MODES


class ConfigError(ValueError):
    pass


@dataclass
class RetryConfig:
    attempts: int = 3
    base_delay_s: float = 1.0
    factor: float = 2.0


@dataclass
class BackendConfig:
    kind: str = "synthetic"  # "remote" | "synthetic"
    endpoint: str | None = None
    model: str | None = None
    embed_model: str | None = None
    api_key_env: str | None = None  # name of the variable holding the token, never the token
    timeout_s: float = 120.0
    max_in_flight: int = 64
    retry: RetryConfig = field(default_factory=RetryConfig)
    city: dict = field(default_factory=dict)  # build_city keyword arguments for the synthetic backend


@dataclass
class ConditionConfig:
    time_window: list[str] | None = None  # [start, end], RFC 3339
    subject: str | None = None
    pool_size: int | None = None

    def window(self) -> tuple[datetime, datetime] | None:
        if self.time_window is None:
            return None
        start, end = (parse_time(t) for t in self.time_window)
        return start, end


@dataclass
class RankingConfig:
    mode: str = "most_detailed"
    max_proposals: int | None = None
    pre_window: list[str] | None = None
    post_window: list[str] | None = None
    n_buckets: int = 2


@dataclass
class EvalConfig:
    worlds: int = 20
    N_values: list[int] = field(default_factory=lambda: [50, 100, 200])
    k_multiples: list[int] = field(default_factory=lambda: [2, 3, 4, 5])
    n_subsets: int = 1000
    subset_fraction: float = 0.75


@dataclass
class RunConfig:
    manifest: str | None = None
    output_dir: str = "run"
    seed: int = 0
    backend: BackendConfig = field(default_factory=BackendConfig)
    radius_m: float = GROUPING_RADIUS_M
    suppression_radius_m: float | None = None  # default: twice radius_m
    nms_sample_size: int | None = None
    min_images: int = MIN_IMAGES
    tight: float = TIGHT
    loose: float = LOOSE
    N: int = DEFAULT_N
    k: int | None = None  # default: k_multiple * N
    k_multiple: int = 3
    critic_enabled: bool = True
    early_exit: bool = True
    fail_on_poison: bool = False
    ranking: RankingConfig = field(default_factory=RankingConfig)
    condition: ConditionConfig = field(default_factory=ConditionConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def effective_k(self) -> int:
        return self.k if self.k is not None else self.k_multiple * self.N

    @property
    def effective_suppression_m(self) -> float:
        return self.suppression_radius_m if self.suppression_radius_m is not None else 2 * self.radius_m

    def validate(self) -> "RunConfig":
        if self.N < 1:
            raise ConfigError(f"N must be >= 1, got {self.N}")
        if self.k_multiple < 1:
            raise ConfigError(f"k_multiple must be >= 1, got {self.k_multiple}")
        if self.effective_k < self.N:
            raise ConfigError(f"k must be >= N, got k={self.effective_k}, N={self.N}")
        if not 0 < self.tight <= self.loose:
            raise ConfigError(f"need 0 < tight <= loose, got tight={self.tight}, loose={self.loose}")
        if self.radius_m <= 0 or self.effective_suppression_m <= 0:
            raise ConfigError("radii must be positive")
        if self.min_images < 2:
            raise ConfigError("min_images must be >= 2")
        if self.backend.kind not in ("remote", "synthetic"):
            raise ConfigError(f"backend.kind must be remote or synthetic, got {self.backend.kind!r}")
        if self.backend.kind == "remote" and not (self.backend.endpoint and self.backend.model):
            raise ConfigError("remote backend needs endpoint and model")
        if self.backend.max_in_flight < 1 or self.backend.retry.attempts < 1:
            raise ConfigError("max_in_flight and retry.attempts must be >= 1")
        if self.ranking.mode not in RANK_MODES:
            raise ConfigError(f"ranking.mode must be one of {RANK_MODES}, got {self.ranking.mode!r}")
        for name, win in (
            ("condition.time_window", self.condition.time_window),
            ("ranking.pre_window", self.ranking.pre_window),
            ("ranking.post_window", self.ranking.post_window),
        ):
            if win is None:
                continue
            try:
                ordered = len(win) == 2 and parse_time(win[0]) < parse_time(win[1])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{name}: {exc}") from exc
            if not ordered:
                raise ConfigError(f"{name} must be [start, end] with start < end")
        if self.condition.pool_size is not None and self.condition.pool_size < 1:
            raise ConfigError("condition.pool_size must be >= 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def _build(cls, data: Mapping[str, Any], where: str = ""):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key {where}{key}")
        default = known[key].default_factory() if callable(known[key].default_factory) else known[key].default
        if is_dataclass(default) and value is not None:
            kwargs[key] = _build(type(default), value, f"{where}{key}.")
        else:
            kwargs[key] = value
    return cls(**kwargs)


def _set_dotted(tree: dict, dotted: str, value) -> None:
    *parents, leaf = dotted.split(".")
    node = tree
    for p in parents:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override {dotted}: {p} is not a section")
    node[leaf] = value


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Read YAML (if given), apply dotted-key overrides (flags win), validate.

    Relative paths in the file are resolved against the file's directory;
    paths given as overrides are left as they are.
    """
    tree: dict = {}
    if path is not None:
        path = Path(path)
        try:
            tree = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(tree, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        for attr in ("manifest", "output_dir"):
            val = tree.get(attr)
            if val is not None and not Path(val).is_absolute():
                tree[attr] = str(path.parent / val)
    for key, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(tree, key, value)
    return _build(RunConfig, tree).validate()


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True), encoding="utf-8")
