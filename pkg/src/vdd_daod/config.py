"""Flat run configuration shared by every command."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

from .synth import CorpusConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    # corpus
    image_size: int = 128
    max_objects: int = 4
    n_source_train: int = 512
    n_target_train: int = 128
    n_target_eval: int = 128
    targets: list = field(default_factory=lambda: ["night"])
    severity: float = 0.8
    workers: int = 1
    # model
    method: str = "vdd"
    input_norm: bool = True
    grl_enabled: bool = True
    grl_lambda: float = 1.0
    base_align: bool = True
    base_align_lambda: float = 1.0
    align_on: str = "f_di"  # map the base aligner sees: f_di or f_b
    # training
    target: Optional[str] = None  # defaults to the corpus' first target kind
    iterations_phase1: int = 2000
    iterations_phase2: int = 1000
    lr_phase1: float = 1e-3
    lr_phase2: Optional[float] = None  # None -> lr_phase1 / 10
    momentum: float = 0.9
    weight_decay: float = 5e-4
    one_step: bool = False
    use_ortho: bool = True
    eq6_literal: bool = False
    schedule: str = "alternate"
    block_size: int = 100
    checkpoint_every: int = 500
    # evaluation
    score_thresh: float = 0.05
    eval_nms: float = 0.5

    @property
    def effective_lr_phase2(self) -> float:
        return self.lr_phase1 / 10 if self.lr_phase2 is None else self.lr_phase2

    @property
    def total_iterations(self) -> int:
        return self.iterations_phase1 + self.iterations_phase2

    def lr_at(self, iteration: int) -> float:
        return self.lr_phase1 if iteration < self.iterations_phase1 else self.effective_lr_phase2

    def validate(self) -> "RunConfig":
        if self.method not in ("vdd", "source_only"):
            raise ConfigError(f"method must be 'vdd' or 'source_only', got {self.method!r}")
        if self.iterations_phase1 <= 0 or self.iterations_phase2 <= 0:
            raise ConfigError("iteration counts must be positive")
        if self.lr_phase1 < 0 or self.effective_lr_phase2 < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.effective_lr_phase2 > self.lr_phase1:
            raise ConfigError("lr_phase2 must not exceed lr_phase1")
        if self.schedule not in ("alternate", "blockwise"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.align_on not in ("f_b", "f_di"):
            raise ConfigError(f"align_on must be 'f_b' or 'f_di', got {self.align_on!r}")
        if self.grl_lambda < 0 or self.base_align_lambda < 0:
            raise ConfigError("GRL coefficients must be non-negative")
        if self.checkpoint_every <= 0 or self.block_size <= 0:
            raise ConfigError("checkpoint_every and block_size must be positive")
        try:
            self.corpus_config().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def corpus_config(self) -> CorpusConfig:
        return CorpusConfig(
            master_seed=self.seed,
            image_size=self.image_size,
            max_objects=self.max_objects,
            n_source_train=self.n_source_train,
            n_target_train=self.n_target_train,
            n_target_eval=self.n_target_eval,
            targets=tuple(self.targets),
            severity=self.severity,
            workers=self.workers,
        )

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    # ---------------------------------------------------------------- loading

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path=None, overrides: Optional[list[str]] = None) -> "RunConfig":
        data: dict[str, Any] = {}
        if path is not None:
            data = json.loads(Path(path).read_text())
            if not isinstance(data, dict):
                raise ConfigError("config file must hold a JSON object")
        cfg = cls.from_dict(data)
        for item in overrides or []:
            cfg = cfg.with_override(item)
        return cfg

    def with_override(self, item: str) -> "RunConfig":
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, raw = item.split("=", 1)
        key = key.strip()
        types = {f.name: f for f in fields(self)}
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        data = self.to_dict()
        data[key] = _parse_value(key, raw, types[key].type)
        return RunConfig(**data)


def _parse_value(key: str, raw: str, annotation: str) -> Any:
    raw = raw.strip()
    if raw.lower() in ("none", "null"):
        if "Optional" not in str(annotation):
            raise ConfigError(f"{key} cannot be null")
        return None
    try:
        if "bool" in str(annotation):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if "list" in str(annotation):
            return [x for x in (p.strip() for p in raw.split(",")) if x]
        if "float" in str(annotation):
            return float(raw)
        if "int" in str(annotation):
            return int(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw
