"""Flat experiment configuration shared by every CLI command."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional

from .accountant import PrivacyBudget
from .data import MODES, DatasetSpec

TASKS = ("calibrate", "noise-curve", "sanity-noise", "sanity-pattern", "train", "train-federated")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    task: str = "calibrate"
    seed: int = 0
    output: Optional[str] = None

    # model
    hidden: List[int] = field(default_factory=lambda: [256])

    # dataset
    dataset_mode: str = "noise"
    data_path: Optional[str] = None
    n_examples: int = 1000
    test_examples: int = 2000
    users: int = 100
    records_per_user: int = 10
    image_rows: int = 16
    image_cols: int = 16
    blob_dim: int = 64
    blob_separation: float = 3.0
    classes: int = 10
    n_patterns: Optional[int] = None
    patch_rows: int = 8
    patch_cols: int = 8
    pattern_value: float = 1.0
    pattern_label: int = 1
    probe_size: int = 500

    # privacy budget; delta=None means N ** -1.1
    epsilon: float = 20.0
    delta: Optional[float] = None
    strict_accounting: bool = False

    # noise; sigma=None means calibrate to the budget
    sigma: Optional[float] = None
    sigma_l2: float = 2.5

    # clipping
    clip_mode: str = "fixed"
    clip_bound: float = 2.0
    alpha: float = 1.0
    beta: float = 2.0
    clip_floor: float = 1e-6

    # optimisation
    batch_size: int = 128
    base_lr: float = 0.01
    lr_scaling: bool = False
    momentum: float = 0.0
    epochs: int = 60

    # noise curve; dataset_size=None means n_examples
    dataset_size: Optional[int] = None
    batch_sizes: List[int] = field(default_factory=lambda: [64, 128, 256, 512, 1024, 2048, 4096])

    # federated
    user_fraction: float = 1.0
    local_steps: int = 10
    local_lr: float = 0.1
    update_clip: float = 2.0
    rounds: int = 200

    # sanity thresholds
    memorization_threshold: float = 0.8
    chance_margin: float = 0.10
    recall_high: float = 0.8
    recall_low: float = 0.3
    include_distributed: bool = True
    # pattern count of the distributed arm; None means 10% of records
    distributed_patterns: Optional[int] = None

    record_wall_ms: bool = False

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.dataset_mode not in MODES:
            raise ConfigError(f"dataset_mode must be one of {MODES}")
        if self.clip_mode not in ("fixed", "adaptive"):
            raise ConfigError("clip_mode must be 'fixed' or 'adaptive'")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if self.delta is not None and not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 1 or self.rounds < 1:
            raise ConfigError("batch_size, epochs and rounds must be positive")
        if (self.task in ("calibrate", "sanity-noise", "train") and self.data_path is None
                and self.batch_size > self.n_records):
            raise ConfigError(f"batch_size {self.batch_size} exceeds dataset size {self.n_records}")
        if self.sigma is not None and self.sigma < 0:
            raise ConfigError("sigma must be nonnegative")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if not 0 < self.user_fraction <= 1:
            raise ConfigError("user_fraction must lie in (0, 1]")
        try:
            if self.dataset_mode.startswith("pattern"):
                self.dataset_spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def n_records(self) -> int:
        if self.task == "calibrate" and self.dataset_size is not None:
            return self.dataset_size
        if self.dataset_mode.startswith("pattern"):
            return self.users * self.records_per_user
        return self.n_examples

    @property
    def effective_lr(self) -> float:
        return self.base_lr * self.batch_size / 128 if self.lr_scaling else self.base_lr

    def resolved_delta(self, n: int) -> float:
        return self.delta if self.delta is not None else 1.0 / n**1.1

    def budget(self, n: int) -> PrivacyBudget:
        return PrivacyBudget(self.epsilon, self.resolved_delta(n))

    def dataset_spec(self, mode: Optional[str] = None, n_patterns: Optional[int] = None) -> DatasetSpec:
        return DatasetSpec(
            mode=mode or self.dataset_mode,
            n_examples=self.n_examples,
            users=self.users,
            records_per_user=self.records_per_user,
            input_shape=(self.image_rows, self.image_cols),
            classes=self.classes,
            n_patterns=self.n_patterns if n_patterns is None else n_patterns,
            pattern_patch=(self.patch_rows, self.patch_cols),
            pattern_value=self.pattern_value,
            pattern_label=self.pattern_label,
            seed=self.seed,
        )
