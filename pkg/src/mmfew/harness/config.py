"""Experiment configuration: defaults, JSON file loading, CLI overrides,
validation, and a canonical digest tying checkpoints to their config.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..episodes import SyntheticConfig

ALGORITHMS = ("maml", "fumi", "protonet", "am3", "am3-zero")
GRADIENT_ALGOS = ("maml", "fumi")
VALID_SHOTS = (0, 1, 3, 5, 10)

# per-shot defaults for the metric-based family (0-shot uses the 1-shot values)
_METRIC_TASKS_PER_BATCH = {0: 5, 1: 5, 3: 3, 5: 2, 10: 1}
_METRIC_TRAIN_QUERY = {0: 10, 1: 10, 3: 8, 5: 8, 10: 8}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    algorithm: str = "fumi"
    ways: int = 5
    shots: int = 1
    seed: int = 0
    data: str = "synthetic"
    out_dir: str = "runs/latest"
    episodes: int = 30_000
    grad_mode: str = "second"

    # networks
    body_hidden: tuple[int, ...] = (256, 64)
    hyper_hidden: int = 256
    proto_dim: int = 512
    am3_hidden: int = 512
    dropout_p: float | None = None  # 0.25 gradient-based, 0.2 metric-based

    # inner loop (gradient-based only)
    inner_alpha: float = 0.01
    inner_steps: int = 5
    test_steps_by_shot: dict[int, int] = field(
        default_factory=lambda: {1: 50, 3: 50, 5: 100, 10: 100}
    )

    # outer loop
    outer_lr: float | None = None  # 3e-5 gradient-based, 1e-3 metric-based
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    tasks_per_batch: int | None = None
    train_query_size: int | None = None

    # validation / model selection
    val_every: int = 500
    val_tasks: int = 200

    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)

    def resolve(self) -> "ExperimentConfig":
        """Fill algorithm-dependent defaults, then validate."""
        cfg = dataclasses.replace(self)
        is_gradient = cfg.algorithm in GRADIENT_ALGOS
        if cfg.dropout_p is None:
            cfg.dropout_p = 0.25 if is_gradient else 0.2
        if cfg.outer_lr is None:
            cfg.outer_lr = 3e-5 if is_gradient else 1e-3
        if cfg.tasks_per_batch is None:
            cfg.tasks_per_batch = 4 if is_gradient else _METRIC_TASKS_PER_BATCH.get(cfg.shots, 5)
        if cfg.train_query_size is None:
            cfg.train_query_size = 32 if is_gradient else _METRIC_TRAIN_QUERY.get(cfg.shots, 10)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; pick from {ALGORITHMS}")
        if self.shots not in VALID_SHOTS:
            raise ConfigError(f"shots must be one of {VALID_SHOTS}, got {self.shots}")
        if (self.algorithm == "am3-zero") != (self.shots == 0):
            raise ConfigError("shots=0 is required for am3-zero and invalid elsewhere")
        if self.ways < 2:
            raise ConfigError("ways must be >= 2")
        if self.episodes < 1:
            raise ConfigError("episode budget must be >= 1")
        if self.grad_mode not in ("first", "second"):
            raise ConfigError("grad-mode must be 'first' or 'second'")
        if self.inner_alpha <= 0:
            raise ConfigError("inner step size must be positive")
        if self.inner_steps < 1:
            raise ConfigError("inner steps must be >= 1")
        if self.outer_lr is not None and self.outer_lr <= 0:
            raise ConfigError("outer learning rate must be positive")
        if self.dropout_p is not None and not (0 <= self.dropout_p < 1):
            raise ConfigError("dropout probability must lie in [0, 1)")
        if self.tasks_per_batch is not None and self.tasks_per_batch < 1:
            raise ConfigError("tasks_per_batch must be >= 1")
        if self.val_every < 1 or self.val_tasks < 0:
            raise ConfigError("validation cadence must be >= 1 and val_tasks >= 0")

    # -- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["body_hidden"] = list(self.body_hidden)
        d["test_steps_by_shot"] = {str(k): v for k, v in self.test_steps_by_shot.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "body_hidden" in d:
            d["body_hidden"] = tuple(int(x) for x in d["body_hidden"])
        if "test_steps_by_shot" in d:
            d["test_steps_by_shot"] = {int(k): int(v) for k, v in d["test_steps_by_shot"].items()}
        if "synthetic" in d and not isinstance(d["synthetic"], SyntheticConfig):
            d["synthetic"] = SyntheticConfig(**d["synthetic"])
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}") from None
        return cls.from_dict(raw)

    def digest(self) -> str:
        """Hash of everything that determines a training run (the output
        directory does not)."""
        d = self.to_dict()
        d.pop("out_dir", None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()
