"""Experiment configuration: nested dataclasses read from / written to JSON."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..losses import LossWeights
from ..model import ModelConfig
from .data import SyntheticSpec

METHODS = ("finetune", "vanilla_kd", "bert_pkd", "gkd", "gkd_cls")
GRADIENT_METHODS = ("gkd", "gkd_cls")
REQUIRED_WEIGHTS = {
    "finetune": (),
    "vanilla_kd": (),
    "bert_pkd": ("beta",),
    "gkd": ("beta",),
    "gkd_cls": ("beta", "gamma"),
}


class ConfigError(ValueError):
    pass


@dataclass
class OptimConfig:
    lr: float = 5e-4
    batch_size: int = 32
    epochs: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class ExperimentConfig:
    data_dir: str | None = None
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    teacher: ModelConfig = field(default_factory=lambda: ModelConfig(n_layers=4))
    student: ModelConfig = field(default_factory=lambda: ModelConfig(n_layers=2))
    method: str = "vanilla_kd"
    weights: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    teacher_optim: OptimConfig = field(default_factory=lambda: OptimConfig(lr=3e-4, epochs=10))
    # None picks the method default; gkd/gkd_cls only accept dropout via dropout_ablation
    student_dropout: bool | None = None
    freeze_embeddings: bool | None = None
    dropout_ablation: bool = False
    seed: int = 0
    out_dir: str = "runs/default"

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        for name in REQUIRED_WEIGHTS[self.method]:
            if getattr(self.weights, name) is None:
                raise ConfigError(f"method {self.method} requires weight {name}")
        if self.method in GRADIENT_METHODS:
            if self.student_dropout and not self.dropout_ablation:
                raise ConfigError(
                    f"{self.method} runs with student dropout off; set dropout_ablation to override"
                )
            if self.freeze_embeddings is False:
                raise ConfigError(f"{self.method} requires a frozen student embedding layer")
        elif self.dropout_ablation:
            raise ConfigError("dropout_ablation applies only to gkd and gkd_cls")
        if self.student.n_layers > self.teacher.n_layers:
            raise ConfigError("student deeper than teacher")
        for opt in (self.optim, self.teacher_optim):
            if opt.lr < 0 or opt.batch_size < 1 or opt.epochs < 0:
                raise ConfigError("invalid optimizer settings")

    @property
    def student_dropout_active(self) -> bool:
        if self.method in GRADIENT_METHODS:
            return self.dropout_ablation
        return True if self.student_dropout is None else self.student_dropout

    @property
    def freeze_student_embeddings(self) -> bool:
        if self.method in GRADIENT_METHODS:
            return True
        return bool(self.freeze_embeddings)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d)


_NESTED = {
    "synthetic": SyntheticSpec,
    "teacher": ModelConfig,
    "student": ModelConfig,
    "weights": LossWeights,
    "optim": OptimConfig,
    "teacher_optim": OptimConfig,
}


def _build(cls, d: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for k, v in d.items():
        sub = _NESTED.get(k) if cls is ExperimentConfig else None
        kwargs[k] = _build(sub, v) if sub is not None and isinstance(v, dict) else v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from None


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; values are parsed as JSON when possible."""
    d = json.loads(json.dumps(d))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-mapping")
        node[parts[-1]] = _parse_value(value)
    return d


def load_config(path=None, overrides: list[str] | None = None) -> ExperimentConfig:
    base = ExperimentConfig().to_dict()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        base = _merge(base, user)
    cfg = ExperimentConfig.from_dict(apply_overrides(base, overrides or []))
    cfg.validate()
    return cfg


def _merge(base: dict, user: dict) -> dict:
    out = dict(base)
    for k, v in user.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out
