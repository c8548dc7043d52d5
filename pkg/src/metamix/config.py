"""Experiment configuration: dataclasses plus a flat ``section.key = value`` text format.

Example::

    # comments and blank lines are ignored
    pool.kind = nme
    pool.n_T = 40
    augment.strategy = MetaMix
    run.seed = 7

Every key must name an existing field; values are parsed according to the
field's type. ``serialize`` emits every field in a fixed order, so
``parse(serialize(cfg)) == cfg``.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentSpec, Strategy
from .meta import VARIANTS, MetaHyper


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending key when known."""

    def __init__(self, message: str, path: str | None = None):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass
class PoolConfig:
    kind: str = "nme"  # nme | sinusoid | csv
    n_sets: int = 5
    classes_per_set: int = 13
    dim: int = 16
    n_T: int = 40
    samples_per_class: int = 20
    center_scale: float = 1.0
    within_sd: float = 0.5
    mutually_exclusive: bool = False
    input_dim: int = 5
    noise_sd: float = 0.1
    samples_per_task: int = 40
    csv_path: str = ""
    csv_eval_path: str = ""
    n_eval_pool: int = 200
    # -1 derives the pool seed from run.seed
    seed: int = -1


@dataclass
class ModelConfig:
    hidden: tuple[int, ...] = (40, 40)
    activation: str = "leaky_relu"
    slope: float = 0.01


@dataclass
class MetaConfig:
    inner_lr: float = 0.01
    outer_lr: float = 0.001
    inner_steps: int = 1
    task_batch: int = 4
    second_order: bool = True
    variant: str = "MAML"
    optimizer: str = "sgd"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    divergence_threshold: float = 1e6
    metasgd_lr: float = 0.01
    k_support: int = 5
    k_query: int = 5


@dataclass
class AugmentConfig:
    strategy: str = "None"
    alpha: float = 0.5
    beta: float = 0.5
    layers: tuple[int, ...] = ()  # empty: every layer
    delta: float = 0.8
    noise_scale: float = 1.0


@dataclass
class RunConfig:
    seed: int = 0
    budget: int = 2000
    eval_every: int = 500
    n_eval_tasks: int = 100
    eval_split: str = "test"
    track_gamma: bool = False
    gamma_tasks: int = 20
    out: str = "runs/default"


@dataclass
class ExperimentConfig:
    pool: PoolConfig = field(default_factory=PoolConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def validate(self) -> "ExperimentConfig":
        p = self.pool
        if p.kind not in ("nme", "sinusoid", "csv"):
            raise ConfigError(f"unknown pool kind {p.kind!r}", "pool.kind")
        if p.kind == "csv" and not p.csv_path:
            raise ConfigError("csv pools need a path", "pool.csv_path")
        if p.n_T < 1:
            raise ConfigError("must be >= 1", "pool.n_T")
        if any(h < 1 for h in self.model.hidden):
            raise ConfigError("hidden widths must be positive", "model.hidden")
        if self.model.activation not in ("leaky_relu", "relu", "identity"):
            raise ConfigError(f"unknown activation {self.model.activation!r}", "model.activation")
        try:
            self.hyper()
        except ValueError as exc:
            raise ConfigError(str(exc), "meta") from None
        if self.meta.variant not in VARIANTS:
            raise ConfigError(f"must be one of {VARIANTS}", "meta.variant")
        if self.meta.k_support < 1 or self.meta.k_query < 1:
            raise ConfigError("shot counts must be >= 1", "meta.k_support")
        try:
            spec = self.augment_spec()
        except ValueError as exc:
            raise ConfigError(str(exc), "augment") from None
        if spec.strategy in (Strategy.CHANNEL_SHUFFLE, Strategy.MMCF) and p.kind == "sinusoid":
            raise ConfigError(f"{spec.strategy.value} needs a classification pool", "augment.strategy")
        r = self.run
        if r.budget < 0:
            raise ConfigError("must be >= 0", "run.budget")
        if r.eval_every < 1:
            raise ConfigError("must be >= 1", "run.eval_every")
        if r.n_eval_tasks < 2:
            raise ConfigError("need at least two evaluation tasks", "run.n_eval_tasks")
        if r.eval_split not in ("val", "test"):
            raise ConfigError("must be val or test", "run.eval_split")
        return self

    def hyper(self) -> MetaHyper:
        m = self.meta
        return MetaHyper(
            inner_lr=m.inner_lr, outer_lr=m.outer_lr, inner_steps=m.inner_steps, task_batch=m.task_batch,
            second_order=m.second_order, variant=m.variant, optimizer=m.optimizer,
            adam_beta1=m.adam_beta1, adam_beta2=m.adam_beta2, adam_eps=m.adam_eps,
            divergence_threshold=m.divergence_threshold,
        )

    def augment_spec(self) -> AugmentSpec:
        a = self.augment
        return AugmentSpec(
            strategy=Strategy.parse(a.strategy), alpha=a.alpha, beta=a.beta,
            layers=a.layers or None, delta=a.delta, noise_scale=a.noise_scale,
        )


SECTIONS = ("pool", "model", "meta", "augment", "run")


def _parse_value(raw: str, typ, path: str):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
        if typing.get_origin(typ) is tuple:
            return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} as {getattr(typ, '__name__', typ)}", path) from None
    raise ConfigError(f"unsupported field type {typ}", path)  # pragma: no cover


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _field_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def apply(cfg: ExperimentConfig, key: str, raw: str) -> None:
    """Set one dotted key from its text form."""
    if "." not in key:
        raise ConfigError("keys must be 'section.name'", key)
    section, name = key.split(".", 1)
    if section not in SECTIONS:
        raise ConfigError(f"unknown section {section!r}", key)
    sub = getattr(cfg, section)
    types = _field_types(type(sub))
    if name not in types:
        raise ConfigError("unknown key", key)
    setattr(sub, name, _parse_value(raw, types[name], key))


def parse(text: str, overrides: list[str] | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = line.split("=", 1)
        apply(cfg, key.strip(), raw)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        apply(cfg, key.strip(), raw)
    return cfg.validate()


def load(path, overrides: list[str] | None = None) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse(p.read_text(encoding="utf-8"), overrides)


def serialize(cfg: ExperimentConfig) -> str:
    lines = []
    for section in SECTIONS:
        sub = getattr(cfg, section)
        for f in dataclasses.fields(sub):
            lines.append(f"{section}.{f.name} = {_format_value(getattr(sub, f.name))}")
    return "\n".join(lines) + "\n"
