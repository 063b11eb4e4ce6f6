"""Run configuration read from flat ``key = value`` text files.

Keys carry dotted section prefixes (``init.rank = 8``); ``#`` starts a
comment. Unknown keys are an error so typos do not pass silently.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from ..micrograd import ACTIVATIONS, LOSS_KINDS
from ..subspace import SelectionStrategy


class ConfigError(ValueError):
    pass


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _parse_ints(s: str) -> tuple[int, ...]:
    return tuple(int(p) for p in s.split(",") if p.strip())


def _parse_floats(s: str) -> tuple[float, ...]:
    return tuple(float(p) for p in s.split(",") if p.strip())


def _parse_strs(s: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in s.split(",") if p.strip())


@dataclass
class ModelSpec:
    dims: tuple[int, ...] = (8, 16, 16, 3)
    activation: str = "tanh"
    loss_kind: str = "softmax-cross-entropy"
    tapped: tuple[int, ...] = ()  # empty = every linear layer
    weight_scale: float = 1.0
    pretrain_steps: int = 300
    pretrain_lr: float = 0.5
    source_task_seed: int = 0

    @property
    def n_linear(self) -> int:
        return len(self.dims) - 1

    def tapped_ids(self) -> tuple[int, ...]:
        return self.tapped if self.tapped else tuple(range(self.n_linear))


@dataclass
class DataSpec:
    kind: str = "blobs"
    n_features: int = 8
    n_classes: int = 3
    n_train: int = 256
    n_eval: int = 256
    noise: float = 1.0
    separation: float = 1.5
    task_seed: int = 1


@dataclass
class FisherSpec:
    minibatch_count: int = 10
    minibatch_size: int = 32
    alg1_literal: bool = False


@dataclass
class InitSpec:
    rank: int = 2
    alpha: float = 2.0
    criterion: str = "min-energy"
    scaling: str = "fisher"
    basis: str = "surrogate"
    rng_seed: int = 0
    normalize_sigma: bool = False
    raw_alpha: bool = False

    def strategy(self) -> SelectionStrategy:
        return SelectionStrategy(self.criterion, self.scaling, self.basis, self.rng_seed)


@dataclass
class TrainSpec:
    steps: int = 200
    lr: float = 0.5
    trainable: str = "adapters-only"
    batch_size: int = 0  # 0 = full batch
    eval_every: int = 10


@dataclass
class ProbeSpec:
    layer: int = 0
    source: str = "candidates"  # candidates | selected | quadratic
    gammas: tuple[float, ...] = (1e-1, 1e-2, 1e-3)
    max_directions: int = 16


@dataclass
class PreliminarySpec:
    layer: int = 1
    groups: int = 8
    sigma_modes: tuple[str, ...] = ("min", "max")
    ema: float = 0.3


@dataclass
class AblateSpec:
    seed_count: int = 10


@dataclass
class OutputSpec:
    dir: str = "out"
    stats_dir: str = "stats"
    init_dir: str = "init"
    train_dir: str = "train"


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelSpec = field(default_factory=ModelSpec)
    data: DataSpec = field(default_factory=DataSpec)
    fisher: FisherSpec = field(default_factory=FisherSpec)
    init: InitSpec = field(default_factory=InitSpec)
    train: TrainSpec = field(default_factory=TrainSpec)
    probe: ProbeSpec = field(default_factory=ProbeSpec)
    preliminary: PreliminarySpec = field(default_factory=PreliminarySpec)
    ablate: AblateSpec = field(default_factory=AblateSpec)
    output: OutputSpec = field(default_factory=OutputSpec)

    def validate(self) -> "RunConfig":
        m, d = self.model, self.data
        if len(m.dims) < 2 or any(x < 1 for x in m.dims):
            raise ConfigError(f"model.dims must list at least two positive sizes, got {m.dims}")
        if m.activation not in ACTIVATIONS:
            raise ConfigError(f"model.activation must be one of {ACTIVATIONS}")
        if m.loss_kind not in LOSS_KINDS[:2]:
            raise ConfigError(f"model.loss_kind must be one of {LOSS_KINDS[:2]}")
        if any(t < 0 or t >= m.n_linear for t in m.tapped):
            raise ConfigError(f"model.tapped ids must lie in [0, {m.n_linear})")
        if d.kind not in ("blobs", "regression"):
            raise ConfigError("data.kind must be blobs or regression")
        if d.n_features != m.dims[0]:
            raise ConfigError(f"data.n_features={d.n_features} but model input dim is {m.dims[0]}")
        if d.kind == "blobs":
            if m.loss_kind != "softmax-cross-entropy":
                raise ConfigError("blobs data needs softmax-cross-entropy loss")
            if d.n_classes != m.dims[-1]:
                raise ConfigError(f"data.n_classes={d.n_classes} but model output dim is {m.dims[-1]}")
        elif m.loss_kind != "mean-squared-error":
            raise ConfigError("regression data needs mean-squared-error loss")
        if d.n_train < 1 or d.n_eval < 1:
            raise ConfigError("data.n_train and data.n_eval must be positive")
        if self.fisher.minibatch_size < 1 or self.fisher.minibatch_count < 1:
            raise ConfigError("fisher.minibatch_size and fisher.minibatch_count must be >= 1")
        if self.init.rank < 1:
            raise ConfigError("init.rank must be >= 1")
        try:
            self.init.strategy()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.train.trainable not in ("adapters-only", "full"):
            raise ConfigError("train.trainable must be adapters-only or full")
        if self.train.steps < 0 or self.train.lr < 0:
            raise ConfigError("train.steps and train.lr must be non-negative")
        if self.probe.source not in ("candidates", "selected", "quadratic"):
            raise ConfigError("probe.source must be candidates, selected or quadratic")
        if any(s not in ("min", "max") for s in self.preliminary.sigma_modes):
            raise ConfigError("preliminary.sigma_modes entries must be min or max")
        o = self.output
        subdirs = (o.stats_dir, o.init_dir, o.train_dir)
        if len(set(subdirs)) != len(subdirs):
            raise ConfigError("output directories must be distinct")
        return self

    def echo(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        lines = [f"seed = {self.seed}"]
        for f in dataclasses.fields(self):
            if f.name == "seed":
                continue
            section = getattr(self, f.name)
            for sf in dataclasses.fields(section):
                lines.append(f"{f.name}.{sf.name} = {_format_value(getattr(section, sf.name))}")
        return "\n".join(lines) + "\n"


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _coerce(raw: str, current, annotation: str):
    if isinstance(current, bool):
        return _parse_bool(raw)
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        if "int" in annotation:
            return _parse_ints(raw)
        if "float" in annotation:
            return _parse_floats(raw)
        return _parse_strs(raw)
    return raw.strip()


def apply_overrides(cfg: RunConfig, items: dict[str, str]) -> RunConfig:
    for key, raw in items.items():
        if key == "seed":
            cfg.seed = int(raw)
            continue
        section_name, _, name = key.partition(".")
        section = getattr(cfg, section_name, None)
        if not name or section is None or not dataclasses.is_dataclass(section):
            raise ConfigError(f"unknown config key {key!r}")
        fields = {f.name: f for f in dataclasses.fields(section)}
        if name not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            value = _coerce(raw, getattr(section, name), str(fields[name].type))
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc
        setattr(section, name, value)
    return cfg


def parse_config_text(text: str) -> dict[str, str]:
    items: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        items[key] = value
    return items


def loads(text: str) -> RunConfig:
    return apply_overrides(RunConfig(), parse_config_text(text)).validate()


def load(path: str | Path | None, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        cfg = apply_overrides(cfg, parse_config_text(Path(path).read_text(encoding="utf-8")))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg.validate()
