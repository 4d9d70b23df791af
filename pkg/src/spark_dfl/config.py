"""Run configuration: nested sections, TOML loading, dotted overrides."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields

from .errors import ConfigurationError
from .projection import Allocation, Codec, ProjectionMode


@dataclass
class ExperimentSection:
    name: str = "spark"
    seeds: list = field(default_factory=lambda: [0])


@dataclass
class ModelSection:
    hidden_dim: int = 100
    activation: str = "relu"


@dataclass
class DataSection:
    source: str = "synthetic"  # synthetic | idx
    path: str = ""
    train_limit: int = 0  # 0 keeps every training sample
    holdout_limit: int = 0
    alpha: float = 0.1
    num_classes: int = 10
    dim: int = 32
    n_per_class: int = 200
    holdout_per_class: int = 100
    spread: float = 0.25
    scale: float = 1.0


@dataclass
class TopologySection:
    clients: int = 16
    degree: int = 3
    static: bool = False


@dataclass
class TrainSection:
    rounds: int = 40
    batch_size: int = 64
    eta: float = 1e-4
    t_evolve: int = 100
    # "sum": predictions move by eta K r; "mean": by (eta / N_agg) K r, which
    # matches the scale of the weight update
    loss_reduction: str = "sum"
    val_fraction: float = 0.1
    shared_init: bool = False
    memory_cap_mib: int = 2048
    workers: int = 1


@dataclass
class ProjectionSection:
    mode: str = "gaussian"
    k: int = 1000
    allocation: str = "proportional"
    codec: str = "f32"
    sample_fraction: float = 1.0
    seed: int = -1  # -1: use the run seed


@dataclass
class DistillSection:
    alpha_init: float = 1.0
    alpha_final: float = 0.3
    tau_init: float = 1.0
    tau_final: float = 3.0
    warmup_rounds: int = -1  # -1: ceil(0.2 * rounds)
    warm_forever: bool = False


@dataclass
class MomentumSection:
    mu: float = 0.9


@dataclass
class AblationSection:
    projection: bool = True
    distillation: bool = True
    momentum: bool = True


@dataclass
class DiagnosticsSection:
    enabled: bool = False
    probe_size: int = 256


@dataclass
class OutputSection:
    dir: str = "runs"
    overwrite: bool = False
    checkpoint_every: int = 0


@dataclass
class RunConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    topology: TopologySection = field(default_factory=TopologySection)
    train: TrainSection = field(default_factory=TrainSection)
    projection: ProjectionSection = field(default_factory=ProjectionSection)
    distill: DistillSection = field(default_factory=DistillSection)
    momentum: MomentumSection = field(default_factory=MomentumSection)
    ablation: AblationSection = field(default_factory=AblationSection)
    diagnostics: DiagnosticsSection = field(default_factory=DiagnosticsSection)
    output: OutputSection = field(default_factory=OutputSection)

    # effective settings after ablation flags

    @property
    def projection_mode(self) -> ProjectionMode:
        if not self.ablation.projection:
            return ProjectionMode.IDENTITY
        return ProjectionMode(self.projection.mode)

    @property
    def effective_mu(self) -> float:
        return self.momentum.mu if self.ablation.momentum else 0.0

    @property
    def distill_off(self) -> bool:
        return self.distill.warm_forever or not self.ablation.distillation

    def validate(self) -> "RunConfig":
        t, p, d = self.train, self.projection, self.distill
        checks = [
            (self.topology.clients >= 1, "topology.clients must be >= 1"),
            (0 <= self.topology.degree < self.topology.clients, "topology.degree must lie in [0, clients)"),
            ((self.topology.clients * self.topology.degree) % 2 == 0, "clients * degree must be even"),
            (t.rounds >= 0, "train.rounds must be >= 0"),
            (t.batch_size >= 1, "train.batch_size must be >= 1"),
            (t.eta > 0, "train.eta must be positive"),
            (t.t_evolve >= 1, "train.t_evolve must be >= 1"),
            (0 <= t.val_fraction < 1, "train.val_fraction must lie in [0, 1)"),
            (t.workers >= 1, "train.workers must be >= 1"),
            (t.loss_reduction in ("sum", "mean"), "train.loss_reduction must be 'sum' or 'mean'"),
            (p.k >= 1, "projection.k must be >= 1"),
            (0 < p.sample_fraction <= 1, "projection.sample_fraction must lie in (0, 1]"),
            (0 <= self.momentum.mu < 1, "momentum.mu must lie in [0, 1)"),
            (0 <= d.alpha_final <= d.alpha_init <= 1, "need 0 <= distill.alpha_final <= alpha_init <= 1"),
            (1 <= d.tau_init <= d.tau_final, "need 1 <= distill.tau_init <= tau_final"),
            (self.data.source in ("synthetic", "idx"), "data.source must be 'synthetic' or 'idx'"),
            (self.data.alpha > 0, "data.alpha must be positive"),
            (self.model.hidden_dim >= 1, "model.hidden_dim must be >= 1"),
            (len(self.experiment.seeds) >= 1, "experiment.seeds must not be empty"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigurationError(msg)
        for enum, value, key in ((ProjectionMode, p.mode, "projection.mode"),
                                 (Allocation, p.allocation, "projection.allocation"),
                                 (Codec, p.codec, "projection.codec")):
            try:
                enum(value)
            except ValueError:
                raise ConfigurationError(f"{key}: invalid value {value!r}") from None
        if self.model.activation != "relu":
            raise ConfigurationError("model.activation: only 'relu' is supported")
        if t.rounds and not self.distill_off and d.warmup_rounds >= 0 and d.warmup_rounds >= t.rounds:
            raise ConfigurationError("distill.warmup_rounds must be smaller than train.rounds")
        return self

    def warmup_rounds(self) -> int:
        if self.distill.warmup_rounds >= 0:
            return self.distill.warmup_rounds
        return min(math.ceil(0.2 * self.train.rounds), max(self.train.rounds - 1, 0))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        cfg = cls()
        for section, values in raw.items():
            if section not in _sections():
                raise ConfigurationError(f"unknown section [{section}]")
            if not isinstance(values, dict):
                raise ConfigurationError(f"[{section}] must be a table")
            for key, value in values.items():
                set_key(cfg, f"{section}.{key}", value)
        return cfg

    def with_overrides(self, overrides) -> "RunConfig":
        cfg = RunConfig.from_dict(self.to_dict())
        for item in overrides:
            if "=" not in item:
                raise ConfigurationError(f"override {item!r} is not key=value")
            key, value = item.split("=", 1)
            set_key(cfg, key.strip(), parse_value(value.strip()))
        return cfg


def _sections() -> dict[str, type]:
    return {f.name: f.default_factory for f in fields(RunConfig)}


def resolve_key(name: str) -> str:
    """Expand a bare key such as ``rounds`` to ``train.rounds`` when unambiguous."""
    if "." in name:
        return name
    owners = [s for s, cls in _sections().items() if name in {f.name for f in fields(cls)}]
    if len(owners) != 1:
        how = "unknown" if not owners else f"ambiguous ({', '.join(owners)})"
        raise ConfigurationError(f"key {name!r} is {how}; write it as section.name")
    return f"{owners[0]}.{name}"


def set_key(cfg: RunConfig, dotted: str, value) -> None:
    dotted = resolve_key(dotted)
    section, key = dotted.split(".", 1)
    if section not in _sections():
        raise ConfigurationError(f"unknown section {section!r} in {dotted!r}")
    obj = getattr(cfg, section)
    types = {f.name: f.type for f in fields(obj)}
    if key not in types:
        raise ConfigurationError(f"unknown key {dotted!r}")
    setattr(obj, key, _coerce(dotted, getattr(obj, key), value))


def _coerce(key: str, current, value):
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ConfigurationError(f"{key} expects true/false, got {value!r}")
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{key} expects an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{key} expects a number, got {value!r}")
        return float(value)
    if isinstance(current, list):
        if not isinstance(value, list):
            value = [value]
        if not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigurationError(f"{key} expects a list of integers, got {value!r}")
        return list(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            value = str(value)
        return value
    raise ConfigurationError(f"{key}: unsupported value {value!r}")


def parse_value(text: str):
    """Interpret a command-line value the way a TOML scalar would be read."""
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if text.startswith("[") and text.endswith("]"):
        inner = text[1:-1].strip()
        return [parse_value(v.strip()) for v in inner.split(",")] if inner else []
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text.strip('"').strip("'")


def load_config(path) -> RunConfig:
    import tomli

    with open(path, "rb") as fh:
        try:
            raw = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise ConfigurationError(f"{path}: {exc}") from None
    return RunConfig.from_dict(raw)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return repr(v)


def to_toml(cfg: RunConfig) -> str:
    out = []
    for section, values in cfg.to_dict().items():
        out.append(f"[{section}]")
        out.extend(f"{k} = {_toml_value(v)}" for k, v in values.items())
        out.append("")
    return "\n".join(out)
