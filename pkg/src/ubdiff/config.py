"""Run configuration: one JSON document, per-section dataclasses, dotted overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

from .diffusion import DenoiserConfig
from .forward import AcquisitionGeometry, SolverConfig, ricker
from .nets import LossWeights, NetConfig
from .trainer import derive_seed, lr_decay_for
from .velocity import DEFAULT_PARAMS, FAMILIES, LayerModelParams


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    family: str = "flatvel"
    count: int = 2000
    n_paired: int = 100
    n_test: int = 200
    majority: str = "velocity"

    def validate(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"data.family must be one of {FAMILIES}")
        if self.count < 1 or self.n_test < 0:
            raise ConfigError("data.count must be >= 1 and data.n_test >= 0")
        if not 0 <= self.n_paired <= self.count:
            raise ConfigError("data.n_paired must lie in [0, data.count]")
        if self.majority not in ("velocity", "seismic"):
            raise ConfigError("data.majority must be 'velocity' or 'seismic'")


@dataclass
class ForwardSection:
    f0: float = 15.0
    dt: float = 1e-3
    nt: int = 256
    sponge_width: int = 16
    sponge_strength: float = 0.08
    cfl_safety: float = 0.9
    source_cols: tuple = (4, 16, 27)

    def solver(self) -> SolverConfig:
        return SolverConfig(self.dt, self.nt, self.sponge_width, self.sponge_strength, self.cfl_safety)

    def wavelet(self):
        return ricker(self.f0, self.dt, self.nt)

    def geometry(self, width: int) -> AcquisitionGeometry:
        return AcquisitionGeometry.surface(width, self.source_cols)


@dataclass
class TrainerSection:
    epochs_step1: int = 50
    epochs_step2: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-4
    lr_decay: float | None = None  # None: per-family default
    weights: dict = field(default_factory=dict)
    val_fraction: float = 0.1
    data_init: bool = True


@dataclass
class DiffusionSection:
    T: int = 256
    schedule: str = "cosine"
    steps: int = 20000
    learning_rate: float = 8e-5
    grad_accum: int = 2
    ema_decay: float = 0.995
    batch_size: int = 64
    width: int = 512
    n_blocks: int = 4
    sample_steps: int = 64
    sampler: str = "deterministic"
    checkpoint_every: int = 1000


@dataclass
class EvalSection:
    feature_dim: int = 64
    extractor_seed: int = 0
    inversion_epochs: int = 30
    inversion_batch_size: int = 32
    inversion_lr: float = 1e-3
    physics_count: int = 100


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    deterministic: bool = True
    data: DataSection = field(default_factory=DataSection)
    velocity: dict = field(default_factory=dict)
    forward: ForwardSection = field(default_factory=ForwardSection)
    net: dict = field(default_factory=dict)
    trainer: TrainerSection = field(default_factory=TrainerSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    evaluation: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> "RunConfig":
        self.data.validate()
        try:
            self.layer_params().validate()
            self.net_config()
            self.forward.solver()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def stage_seed(self, stage: str) -> int:
        """Per-stage seed: sha256 of ``"<stage>:<global seed>"``, first 31 bits."""
        return derive_seed(stage, self.seed)

    def layer_params(self) -> LayerModelParams:
        base = DEFAULT_PARAMS[self.data.family]
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in self.velocity.items()}
        return replace(base, **kw)

    def net_config(self) -> NetConfig:
        size = self.layer_params().size
        seis = (len(self.forward.source_cols), self.forward.nt, size)
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in self.net.items()}
        kw.setdefault("vel_shape", (size, size))
        kw.setdefault("seis_shape", seis)
        kw.setdefault("majority", self.data.majority)
        return NetConfig(**kw)

    def train_config(self, stage: str, freeze: int = 1):
        from .trainer import TrainConfig
        t = self.trainer
        decay = t.lr_decay if t.lr_decay is not None else lr_decay_for(self.data.family)
        return TrainConfig(t.epochs_step1, t.epochs_step2, t.batch_size, t.learning_rate, decay, freeze,
                           self.stage_seed(stage), self.data.majority, LossWeights(**t.weights),
                           t.val_fraction, t.data_init)

    def diffusion_config(self):
        from .diffusion import DiffusionTrainConfig
        d = self.diffusion
        return DiffusionTrainConfig(d.steps, d.learning_rate, d.grad_accum, d.ema_decay, d.batch_size,
                                    self.stage_seed("diffusion"), DenoiserConfig(self.net_config().latent_dim,
                                                                                 d.width, d.n_blocks))

    def to_dict(self) -> dict:
        return asdict(self)


def _build(cls, doc: dict, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(doc) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kw = {}
    for name, value in doc.items():
        default = known[name].default_factory() if callable(known[name].default_factory) else None
        if is_dataclass(default):
            kw[name] = _build(type(default), value, f"{where}.{name}")
        elif isinstance(value, list) and name == "source_cols":
            kw[name] = tuple(value)
        else:
            kw[name] = value
    return cls(**kw)


def from_dict(doc: dict) -> RunConfig:
    try:
        return _build(RunConfig, doc, "config").validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path=None, overrides=()) -> RunConfig:
    """Read a JSON config (or defaults when ``path`` is None) and apply ``key.sub=value`` overrides."""
    doc = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            doc = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    for item in overrides:
        apply_override(doc, item)
    return from_dict(doc)


def apply_override(doc: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = doc
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-object")
    node[parts[-1]] = value
