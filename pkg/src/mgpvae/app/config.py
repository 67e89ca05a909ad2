"""Experiment configuration: TOML sections mapped onto dataclasses.

Unknown sections or keys are errors, as are values of the wrong type.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from ..errors import ConfigError
from ..model import KernelConfig, ModelConfig
from ..ssk import canonical_family

TASKS = ("clean", "corrupt", "missing", "spatiotemporal")


@dataclass
class DataSection:
    task: str = "missing"
    num_train: int = 200
    num_test: int = 40
    T: int = 100
    period: float = 50.0
    data_dim: int = 8
    noise_std: float = 0.05
    drop_frac: float = 0.4
    n_locations: int = 5
    n_test_locations: int = 1


@dataclass
class ModelSection:
    latent_dim: int = 2
    encoder_hidden: list = field(default_factory=lambda: [32])
    decoder_hidden: list = field(default_factory=lambda: [16])
    activation: str = "relu"
    noise_variance: float = 0.1
    spatial_family: str = "matern32"
    spatial_lengthscale: float = 0.5


@dataclass
class KernelSection:
    family: str = "matern32"
    variance: float = 1.0
    lengthscale: float | None = None
    trainable: bool = True


@dataclass
class TrainSection:
    lr: float = 1e-2
    epochs: int = 20
    batch_size: int = 40
    k_train: int = 1
    k_eval: int = 20
    clip_norm: float = 100.0
    seed: int = 0


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    kernel: KernelSection = field(default_factory=KernelSection)
    kernels: dict = field(default_factory=dict)   # channel index -> KernelSection overrides
    train: TrainSection = field(default_factory=TrainSection)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        d, m, t = self.data, self.model, self.train
        if d.task not in TASKS:
            raise ConfigError(f"data.task must be one of {TASKS}, got {d.task!r}")
        _positive("data.T", d.T)
        _positive("data.data_dim", d.data_dim)
        _positive("model.latent_dim", m.latent_dim)
        _positive("train.epochs", t.epochs, allow_zero=True)
        _positive("train.batch_size", t.batch_size)
        _positive("train.k_train", t.k_train)
        _positive("train.k_eval", t.k_eval)
        if t.lr < 0:
            raise ConfigError("train.lr must be non-negative")
        if not 0 <= d.drop_frac < 1:
            raise ConfigError("data.drop_frac must lie in [0, 1)")
        for idx in self.kernels:
            if not 0 <= idx < m.latent_dim:
                raise ConfigError(f"kernel.{idx}: channel index out of range")
        for l in range(m.latent_dim):
            k = self.kernel_for(l)
            try:
                canonical_family(k.family)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
            if k.variance <= 0 or (k.lengthscale is not None and k.lengthscale <= 0):
                raise ConfigError(f"kernel {l}: variance and lengthscale must be positive")

    def kernel_for(self, l: int) -> KernelSection:
        return self.kernels.get(l, self.kernel)

    def model_config(self) -> ModelConfig:
        m = self.model
        kernels = tuple(KernelConfig(k.family, k.variance, k.lengthscale, k.trainable)
                        for k in (self.kernel_for(l) for l in range(m.latent_dim)))
        return ModelConfig(
            data_dim=self.data.data_dim, latent_dim=m.latent_dim,
            encoder_hidden=tuple(m.encoder_hidden), decoder_hidden=tuple(m.decoder_hidden),
            activation=m.activation, kernels=kernels, noise_variance=m.noise_variance,
            spatial_family=m.spatial_family, spatial_lengthscales=(m.spatial_lengthscale,),
        )

    def to_dict(self) -> dict:
        out = {
            "data": dataclasses.asdict(self.data),
            "model": dataclasses.asdict(self.model),
            "kernel": _drop_none(dataclasses.asdict(self.kernel)),
            "train": dataclasses.asdict(self.train),
        }
        for idx, k in self.kernels.items():
            out["kernel"][str(idx)] = _drop_none(dataclasses.asdict(k))
        return out

    def to_toml(self) -> str:
        lines = []
        d = self.to_dict()
        for sec in ("data", "model", "kernel", "train"):
            lines.append(f"[{sec}]")
            subs = []
            for k, v in d[sec].items():
                if isinstance(v, dict):
                    subs.append((k, v))
                else:
                    lines.append(f"{k} = {_toml_value(v)}")
            lines.append("")
            for k, v in subs:
                lines.append(f"[{sec}.{k}]")
                lines.extend(f"{kk} = {_toml_value(vv)}" for kk, vv in v.items())
                lines.append("")
        return "\n".join(lines)


def _drop_none(d: dict) -> dict:
    return {k: v for k, v in d.items() if v is not None}


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return repr(v)


def _positive(name, v, allow_zero=False):
    if v < 0 or (v == 0 and not allow_zero):
        raise ConfigError(f"{name} must be positive, got {v}")


def _coerce(section: str, cls, values: dict):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in values.items():
        if key not in fields:
            raise ConfigError(f"unknown key {section}.{key}")
        default = fields[key].default
        if default is dataclasses.MISSING and fields[key].default_factory is not dataclasses.MISSING:
            default = fields[key].default_factory()
        kwargs[key] = _check_type(f"{section}.{key}", val, default, key)
    return cls(**kwargs)


def _check_type(name, val, default, key):
    if isinstance(default, bool):
        if not isinstance(val, bool):
            raise ConfigError(f"{name} must be a boolean")
        return val
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(val, bool) or not isinstance(val, int):
            raise ConfigError(f"{name} must be an integer")
        return val
    if isinstance(default, float) or (default is None and key == "lengthscale"):
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(f"{name} must be a number")
        return float(val)
    if isinstance(default, str):
        if not isinstance(val, str):
            raise ConfigError(f"{name} must be a string")
        return val
    if isinstance(default, list):
        if isinstance(val, int) and not isinstance(val, bool):
            return [val]
        if not isinstance(val, list) or not all(isinstance(x, int) and not isinstance(x, bool) and x > 0 for x in val):
            raise ConfigError(f"{name} must be a list of positive integers")
        return list(val)
    raise ConfigError(f"{name}: unsupported value")


def config_from_dict(doc: dict) -> ExperimentConfig:
    known = {"data": DataSection, "model": ModelSection, "kernel": KernelSection, "train": TrainSection}
    for sec in doc:
        if sec not in known:
            raise ConfigError(f"unknown section [{sec}]")
    parts = {}
    kernels = {}
    for sec, cls in known.items():
        values = dict(doc.get(sec, {}))
        if not isinstance(values, dict):
            raise ConfigError(f"[{sec}] must be a table")
        if sec == "kernel":
            for key in [k for k, v in values.items() if isinstance(v, dict)]:
                if not key.isdigit():
                    raise ConfigError(f"unknown section [kernel.{key}]")
                kernels[int(key)] = values.pop(key)
        parts[sec] = _coerce(sec, cls, values)
    base = _drop_none(dataclasses.asdict(parts["kernel"]))
    per_channel = {idx: _coerce(f"kernel.{idx}", KernelSection, {**base, **v}) for idx, v in kernels.items()}
    return ExperimentConfig(parts["data"], parts["model"], parts["kernel"], per_channel, parts["train"])


def load_config(path) -> ExperimentConfig:
    try:
        with open(Path(path), "rb") as f:
            doc = tomli.load(f)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(doc)
