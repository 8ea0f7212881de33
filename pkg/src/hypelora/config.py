"""Flat ``key = value`` run configuration shared by every CLI command."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .encoder import ModelConfig
from .hypernet import HyperNetConfig
from .lora import ConfigurationError
from .train import TrainConfig

ADAPTERS = ("baseline-lora", "hypernet-mlp", "hypernet-transformer")
GENERATIONS = ("full-gen", "fixed-a")

# used when peak_lr is not given; tuned for full-size backbones, not the toy model
DEFAULT_PEAK_LR = {"baseline-lora": 4e-4, "hypernet-mlp": 1e-5, "hypernet-transformer": 4e-4}

_MODEL_KEYS = tuple(f.name for f in dataclasses.fields(ModelConfig))
_HYPER_KEYS = tuple(f.name for f in dataclasses.fields(HyperNetConfig)
                    if f.name not in ("variant", "mode", "embed_dim", "output_dim"))
_TRAIN_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig))


@dataclass(frozen=True)
class RunSettings:
    adapter: str = "hypernet-mlp"
    generation: str = "full-gen"
    train_data: str | None = None
    valid_data: str | None = None
    out: str | None = None
    backbone_seed: int = 0
    bins: int = 10
    tace_eps: float = 0.01
    task_metric: str = "accuracy"
    positive_class: int = 1
    ace_top_label: bool = False


_RUN_KEYS = tuple(f.name for f in dataclasses.fields(RunSettings))
ALL_KEYS = _RUN_KEYS + _MODEL_KEYS + _HYPER_KEYS + _TRAIN_KEYS
# keys that never enter a checkpoint or the cross-run comparison
VOLATILE_KEYS = ("out",)


@dataclass(frozen=True)
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    model: ModelConfig = field(default_factory=ModelConfig)
    hyper: HyperNetConfig = field(default_factory=HyperNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def adapter_mode(self) -> str:
        """Mode name as used by :func:`hypelora.lora.lora_param_count`."""
        if self.run.adapter == "baseline-lora":
            return "per_layer_lora"
        return "hypernet_full" if self.run.generation == "full-gen" else "hypernet_fixed_a"

    def flat(self) -> dict[str, str]:
        out: dict[str, str] = {}
        for key in _RUN_KEYS:
            value = getattr(self.run, key)
            if value is not None:
                out[key] = _format(value)
        for key in _MODEL_KEYS:
            out[key] = _format(getattr(self.model, key))
        for key in _HYPER_KEYS:
            out[key] = _format(getattr(self.hyper, key))
        for key in _TRAIN_KEYS:
            out[key] = _format(getattr(self.train, key))
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.flat().items())


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _convert(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value'")
        values[key.strip()] = value.strip()
    return values


def read_config_file(path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    return parse_text(path.read_text(), str(path))


def _defaults(cls):
    return {f.name: (f.default if f.default is not dataclasses.MISSING else None)
            for f in dataclasses.fields(cls)}


def build(values: dict[str, str]) -> RunConfig:
    """Turn raw string settings into a validated :class:`RunConfig`."""
    unknown = sorted(set(values) - set(ALL_KEYS))
    if unknown:
        raise ConfigurationError(f"unknown config key(s): {', '.join(unknown)}")

    def pick(cls, keys):
        defaults = _defaults(cls)
        out = {}
        for k in keys:
            if k in values:
                d = defaults[k]
                out[k] = values[k] if d is None else _convert(k, values[k], d)
        return out

    run_kwargs = pick(RunSettings, _RUN_KEYS)
    run = RunSettings(**run_kwargs)
    if run.adapter not in ADAPTERS:
        raise ConfigurationError(f"adapter must be one of {ADAPTERS}, got {run.adapter!r}")
    if run.generation not in GENERATIONS:
        raise ConfigurationError(f"generation must be one of {GENERATIONS}, got {run.generation!r}")
    if run.bins < 1:
        raise ConfigurationError("bins must be at least 1")
    model = ModelConfig(**pick(ModelConfig, _MODEL_KEYS))
    hyper = HyperNetConfig.for_model(
        model,
        variant="transformer" if run.adapter == "hypernet-transformer" else "mlp",
        mode="fixed_a" if run.generation == "fixed-a" else "full",
        **pick(HyperNetConfig, _HYPER_KEYS),
    )
    train_kwargs = pick(TrainConfig, _TRAIN_KEYS)
    train_kwargs.setdefault("peak_lr", DEFAULT_PEAK_LR[run.adapter])
    train = TrainConfig(**train_kwargs)
    return RunConfig(run, model, hyper, train)


def resolve(config_path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    values = read_config_file(config_path) if config_path else {}
    values.update({k: str(v) for k, v in (overrides or {}).items() if v is not None})
    return build(values)
