"""Run configuration: one INI document driving every CLI workflow.

Sections mirror the module configs ([model], [swiftkv], [train],
[workload], [hardware], [engine]); every key has a documented default and
unknown sections or keys are rejected outright so typos cannot silently
fall back to defaults.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import model as mdl
from . import servesim as sv
from .distill import TrainConfig
from .swiftkv import SwiftKVConfig

class ConfigError(ValueError):
    """Malformed or unknown run-configuration content."""


MODEL_PRESETS = {
    "toy": mdl.toy_config,
    "llama8b": lambda precision="double": mdl.llama8b_config(),
    "llama70b": lambda precision="double": mdl.llama70b_config(),
}


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_optional_float(text: str) -> float | None:
    return None if text.strip().lower() == "none" else float(text)


def _parse_optional_int(text: str) -> int | None:
    return None if text.strip().lower() == "none" else int(text)


def _parse_lengths(text: str) -> int | tuple[int, ...]:
    parts = [int(p) for p in text.replace(",", " ").split()]
    if not parts:
        raise ValueError("input_length needs at least one value")
    return parts[0] if len(parts) == 1 else tuple(parts)


@dataclass
class ModelSection:
    preset: str = "toy"
    precision: str = "double"
    seed: int = 0


@dataclass
class SwiftKVSection:
    cutoff: int = 0  # 0 means half the preset's layers
    group_size: int = 1
    early_exit: bool = False
    exit_threshold: float = 0.95
    train_scope: str = "wqkv"


@dataclass
class TrainSection:
    learning_rate: float = 3e-4
    weight_decay: float = 0.05
    warmup_fraction: float = 0.05
    epochs: int = 2
    temperature: float = 2.0
    batch_size: int = 8
    seed: int = 0
    # synthetic corpus knobs
    num_sequences: int = 64
    sequence_length: int = 16
    branching: int = 4


@dataclass
class WorkloadSection:
    arrival: str = "closed"
    num_requests: int = 8
    input_length: int | tuple[int, ...] = 8000
    output_length: int = 256
    rate: float | None = None
    concurrency: int | None = 4
    seed: int = 0


@dataclass
class HardwareSection:
    peak_compute: float = 989e12
    peak_bandwidth: float = 3.35e12
    memory_capacity: float = 80e9
    overhead_s: float = 1e-3
    efficiency: float = 0.5


@dataclass
class EngineSection:
    max_batched_tokens: int = 2048
    attn_context: float | None = None
    causal_factor: float = 0.5
    quantization: str = "none"
    accounting: str = "normal"


_PARSERS = {
    ("model", "preset"): str,
    ("model", "precision"): str,
    ("model", "seed"): int,
    ("swiftkv", "cutoff"): int,
    ("swiftkv", "group_size"): int,
    ("swiftkv", "early_exit"): _parse_bool,
    ("swiftkv", "exit_threshold"): float,
    ("swiftkv", "train_scope"): str,
    ("train", "learning_rate"): float,
    ("train", "weight_decay"): float,
    ("train", "warmup_fraction"): float,
    ("train", "epochs"): int,
    ("train", "temperature"): float,
    ("train", "batch_size"): int,
    ("train", "seed"): int,
    ("train", "num_sequences"): int,
    ("train", "sequence_length"): int,
    ("train", "branching"): int,
    ("workload", "arrival"): str,
    ("workload", "num_requests"): int,
    ("workload", "input_length"): _parse_lengths,
    ("workload", "output_length"): int,
    ("workload", "rate"): _parse_optional_float,
    ("workload", "concurrency"): _parse_optional_int,
    ("workload", "seed"): int,
    ("hardware", "peak_compute"): float,
    ("hardware", "peak_bandwidth"): float,
    ("hardware", "memory_capacity"): float,
    ("hardware", "overhead_s"): float,
    ("hardware", "efficiency"): float,
    ("engine", "max_batched_tokens"): int,
    ("engine", "attn_context"): _parse_optional_float,
    ("engine", "causal_factor"): float,
    ("engine", "quantization"): str,
    ("engine", "accounting"): str,
}


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    swiftkv: SwiftKVSection = field(default_factory=SwiftKVSection)
    train: TrainSection = field(default_factory=TrainSection)
    workload: WorkloadSection = field(default_factory=WorkloadSection)
    hardware: HardwareSection = field(default_factory=HardwareSection)
    engine: EngineSection = field(default_factory=EngineSection)

    def model_config(self) -> mdl.ModelConfig:
        if self.model.preset not in MODEL_PRESETS:
            raise ConfigError(
                f"unknown model preset {self.model.preset!r}; "
                f"choose from {sorted(MODEL_PRESETS)}"
            )
        return MODEL_PRESETS[self.model.preset](precision=self.model.precision)

    def swiftkv_config(self) -> SwiftKVConfig:
        cutoff = self.swiftkv.cutoff
        if cutoff == 0:
            cutoff = self.model_config().num_layers // 2
        return SwiftKVConfig(
            cutoff=cutoff,
            group_size=self.swiftkv.group_size,
            early_exit=self.swiftkv.early_exit,
            exit_threshold=self.swiftkv.exit_threshold,
        )

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            learning_rate=t.learning_rate,
            weight_decay=t.weight_decay,
            warmup_fraction=t.warmup_fraction,
            epochs=t.epochs,
            temperature=t.temperature,
            batch_size=t.batch_size,
            seed=t.seed,
            train_scope=self.swiftkv.train_scope,
        )

    def workload_spec(self) -> sv.WorkloadSpec:
        w = self.workload
        return sv.WorkloadSpec(
            arrival=w.arrival,
            num_requests=w.num_requests,
            input_length=w.input_length,
            output_length=w.output_length,
            rate=w.rate,
            concurrency=w.concurrency,
            seed=w.seed,
        )

    def hardware_model(self) -> sv.HardwareModel:
        h = self.hardware
        return sv.HardwareModel(
            peak_compute=h.peak_compute,
            peak_bandwidth=h.peak_bandwidth,
            memory_capacity=h.memory_capacity,
            overhead_s=h.overhead_s,
            efficiency=h.efficiency,
        )

    def engine_config(self, swiftkv: SwiftKVConfig | None) -> sv.EngineConfig:
        e = self.engine
        return sv.EngineConfig(
            model=self.model_config(),
            swiftkv=swiftkv,
            max_batched_tokens=e.max_batched_tokens,
            attn_context=e.attn_context,
            causal_factor=e.causal_factor,
            quantization=e.quantization,
            accounting=e.accounting,
        )


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc

    config = RunConfig()
    sections = {f.name: getattr(config, f.name) for f in fields(config)}
    for section_name in parser.sections():
        if section_name not in sections:
            raise ConfigError(
                f"unknown config section [{section_name}]; "
                f"expected one of {sorted(sections)}"
            )
        section = sections[section_name]
        for key, raw in parser.items(section_name):
            parse = _PARSERS.get((section_name, key))
            if parse is None:
                raise ConfigError(f"unknown key {key!r} in section [{section_name}]")
            try:
                value = parse(raw)
            except ValueError as exc:
                raise ConfigError(
                    f"bad value for [{section_name}] {key} = {raw!r}: {exc}"
                ) from exc
            setattr(section, key, value)
    return config


def load_config(path: str | Path | None) -> RunConfig:
    """Parse an INI file; no path means all defaults."""
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
