"""Run configuration: one JSON document covering the whole pipeline.

Sections map onto the module configs (world/codec/model/train) plus data
generation and evaluation-set settings. CLI flag overrides use dotted keys,
e.g. --set train.lr=0.1 --set world.width=16.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .codec import CodecConfig, ScaleSchedule
from .gridworld import WorldConfig
from .model import ModelConfig
from .training import TrainConfig
from .vocab import Vocabulary


@dataclass(frozen=True)
class DataGenConfig:
    n_worlds: int = 12
    tasks_per_world: int = 4
    n_subgoals: int = 2  # 0 means random in [1, world.max_subgoals]
    k: int = 5
    prefix: int = 4
    history_cap: int = 4
    augment: bool = True
    seed: int = 0
    codec_image_cap: int = 1500


@dataclass(frozen=True)
class EvalSetConfig:
    n_worlds: int = 14
    tasks_per_world: int = 5
    n_subgoals: int = 2
    seed_offset: int = 10_000  # eval worlds never overlap training worlds
    constrained: bool = True
    trace_budget: int = 48


@dataclass(frozen=True)
class PipelineConfig:
    world: WorldConfig = field(default_factory=lambda: WorldConfig(width=12, height=12, n_rooms=2, n_objects=4, max_subgoals=2))
    codec: CodecConfig = field(default_factory=lambda: CodecConfig(epochs=6))
    data: DataGenConfig = field(default_factory=DataGenConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSetConfig = field(default_factory=EvalSetConfig)
    model_layers: int = 2
    model_heads: int = 4
    model_width: int = 64
    model_ff: int = 256
    model_context: int = 512
    model_dtype: str = "f4"
    model_seed: int = 0

    def model_config(self) -> ModelConfig:
        vocab = Vocabulary(self.codec.codebook_size)
        return ModelConfig(
            vocab_size=len(vocab),
            n_layers=self.model_layers,
            n_heads=self.model_heads,
            d_model=self.model_width,
            d_ff=self.model_ff,
            context=self.model_context,
            dtype=self.model_dtype,
            seed=self.model_seed,
        )

    def vocabulary(self) -> Vocabulary:
        return Vocabulary(self.codec.codebook_size)

    def to_json(self) -> dict:
        doc = {
            "world": asdict(self.world),
            "codec": {
                "image_size": self.codec.image_size,
                "channels": self.codec.channels,
                "schedule": list(self.codec.schedule.sides),
                "codebook_size": self.codec.codebook_size,
                "dim": self.codec.dim,
                "epochs": self.codec.epochs,
                "seed": self.codec.seed,
            },
            "data": asdict(self.data),
            "train": self.train.to_json(),
            "eval": asdict(self.eval),
            "model": {
                "layers": self.model_layers,
                "heads": self.model_heads,
                "width": self.model_width,
                "ff": self.model_ff,
                "context": self.model_context,
                "dtype": self.model_dtype,
                "seed": self.model_seed,
            },
        }
        return doc

    @staticmethod
    def from_json(doc: dict) -> "PipelineConfig":
        codec_doc = dict(doc.get("codec", {}))
        if "schedule" in codec_doc:
            codec_doc["schedule"] = ScaleSchedule(tuple(codec_doc["schedule"]))
        model_doc = doc.get("model", {})
        return PipelineConfig(
            world=WorldConfig(**doc.get("world", {})),
            codec=CodecConfig(**codec_doc),
            data=DataGenConfig(**doc.get("data", {})),
            train=TrainConfig.from_json(doc.get("train", {})) if doc.get("train") else TrainConfig(),
            eval=EvalSetConfig(**doc.get("eval", {})),
            model_layers=model_doc.get("layers", 2),
            model_heads=model_doc.get("heads", 4),
            model_width=model_doc.get("width", 64),
            model_ff=model_doc.get("ff", 256),
            model_context=model_doc.get("context", 512),
            model_dtype=model_doc.get("dtype", "f4"),
            model_seed=model_doc.get("seed", 0),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @staticmethod
    def load(path: str | Path) -> "PipelineConfig":
        return PipelineConfig.from_json(json.loads(Path(path).read_text()))


def _parse_scalar(text: str):
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def apply_overrides(config: PipelineConfig, overrides: list[str]) -> PipelineConfig:
    """Apply dotted key=value overrides onto the JSON form and rebuild."""
    doc = config.to_json()
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form section.key=value")
        key, raw = item.split("=", 1)
        parts = key.split(".")
        node = doc
        for part in parts[:-1]:
            if part not in node:
                raise ValueError(f"unknown config section {part!r} in override {item!r}")
            node = node[part]
        leaf = parts[-1]
        if leaf not in node:
            raise ValueError(f"unknown config key {key!r}")
        if isinstance(node[leaf], list):
            node[leaf] = [_parse_scalar(v) for v in raw.split(",") if v]
        else:
            node[leaf] = _parse_scalar(raw)
    return PipelineConfig.from_json(doc)
