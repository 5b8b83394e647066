"""Experiment configuration: one YAML file, validated before any work runs.

CLI flags override individual keys by dotted path, e.g.
``--set train.max_iterations=50``. The fully resolved config is embedded in
every checkpoint and report so a run is reconstructible from its artifacts.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .features import FbankConfig, SyntheticLayout


@dataclass
class ManifestDataConfig:
    base_manifest: str = ""
    incremental_manifests: list[str] = field(default_factory=list)
    audio_root: str = "."


@dataclass
class DatasetConfig:
    kind: str = "synthetic"  # "synthetic" | "manifests"
    synthetic: dict | None = None  # SyntheticLayout fields
    manifests: dict | None = None  # ManifestDataConfig fields

    def layout(self) -> SyntheticLayout:
        if self.kind != "synthetic" or self.synthetic is None:
            raise ConfigError("dataset.synthetic block required for synthetic datasets")
        fields = dict(self.synthetic)
        if fields.get("map_shape") is not None:
            fields["map_shape"] = tuple(fields["map_shape"])
        try:
            return SyntheticLayout(**fields)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad dataset.synthetic block: {exc}") from exc

    def manifest_config(self) -> ManifestDataConfig:
        if self.kind != "manifests" or self.manifests is None:
            raise ConfigError("dataset.manifests block required for manifest datasets")
        try:
            return ManifestDataConfig(**self.manifests)
        except TypeError as exc:
            raise ConfigError(f"bad dataset.manifests block: {exc}") from exc


@dataclass
class FeatureConfig:
    sample_rate: int = 16000
    n_mels: int = 64
    win_ms: float = 25.0
    hop_ms: float = 10.0
    log_floor: float = 1e-10
    normalize: bool = True
    target_seconds: float | None = None
    cache_dir: str | None = None  # default: <output_dir>/features; env INCPROTO_CACHE wins

    def fbank(self) -> FbankConfig:
        return FbankConfig(
            sample_rate=self.sample_rate,
            n_mels=self.n_mels,
            win_ms=self.win_ms,
            hop_ms=self.hop_ms,
            log_floor=self.log_floor,
            normalize=self.normalize,
            target_seconds=self.target_seconds,
        )


@dataclass
class ModelConfig:
    backbone: str = "conv"  # "conv" | "identity"
    d: int = 64
    conv_channels: list[int] = field(default_factory=lambda: [16, 32, 64])
    d_latent: int | None = None  # defaults to d
    rm_hidden: list[int] = field(default_factory=lambda: [128, 64])
    dropout: float = 0.2
    dtype: str = "float32"
    row_softmax: bool = False  # normalize relation weights per row (deviation flag)
    softmax_tau: float = 1.0  # relation-weight softmax temperature (with row_softmax)


@dataclass
class TrainConfig:
    episodes_per_iter: int = 3  # episodes accumulated per optimizer step
    n_way: int = 5
    k_shot: int = 5
    q_per_class: int = 2
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    max_iterations: int = 100
    seed: int = 0
    mean_loss: bool = False  # default: losses summed over queries and episodes
    cosine_decay: bool = True
    plain_batch_size: int = 64  # minibatch size for the no-episodic ablation
    checkpoint_every: int | None = None


@dataclass
class FinetuneConfig:
    steps: int = 100
    lr: float = 0.01
    momentum: float = 0.9


@dataclass
class EvalConfig:
    seeds: list[int] = field(default_factory=lambda: [0])
    method: str = "proposed"  # "proposed" | "finetune" | "both"
    carry: str = "refined"  # prototype handoff across sessions: refined | unrefined
    batch_size: int = 256
    parallel: int = 0  # 0/1 = sequential; >1 = worker processes over seeds


@dataclass
class AblationConfig:
    no_refine: bool = False  # bypass prototype refinement (identity pass-through)
    no_episodic: bool = False  # train the base session with plain minibatch CE


@dataclass
class ExperimentConfig:
    experiment: str = "experiment"
    output_dir: str = "runs/experiment"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


_BLOCKS = {
    "dataset": DatasetConfig,
    "features": FeatureConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "finetune": FinetuneConfig,
    "evaluation": EvalConfig,
    "ablation": AblationConfig,
}


def config_from_dict(data: dict) -> ExperimentConfig:
    data = copy.deepcopy(data)
    kwargs: dict = {}
    for key in ("experiment", "output_dir"):
        if key in data:
            kwargs[key] = data.pop(key)
    for name, cls in _BLOCKS.items():
        block = data.pop(name, None)
        if block is None:
            continue
        if not isinstance(block, dict):
            raise ConfigError(f"config block {name!r} must be a mapping")
        try:
            kwargs[name] = cls(**block)
        except TypeError as exc:
            raise ConfigError(f"bad config block {name!r}: {exc}") from exc
    if data:
        raise ConfigError(f"unknown config keys: {sorted(data)}")
    return ExperimentConfig(**kwargs)


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; values parse as YAML literals."""
    data = copy.deepcopy(data)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key.path=value")
        dotted, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        node = data
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override {dotted!r}: {part!r} is not a mapping")
        node[parts[-1]] = value
    return data


def load_config(path: str | Path, overrides: list[str] | None = None) -> ExperimentConfig:
    raw = yaml.safe_load(Path(path).read_text())
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top-level config must be a mapping")
    if overrides:
        raw = apply_overrides(raw, overrides)
    config = config_from_dict(raw)
    validate_config(config)
    return config


def validate_config(config: ExperimentConfig) -> None:
    """Cross-module consistency checks; run before any work starts."""
    model, train, evaluation = config.model, config.train, config.evaluation

    if model.backbone not in ("conv", "identity"):
        raise ConfigError(f"unknown backbone {model.backbone!r}")
    if model.dtype not in ("float32", "float64"):
        raise ConfigError(f"unsupported dtype {model.dtype!r}")
    if len(model.rm_hidden) != 2 or any(h < 1 for h in model.rm_hidden):
        raise ConfigError("model.rm_hidden must be two positive widths")
    if model.backbone == "conv":
        if len(model.conv_channels) != 3 or any(c < 1 for c in model.conv_channels):
            raise ConfigError("model.conv_channels must be three positive counts")
        if model.conv_channels[-1] != model.d:
            raise ConfigError(
                f"model.d ({model.d}) must equal the last conv channel count "
                f"({model.conv_channels[-1]})"
            )

    if train.episodes_per_iter < 1:
        raise ConfigError("train.episodes_per_iter must be >= 1")
    if min(train.lr, train.momentum, train.weight_decay) < 0 or train.lr == 0:
        raise ConfigError("train rates must be positive (momentum/decay nonnegative)")
    if train.n_way < 1 or train.k_shot < 1 or train.q_per_class < 1:
        raise ConfigError("train.n_way, k_shot and q_per_class must be >= 1")
    if train.max_iterations < 0:
        raise ConfigError("train.max_iterations must be >= 0")

    if evaluation.method not in ("proposed", "finetune", "both"):
        raise ConfigError(f"unknown evaluation method {evaluation.method!r}")
    if evaluation.carry not in ("refined", "unrefined"):
        raise ConfigError(f"unknown carry policy {evaluation.carry!r}")
    if not evaluation.seeds:
        raise ConfigError("evaluation.seeds must be nonempty")

    if config.dataset.kind == "synthetic":
        layout = config.dataset.layout()
        if train.n_way >= layout.base_classes:
            raise ConfigError(
                f"train.n_way ({train.n_way}) must be below the base class count "
                f"({layout.base_classes})"
            )
        if model.backbone == "identity" and layout.dim != model.d:
            raise ConfigError(
                f"identity backbone needs model.d == dataset dim ({layout.dim}), "
                f"got {model.d}"
            )
        if model.backbone == "conv" and layout.map_shape is None:
            raise ConfigError("conv backbone on synthetic data requires dataset map_shape")
    elif config.dataset.kind == "manifests":
        config.dataset.manifest_config()
        if model.backbone == "identity":
            raise ConfigError("identity backbone is only meaningful on synthetic vectors")
    else:
        raise ConfigError(f"unknown dataset kind {config.dataset.kind!r}")
