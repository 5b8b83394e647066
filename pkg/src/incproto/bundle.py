"""The trainable model bundle and its checkpoint format.

A bundle couples the embedding backbone, the prototype refiner, the relation
scorer and the (learnable) base prototype matrix. Checkpoints are single
self-describing archives: architecture, weights, prototypes with their
registry, the resolved experiment config and the training seed.
"""

from __future__ import annotations

import io
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import torch
from torch import nn

from .backbone import ConvEmbedder, FreezableModule, IdentityEmbedder, param_digest, set_frozen
from .config import ModelConfig
from .errors import ConfigError
from .prototypes import PrototypeMatrix, init_base_prototypes
from .refinement import PrototypeRefiner
from .relation import RelationScorer

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class ModelBundle:
    backbone: FreezableModule
    refiner: PrototypeRefiner
    scorer: RelationScorer
    prototypes: PrototypeMatrix
    model_config: ModelConfig
    feature_fingerprint: str | None = None

    @property
    def d(self) -> int:
        return self.prototypes.d

    @property
    def dtype(self) -> torch.dtype:
        return _DTYPES[self.model_config.dtype]

    def modules(self) -> dict[str, FreezableModule]:
        return {"backbone": self.backbone, "refiner": self.refiner, "scorer": self.scorer}

    def trainable_parameters(self) -> Iterator[nn.Parameter]:
        for module in self.modules().values():
            yield from module.parameters()
        if isinstance(self.prototypes.rows, nn.Parameter):
            yield self.prototypes.rows

    def digests(self) -> dict[str, str]:
        return {name: param_digest(module) for name, module in self.modules().items()}

    def set_frozen(self, flag: bool) -> None:
        for module in self.modules().values():
            set_frozen(module, flag)
        if isinstance(self.prototypes.rows, nn.Parameter):
            self.prototypes.rows.requires_grad_(not flag)

    def train_mode(self, mode: bool) -> None:
        for module in self.modules().values():
            module.train(mode)


def _make_backbone(config: ModelConfig) -> FreezableModule:
    if config.backbone == "conv":
        return ConvEmbedder(tuple(config.conv_channels))
    if config.backbone == "identity":
        return IdentityEmbedder(config.d)
    raise ConfigError(f"unknown backbone {config.backbone!r}")


def build_bundle(
    config: ModelConfig,
    base_class_ids: list[str],
    seed: int,
    feature_fingerprint: str | None = None,
) -> ModelBundle:
    """Randomly initialized bundle; identical seeds give identical weights."""
    torch.manual_seed(seed)
    dtype = _DTYPES[config.dtype]
    backbone = _make_backbone(config)
    refiner = PrototypeRefiner(
        config.d, config.d_latent, row_softmax=config.row_softmax,
        softmax_tau=config.softmax_tau,
    )
    scorer = RelationScorer(config.d, tuple(config.rm_hidden), config.dropout)
    protos = init_base_prototypes(base_class_ids, config.d, dtype=dtype)
    bundle = ModelBundle(
        backbone=backbone.to(dtype),
        refiner=refiner.to(dtype),
        scorer=scorer.to(dtype),
        prototypes=protos,
        model_config=config,
        feature_fingerprint=feature_fingerprint,
    )
    return bundle


def atomic_save(payload: dict, path: str | Path) -> None:
    # Serialize to memory first: torch.save embeds the target file name in
    # the archive, which would make otherwise-identical checkpoints differ.
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buffer = io.BytesIO()
    torch.save(payload, buffer)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(buffer.getvalue())
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def save_checkpoint(
    bundle: ModelBundle,
    path: str | Path,
    *,
    config_snapshot: dict | None = None,
    seed: int | None = None,
) -> None:
    payload = {
        "format": "incproto-checkpoint-v1",
        "model_config": bundle.model_config.__dict__,
        "state": {name: module.state_dict() for name, module in bundle.modules().items()},
        "prototypes": {
            "rows": bundle.prototypes.rows.detach().cpu(),
            "ids_by_row": bundle.prototypes.ids_by_row(),
            "learnable": bundle.prototypes.learnable,
        },
        "config": config_snapshot,
        "seed": seed,
        "feature_fingerprint": bundle.feature_fingerprint,
    }
    atomic_save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[ModelBundle, dict | None, int | None]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != "incproto-checkpoint-v1":
        raise ConfigError(f"{path} is not a recognized checkpoint")
    model_config = ModelConfig(**payload["model_config"])
    dtype = _DTYPES[model_config.dtype]

    backbone = _make_backbone(model_config).to(dtype)
    refiner = PrototypeRefiner(
        model_config.d,
        model_config.d_latent,
        row_softmax=model_config.row_softmax,
        softmax_tau=model_config.softmax_tau,
    ).to(dtype)
    scorer = RelationScorer(
        model_config.d, tuple(model_config.rm_hidden), model_config.dropout
    ).to(dtype)
    backbone.load_state_dict(payload["state"]["backbone"])
    refiner.load_state_dict(payload["state"]["refiner"])
    scorer.load_state_dict(payload["state"]["scorer"])

    proto_blob = payload["prototypes"]
    rows = proto_blob["rows"].to(dtype)
    registry = {cid: i for i, cid in enumerate(proto_blob["ids_by_row"])}
    if proto_blob["learnable"]:
        prototypes = PrototypeMatrix(rows=nn.Parameter(rows), registry=registry, learnable=True)
    else:
        prototypes = PrototypeMatrix(rows=rows, registry=registry, learnable=False)

    bundle = ModelBundle(
        backbone=backbone,
        refiner=refiner,
        scorer=scorer,
        prototypes=prototypes,
        model_config=model_config,
        feature_fingerprint=payload.get("feature_fingerprint"),
    )
    return bundle, payload.get("config"), payload.get("seed")
