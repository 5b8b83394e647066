"""Per-class prototype vectors and the operations that grow them.

A PrototypeMatrix is an immutable value: every operation returns a new
matrix. The registry maps class ids to row indices in first-seen order, which
fixes the row/column semantics of the refinement weights downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import torch
from torch import nn

from .errors import PrototypeError


@dataclass
class PrototypeMatrix:
    rows: torch.Tensor  # [n_classes, d]; an nn.Parameter when learnable
    registry: dict[str, int]  # class_id -> row index, insertion-ordered
    learnable: bool = False

    def __post_init__(self):
        if self.rows.ndim != 2:
            raise PrototypeError(f"prototype rows must be 2-D, got shape {tuple(self.rows.shape)}")
        if sorted(self.registry.values()) != list(range(self.rows.shape[0])):
            raise PrototypeError("registry is not a bijection onto row indices")

    @property
    def n_classes(self) -> int:
        return self.rows.shape[0]

    @property
    def d(self) -> int:
        return self.rows.shape[1]

    @property
    def class_ids(self) -> list[str]:
        return list(self.registry)

    def row_of(self, class_id: str) -> int:
        try:
            return self.registry[class_id]
        except KeyError:
            raise PrototypeError(f"unknown class id {class_id!r}") from None

    def class_of(self, row: int) -> str:
        for cid, idx in self.registry.items():
            if idx == row:
                return cid
        raise PrototypeError(f"row {row} out of range")

    def ids_by_row(self) -> list[str]:
        out: list[str] = [""] * self.n_classes
        for cid, idx in self.registry.items():
            out[idx] = cid
        return out

    def detached(self) -> "PrototypeMatrix":
        return PrototypeMatrix(
            rows=self.rows.detach().clone(), registry=dict(self.registry), learnable=False
        )


def compute_prototype(support_embeddings: Sequence[torch.Tensor] | torch.Tensor) -> torch.Tensor:
    """Arithmetic mean of the support embeddings (the class prototype)."""
    if isinstance(support_embeddings, torch.Tensor):
        stacked = support_embeddings
        if stacked.ndim == 1:
            stacked = stacked.unsqueeze(0)
    else:
        if len(support_embeddings) == 0:
            raise PrototypeError("cannot compute a prototype from an empty support set")
        stacked = torch.stack(list(support_embeddings))
    if stacked.shape[0] == 0:
        raise PrototypeError("cannot compute a prototype from an empty support set")
    return stacked.mean(dim=0)


def init_base_prototypes(
    class_ids: Iterable[str],
    d: int,
    generator: torch.Generator | None = None,
    *,
    dtype: torch.dtype = torch.float32,
) -> PrototypeMatrix:
    """Learnable base prototypes, entries ~ N(0, 1/sqrt(d))."""
    ids = list(class_ids)
    if not ids or d < 1:
        raise PrototypeError("need at least one class id and d >= 1")
    if len(set(ids)) != len(ids):
        raise PrototypeError("duplicate class ids")
    rows = torch.empty(len(ids), d, dtype=dtype)
    rows.normal_(0.0, 1.0 / math.sqrt(d), generator=generator)
    return PrototypeMatrix(
        rows=nn.Parameter(rows),
        registry={cid: i for i, cid in enumerate(ids)},
        learnable=True,
    )


def pseudo_base_subset(protos: PrototypeMatrix, excluded_labels: Iterable[str]) -> PrototypeMatrix:
    """Rows whose labels are NOT excluded, relative order preserved.

    The selection stays in the autograd graph, so gradients reach only the
    kept rows of a learnable matrix.
    """
    excluded = set(excluded_labels)
    unknown = excluded - set(protos.registry)
    if unknown:
        raise PrototypeError(f"labels not in registry: {sorted(unknown)}")
    kept = [cid for cid in protos.registry if cid not in excluded]
    idx = torch.tensor([protos.registry[cid] for cid in kept], dtype=torch.long)
    return PrototypeMatrix(
        rows=protos.rows.index_select(0, idx),
        registry={cid: i for i, cid in enumerate(kept)},
        learnable=False,
    )


def merge(a: PrototypeMatrix, b: PrototypeMatrix) -> PrototypeMatrix:
    """Rows of ``a`` followed by rows of ``b``; registries must be disjoint."""
    collision = set(a.registry) & set(b.registry)
    if collision:
        raise PrototypeError(f"registry collision on {sorted(collision)}")
    if a.d != b.d:
        raise PrototypeError(f"dimension mismatch: {a.d} vs {b.d}")
    if b.n_classes == 0:
        return PrototypeMatrix(rows=a.rows, registry=dict(a.registry), learnable=False)
    if a.n_classes == 0:
        return PrototypeMatrix(rows=b.rows, registry=dict(b.registry), learnable=False)
    registry = {cid: i for i, cid in enumerate(list(a.registry) + list(b.registry))}
    return PrototypeMatrix(
        rows=torch.cat([a.rows, b.rows], dim=0), registry=registry, learnable=False
    )
