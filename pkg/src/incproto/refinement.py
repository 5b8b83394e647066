"""Prototype refinement via learned relation weights.

Two projection blocks map the current and the previous prototype matrices
into a shared latent space; their product gives pairwise relation weights,
and the weighted combination of previous prototypes yields the refined
matrix:

    weights = block_cur(P_cur) @ block_prev(P_prev)^T      [n_cur, n_prev]
    refined = weights @ P_prev                             [n_cur, d]

Every refined row is therefore a linear combination of previous prototypes.
"""

from __future__ import annotations

import logging

import torch
from torch import nn

from .backbone import FreezableModule
from .errors import RefinementError
from .prototypes import PrototypeMatrix

logger = logging.getLogger(__name__)


class ProjectionBlock(nn.Module):
    """Per-row affine map + normalization over the class dimension + ReLU.

    The affine map is a single spatial position, so it is a plain linear
    layer. Identity mode (no affine, no normalization) exists solely for
    oracle tests.
    """

    def __init__(self, d: int, d_latent: int | None = None, *, identity: bool = False):
        super().__init__()
        self.identity = identity
        self.d = d
        self.d_latent = d if d_latent is None else d_latent
        if identity:
            if self.d_latent != d:
                raise RefinementError("identity mode requires d_latent == d")
            self.affine = None
            self.norm = None
        else:
            self.affine = nn.Linear(d, self.d_latent)
            self.norm = nn.BatchNorm1d(self.d_latent)

    def forward(self, rows: torch.Tensor) -> torch.Tensor:
        if rows.ndim != 2 or rows.shape[1] != self.d:
            raise RefinementError(
                f"projection block expects [n, {self.d}] rows, got {tuple(rows.shape)}"
            )
        if self.identity:
            return torch.relu(rows)
        return torch.relu(self.norm(self.affine(rows)))


class PrototypeRefiner(FreezableModule):
    def __init__(
        self,
        d: int,
        d_latent: int | None = None,
        *,
        identity: bool = False,
        row_softmax: bool = False,
        softmax_tau: float = 1.0,
    ):
        super().__init__()
        self.d = d
        self.block_cur = ProjectionBlock(d, d_latent, identity=identity)
        self.block_prev = ProjectionBlock(d, d_latent, identity=identity)
        # Both blocks start from the same weights: the initial weight matrix
        # is then a rectified Gram matrix, so a prototype's strongest
        # relation at the start is with itself for any row distribution.
        if not identity:
            self.block_prev.load_state_dict(self.block_cur.state_dict())
        self.row_softmax = row_softmax
        self.softmax_tau = softmax_tau
        if row_softmax:
            logger.warning("row_softmax on relation weights enabled: non-default variant")

    def forward(self, p_cur: torch.Tensor, p_prev: torch.Tensor) -> torch.Tensor:
        weights = self.block_cur(p_cur) @ self.block_prev(p_prev).T
        if self.row_softmax:
            weights = torch.softmax(weights / self.softmax_tau, dim=1)
        return weights


def relation_weights(
    p_init: PrototypeMatrix, p_pre: PrototypeMatrix, refiner: PrototypeRefiner
) -> torch.Tensor:
    """Pairwise relation weights, [n_init, n_pre]."""
    if p_init.d != p_pre.d or p_init.d != refiner.d:
        raise RefinementError(
            f"dimension mismatch: init d={p_init.d}, pre d={p_pre.d}, refiner d={refiner.d}"
        )
    if p_pre.n_classes < 1:
        raise RefinementError("previous prototype matrix is empty")
    return refiner(p_init.rows, p_pre.rows)


def refine(
    p_init: PrototypeMatrix, p_pre: PrototypeMatrix, refiner: PrototypeRefiner
) -> PrototypeMatrix:
    """Weighted recombination of previous prototypes; registry from p_init."""
    weights = relation_weights(p_init, p_pre, refiner)
    return PrototypeMatrix(
        rows=weights @ p_pre.rows, registry=dict(p_init.registry), learnable=False
    )
