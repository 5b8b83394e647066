"""Learnable metric scoring (embedding, prototype) pairs, plus classification.

A pair is encoded by concatenation into a 2d vector and pushed through three
affine stages with batch norm, ReLU and dropout between consecutive stages;
the last stage emits one scalar score. Classification takes the argmax score
over prototype rows (softmax over the same scores drives the training loss).
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .backbone import FreezableModule, module_dtype
from .errors import ModelError
from .prototypes import PrototypeMatrix


class RelationScorer(FreezableModule):
    def __init__(self, d: int, hidden: tuple[int, int] = (128, 64), dropout: float = 0.2):
        super().__init__()
        self.d = d
        h1, h2 = hidden
        self.stage1 = nn.Linear(2 * d, h1)
        self.norm1 = nn.BatchNorm1d(h1)
        self.drop1 = nn.Dropout(dropout)
        self.stage2 = nn.Linear(h1, h2)
        self.norm2 = nn.BatchNorm1d(h2)
        self.drop2 = nn.Dropout(dropout)
        self.stage3 = nn.Linear(h2, 1)

    def forward(self, pairs: torch.Tensor) -> torch.Tensor:
        if pairs.ndim != 2 or pairs.shape[1] != 2 * self.d:
            raise ModelError(
                f"expected [n, {2 * self.d}] pair batch, got {tuple(pairs.shape)}"
            )
        x = self.drop1(torch.relu(self.norm1(self.stage1(pairs))))
        x = self.drop2(torch.relu(self.norm2(self.stage2(x))))
        return self.stage3(x).squeeze(-1)

    def score_matrix(self, embeddings: torch.Tensor, rows: torch.Tensor) -> torch.Tensor:
        """Scores of every (embedding, prototype row) pair, [batch, n_rows]."""
        if embeddings.ndim == 1:
            embeddings = embeddings.unsqueeze(0)
        b, n = embeddings.shape[0], rows.shape[0]
        if embeddings.shape[1] != self.d or rows.shape[1] != self.d:
            raise ModelError(
                f"embedding dim {embeddings.shape[1]} / prototype dim {rows.shape[1]} "
                f"!= scorer dim {self.d}"
            )
        pairs = torch.cat(
            [
                embeddings.unsqueeze(1).expand(b, n, self.d),
                rows.unsqueeze(0).expand(b, n, self.d),
            ],
            dim=2,
        ).reshape(b * n, 2 * self.d)
        return self(pairs).reshape(b, n)


def relation_score(
    embedding: torch.Tensor, prototype: torch.Tensor, scorer: RelationScorer
) -> torch.Tensor:
    """Scalar relation score for one (embedding, prototype) pair, eval mode."""
    embedding = torch.as_tensor(embedding).to(module_dtype(scorer))
    prototype = torch.as_tensor(prototype).to(module_dtype(scorer))
    if embedding.ndim != 1 or prototype.ndim != 1 or embedding.shape != prototype.shape:
        raise ModelError(
            f"expected two length-{scorer.d} vectors, got "
            f"{tuple(embedding.shape)} and {tuple(prototype.shape)}"
        )
    scorer.eval()
    with torch.no_grad():
        return scorer(torch.cat([embedding, prototype]).unsqueeze(0))[0]


def classify(
    embedding: torch.Tensor,
    protos: PrototypeMatrix,
    scorer: RelationScorer,
) -> tuple[str, np.ndarray]:
    """Predicted class id and the per-class score vector (registry order).

    Ties break toward the lowest row index.
    """
    if protos.n_classes == 0:
        raise ModelError("cannot classify against an empty prototype matrix")
    embedding = torch.as_tensor(embedding).to(module_dtype(scorer))
    scorer.eval()
    with torch.no_grad():
        scores = scorer.score_matrix(embedding.unsqueeze(0), protos.rows)[0]
    values = scores.cpu().numpy()
    return protos.class_of(int(np.argmax(values))), values


def classify_batch(
    embeddings: torch.Tensor,
    protos: PrototypeMatrix,
    scorer: RelationScorer,
    *,
    chunk: int = 256,
) -> tuple[list[str], np.ndarray]:
    """Vectorized classify over a batch of embeddings."""
    if protos.n_classes == 0:
        raise ModelError("cannot classify against an empty prototype matrix")
    scorer.eval()
    out = []
    with torch.no_grad():
        for start in range(0, embeddings.shape[0], chunk):
            out.append(
                scorer.score_matrix(embeddings[start : start + chunk], protos.rows)
            )
    scores = torch.cat(out, dim=0).cpu().numpy()
    ids = protos.ids_by_row()
    predicted = [ids[i] for i in np.argmax(scores, axis=1)]
    return predicted, scores
