"""Base-session optimization and the finetune forgetting baseline.

The episodic strategy simulates the incremental test scenario during base
training: each iteration draws one query set covering every base class and
``episodes_per_iter`` N-way K-shot support sets. Per episode, the base
prototypes of the sampled classes are swapped for fresh mean-embedding
prototypes, the merged matrix is refined, and the query set is scored
against it. Losses accumulate over the episodes before a single SGD step on
backbone, refiner, scorer and base prototypes jointly.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .bundle import ModelBundle
from .config import FinetuneConfig, TrainConfig
from .errors import TrainingError
from .prototypes import PrototypeMatrix, compute_prototype, merge, pseudo_base_subset
from .protocol import Episode, ManifestEntry, sample_episode, sample_query_set
from .refinement import refine


def embed_entries(
    bundle: ModelBundle,
    entries: list[ManifestEntry],
    store,
    *,
    train_mode: bool,
    grad: bool | None = None,
) -> tuple[torch.Tensor, list[str]]:
    """Stack features for the entries and run the backbone over them.

    ``train_mode`` picks the normalization mode; ``grad`` (default: same as
    train_mode) controls whether the forward stays in the autograd graph.
    Prototype generation runs eval-mode norm with gradients on, so support
    embeddings match the statistics test samples will see.
    """
    refs = [ref for ref, _ in entries]
    labels = [label for _, label in entries]
    batch = torch.as_tensor(store.batch(refs)).to(bundle.dtype)
    bundle.backbone.train(train_mode)
    if grad is None:
        grad = train_mode
    if grad:
        return bundle.backbone(batch), labels
    with torch.no_grad():
        return bundle.backbone(batch), labels


def episode_prototypes(
    bundle: ModelBundle, episode: Episode, store, *, grad: bool = True
) -> PrototypeMatrix:
    """Mean-embedding prototypes of the episode's support classes.

    Normalization statistics stay frozen (eval-mode norm) during prototype
    generation; with ``grad`` the result remains differentiable."""
    embeddings, labels = embed_entries(
        bundle, episode.support, store, train_mode=False, grad=grad
    )
    rows = []
    for label in episode.label_set:
        idx = [i for i, l in enumerate(labels) if l == label]
        rows.append(compute_prototype(embeddings[idx]))
    return PrototypeMatrix(
        rows=torch.stack(rows),
        registry={label: i for i, label in enumerate(episode.label_set)},
        learnable=False,
    )


def _check_finite(loss: torch.Tensor) -> None:
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite training loss: {float(loss)}")


def training_iteration(
    bundle: ModelBundle,
    train_entries: list[ManifestEntry],
    store,
    config: TrainConfig,
    rng: np.random.Generator,
    optimizer: torch.optim.Optimizer,
    *,
    use_refiner: bool = True,
) -> float:
    """One episodic iteration: sample, accumulate episode losses, one SGD step."""
    query = sample_query_set(train_entries, config.q_per_class, rng)
    episodes = [
        sample_episode(train_entries, config.n_way, config.k_shot, rng)
        for _ in range(config.episodes_per_iter)
    ]

    bundle.train_mode(True)
    # Build every episode's refined prototypes before embedding the queries:
    # support embeddings read frozen norm statistics and must not depend on
    # the query batch passing through the backbone first.
    refined_matrices = []
    for episode in episodes:
        kept = pseudo_base_subset(bundle.prototypes, episode.label_set)
        fresh = episode_prototypes(bundle, episode, store, grad=True)
        merged = merge(kept, fresh)
        refined_matrices.append(
            refine(merged, kept, bundle.refiner) if use_refiner else merged
        )

    query_embeddings, query_labels = embed_entries(bundle, query.samples, store, train_mode=True)

    reduction = "mean" if config.mean_loss else "sum"
    total = None
    for refined in refined_matrices:
        scores = bundle.scorer.score_matrix(query_embeddings, refined.rows)
        targets = torch.tensor(
            [refined.row_of(label) for label in query_labels], dtype=torch.long
        )
        loss = F.cross_entropy(scores, targets, reduction=reduction)
        total = loss if total is None else total + loss
    if config.mean_loss:
        total = total / len(episodes)

    _check_finite(total)
    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    return float(total.detach())


def plain_iteration(
    bundle: ModelBundle,
    train_entries: list[ManifestEntry],
    store,
    config: TrainConfig,
    rng: np.random.Generator,
    optimizer: torch.optim.Optimizer,
) -> float:
    """No-episodic ablation: minibatch cross-entropy straight against the
    base prototypes (mean reduction; no episode sampling, no refinement)."""
    batch_size = min(config.plain_batch_size, len(train_entries))
    picks = rng.choice(len(train_entries), size=batch_size, replace=False)
    batch = [train_entries[i] for i in picks]

    bundle.train_mode(True)
    embeddings, labels = embed_entries(bundle, batch, store, train_mode=True)
    scores = bundle.scorer.score_matrix(embeddings, bundle.prototypes.rows)
    targets = torch.tensor(
        [bundle.prototypes.row_of(label) for label in labels], dtype=torch.long
    )
    loss = F.cross_entropy(scores, targets)
    _check_finite(loss)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def train_base(
    bundle: ModelBundle,
    train_entries: list[ManifestEntry],
    store,
    config: TrainConfig,
    *,
    use_refiner: bool = True,
    episodic: bool = True,
    log_path: str | Path | None = None,
    checkpoint_callback: Callable[[ModelBundle, int], None] | None = None,
) -> ModelBundle:
    """Run training iterations up to the fixed budget (the convergence proxy)."""
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    optimizer = torch.optim.SGD(
        list(bundle.trainable_parameters()),
        lr=config.lr,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    scheduler = None
    if config.cosine_decay and config.max_iterations > 0:
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
            optimizer, T_max=config.max_iterations
        )

    log_file = open(log_path, "w") if log_path else None
    try:
        for iteration in range(config.max_iterations):
            if episodic:
                loss = training_iteration(
                    bundle, train_entries, store, config, rng, optimizer,
                    use_refiner=use_refiner,
                )
            else:
                loss = plain_iteration(bundle, train_entries, store, config, rng, optimizer)
            lr = optimizer.param_groups[0]["lr"]
            if scheduler is not None:
                scheduler.step()
            if log_file:
                log_file.write(
                    json.dumps(
                        {"iteration": iteration, "loss": loss, "lr": lr, "seed": config.seed}
                    )
                    + "\n"
                )
            if (
                checkpoint_callback is not None
                and config.checkpoint_every
                and (iteration + 1) % config.checkpoint_every == 0
            ):
                checkpoint_callback(bundle, iteration + 1)
    finally:
        if log_file:
            log_file.close()
    bundle.train_mode(False)
    return bundle


def finetune_session(
    bundle: ModelBundle,
    session_entries: list[ManifestEntry],
    store,
    config: FinetuneConfig,
) -> ModelBundle:
    """Forgetting baseline: expand the classifier with randomly initialized
    prototypes for the session's classes, then retrain the full model with
    cross-entropy on only the session's few samples."""
    if not session_entries:
        raise TrainingError("finetune session has no training samples")
    new_labels: list[str] = []
    for _, label in session_entries:
        if label not in new_labels and label not in bundle.prototypes.registry:
            new_labels.append(label)
    if not new_labels:
        raise TrainingError("finetune session introduced no new classes")

    d = bundle.d
    new_rows = torch.empty(len(new_labels), d, dtype=bundle.dtype)
    new_rows.normal_(0.0, 1.0 / math.sqrt(d))
    rows = nn.Parameter(torch.cat([bundle.prototypes.rows.detach(), new_rows]))
    registry = dict(bundle.prototypes.registry)
    for label in new_labels:
        registry[label] = len(registry)
    bundle.prototypes = PrototypeMatrix(rows=rows, registry=registry, learnable=True)

    bundle.set_frozen(False)
    bundle.train_mode(True)
    optimizer = torch.optim.SGD(
        list(bundle.trainable_parameters()), lr=config.lr, momentum=config.momentum
    )
    targets = torch.tensor(
        [bundle.prototypes.row_of(label) for _, label in session_entries], dtype=torch.long
    )
    for _ in range(config.steps):
        embeddings, _ = embed_entries(bundle, session_entries, store, train_mode=True)
        scores = bundle.scorer.score_matrix(embeddings, bundle.prototypes.rows)
        loss = F.cross_entropy(scores, targets)
        _check_finite(loss)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    bundle.train_mode(False)
    return bundle
