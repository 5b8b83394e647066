"""Incremental-session evaluation, forgetting metrics and run reports.

The proposed pipeline freezes backbone, refiner and scorer after base
training; each incremental session only appends mean-embedding prototypes
for its new classes and refines the merged matrix against the previous
session's prototypes. The finetune baseline instead retrains the whole
model on each session's few samples (the forgetting contrast).
"""

from __future__ import annotations

import datetime as _dt
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from .bundle import ModelBundle
from .config import FinetuneConfig
from .errors import IntegrityError, MetricError
from .prototypes import PrototypeMatrix, compute_prototype, merge
from .protocol import SessionSchedule, cumulative_test_set
from .refinement import refine
from .relation import classify_batch
from .training import embed_entries, finetune_session


@dataclass(frozen=True)
class SessionResult:
    session_index: int
    accuracy: float
    n_test: int
    n_classes_seen: int


@dataclass
class RunReport:
    sessions: list[SessionResult]
    aa: float
    pd: float
    config: dict | None
    seed: int | None
    method: str
    digests: dict[str, str] = field(default_factory=dict)
    schedule: dict | None = None
    started_at: str = ""
    finished_at: str = ""

    @property
    def accuracies(self) -> list[float]:
        return [s.accuracy for s in self.sessions]

    def to_dict(self) -> dict:
        """Deterministic payload; wall-clock timestamps live in the sidecar."""
        return {
            "method": self.method,
            "seed": self.seed,
            "sessions": [s.__dict__ for s in self.sessions],
            "aa": self.aa,
            "pd": self.pd,
            "digests": self.digests,
            "config": self.config,
            "schedule": self.schedule,
        }

    def meta_dict(self) -> dict:
        return {"started_at": self.started_at, "finished_at": self.finished_at}


def session_accuracy(predictions: Sequence[str], labels: Sequence[str]) -> float:
    if len(predictions) == 0 or len(labels) == 0:
        raise MetricError("cannot compute accuracy of an empty session")
    if len(predictions) != len(labels):
        raise MetricError(
            f"predictions ({len(predictions)}) and labels ({len(labels)}) differ in length"
        )
    correct = sum(1 for p, t in zip(predictions, labels) if p == t)
    return correct / len(labels)


def average_accuracy(accuracies: Sequence[float]) -> float:
    """Mean accuracy over ALL sessions, the base session included."""
    if len(accuracies) == 0:
        raise MetricError("cannot average an empty accuracy list")
    return sum(accuracies) / len(accuracies)


def performance_drop(accuracies: Sequence[float]) -> float:
    """Base-session accuracy minus last-session accuracy."""
    if len(accuracies) == 0:
        raise MetricError("cannot compute the drop of an empty accuracy list")
    return accuracies[0] - accuracies[-1]


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def evaluate_on(
    bundle: ModelBundle,
    protos: PrototypeMatrix,
    entries,
    store,
    *,
    batch_size: int = 256,
) -> float:
    """Eval-mode accuracy of the relation classifier over manifest entries."""
    predictions: list[str] = []
    labels: list[str] = []
    bundle.train_mode(False)
    for start in range(0, len(entries), batch_size):
        chunk = entries[start : start + batch_size]
        embeddings, chunk_labels = embed_entries(bundle, chunk, store, train_mode=False)
        predicted, _ = classify_batch(embeddings, protos, bundle.scorer, chunk=batch_size)
        predictions.extend(predicted)
        labels.extend(chunk_labels)
    return session_accuracy(predictions, labels)


def _check_fingerprint(bundle: ModelBundle, store) -> None:
    store_fp = getattr(store, "fingerprint", None)
    if bundle.feature_fingerprint and store_fp and bundle.feature_fingerprint != store_fp:
        raise IntegrityError(
            f"feature fingerprint mismatch: checkpoint {bundle.feature_fingerprint} "
            f"vs store {store_fp}"
        )


def run_incremental(
    bundle: ModelBundle,
    schedule: SessionSchedule,
    store,
    *,
    use_refiner: bool = True,
    carry: str = "refined",
    batch_size: int = 256,
    config_snapshot: dict | None = None,
    seed: int | None = None,
) -> RunReport:
    """Frozen-parameter session loop: expand, refine, evaluate cumulatively.

    ``carry`` picks which matrix becomes the next session's previous
    prototypes: "refined" hands the refined matrix forward; "unrefined"
    hands the merged (pre-refinement) matrix forward, so refinement inputs
    keep the base-prototype/mean-embedding makeup they had in training.
    Classification always uses the refined matrix of the current session.
    """
    if carry not in ("refined", "unrefined"):
        raise ValueError(f"unknown carry policy {carry!r}")
    started = _now()
    _check_fingerprint(bundle, store)
    bundle.set_frozen(True)
    digests_before = bundle.digests()

    protos = bundle.prototypes.detached()
    results: list[SessionResult] = []
    for descriptor in schedule.sessions:
        l = descriptor.index
        if l > 0:
            embeddings, labels = embed_entries(
                bundle, descriptor.train_manifest, store, train_mode=False
            )
            rows = []
            for label in descriptor.label_space:
                idx = [i for i, lab in enumerate(labels) if lab == label]
                rows.append(compute_prototype(embeddings[idx]))
            fresh = PrototypeMatrix(
                rows=torch.stack(rows),
                registry={label: i for i, label in enumerate(descriptor.label_space)},
                learnable=False,
            )
            previous = protos
            merged = merge(previous, fresh)
            if use_refiner:
                with torch.no_grad():
                    session_protos = refine(merged, previous, bundle.refiner).detached()
            else:
                session_protos = merged.detached()
            protos = merged.detached() if carry == "unrefined" else session_protos
        else:
            session_protos = protos

        test_entries = cumulative_test_set(schedule, l)
        accuracy = evaluate_on(
            bundle, session_protos, test_entries, store, batch_size=batch_size
        )
        results.append(
            SessionResult(
                session_index=l,
                accuracy=accuracy,
                n_test=len(test_entries),
                n_classes_seen=session_protos.n_classes,
            )
        )

        digests_after = bundle.digests()
        if digests_after != digests_before:
            changed = [k for k in digests_before if digests_before[k] != digests_after[k]]
            raise IntegrityError(
                f"frozen parameters changed during session {l}: {changed}"
            )

    accuracies = [r.accuracy for r in results]
    return RunReport(
        sessions=results,
        aa=average_accuracy(accuracies),
        pd=performance_drop(accuracies),
        config=config_snapshot,
        seed=seed,
        method="proposed" if use_refiner else "proposed-no-refine",
        digests=digests_before,
        schedule=schedule.to_dict(),
        started_at=started,
        finished_at=_now(),
    )


def run_finetune(
    bundle: ModelBundle,
    schedule: SessionSchedule,
    store,
    finetune_config: FinetuneConfig,
    *,
    batch_size: int = 256,
    config_snapshot: dict | None = None,
    seed: int | None = None,
) -> RunReport:
    """Finetune baseline loop. Mutates the bundle; load a fresh checkpoint
    per run."""
    started = _now()
    _check_fingerprint(bundle, store)
    if seed is not None:
        torch.manual_seed(seed)

    results: list[SessionResult] = []
    for descriptor in schedule.sessions:
        l = descriptor.index
        if l > 0:
            finetune_session(bundle, descriptor.train_manifest, store, finetune_config)
        test_entries = cumulative_test_set(schedule, l)
        accuracy = evaluate_on(
            bundle, bundle.prototypes.detached(), test_entries, store, batch_size=batch_size
        )
        results.append(
            SessionResult(
                session_index=l,
                accuracy=accuracy,
                n_test=len(test_entries),
                n_classes_seen=bundle.prototypes.n_classes,
            )
        )

    accuracies = [r.accuracy for r in results]
    return RunReport(
        sessions=results,
        aa=average_accuracy(accuracies),
        pd=performance_drop(accuracies),
        config=config_snapshot,
        seed=seed,
        method="finetune",
        digests=bundle.digests(),
        schedule=schedule.to_dict(),
        started_at=started,
        finished_at=_now(),
    )


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(text)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def write_report(report: RunReport, path: str | Path) -> None:
    """report.json is bit-stable for identical runs; timestamps go to the
    .meta.json sidecar."""
    path = Path(path)
    _atomic_write_text(path, json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    meta_path = path.with_name(path.stem + ".meta.json")
    _atomic_write_text(meta_path, json.dumps(report.meta_dict(), indent=2) + "\n")


def load_report(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def aggregate_reports(reports: list[dict]) -> dict:
    """Seed-aggregate: mean per-session accuracy, mean AA, mean PD."""
    if not reports:
        raise MetricError("no reports to aggregate")
    lengths = {len(r["sessions"]) for r in reports}
    if len(lengths) != 1:
        raise MetricError(f"reports disagree on session count: {sorted(lengths)}")
    n_sessions = lengths.pop()
    mean_acc = [
        average_accuracy([r["sessions"][i]["accuracy"] for r in reports])
        for i in range(n_sessions)
    ]
    return {
        "n_runs": len(reports),
        "seeds": [r["seed"] for r in reports],
        "method": reports[0]["method"],
        "mean_session_accuracy": mean_acc,
        "mean_aa": average_accuracy([r["aa"] for r in reports]),
        "mean_pd": average_accuracy([r["pd"] for r in reports]),
    }
