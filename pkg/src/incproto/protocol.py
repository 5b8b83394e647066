"""Session schedule construction and episode/query sampling.

A class-incremental run is described by a ``SessionSchedule``: session 0 is
the base session with abundant data, every later session contributes exactly
``n_way`` new classes with ``k_shot`` training samples each, and label sets
of all sessions are pairwise disjoint.  All sampling here is a pure function
of (manifest, parameters, rng seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ProtocolError, SamplingError

# A manifest entry is (sample_ref, label). sample_ref is an opaque string:
# a path relative to the audio root, or a synthetic sample id.
ManifestEntry = tuple[str, str]


@dataclass(frozen=True)
class SplitManifest:
    """Train/test entries for one session."""

    train: list[ManifestEntry]
    test: list[ManifestEntry]


@dataclass(frozen=True)
class SessionDescriptor:
    index: int
    label_space: tuple[str, ...]
    train_manifest: list[ManifestEntry]
    test_manifest: list[ManifestEntry]

    @property
    def n_classes(self) -> int:
        return len(self.label_space)


@dataclass(frozen=True)
class SessionSchedule:
    sessions: list[SessionDescriptor]
    n_way: int
    k_shot: int

    def __len__(self) -> int:
        return len(self.sessions)

    def to_dict(self) -> dict:
        return {
            "n_way": self.n_way,
            "k_shot": self.k_shot,
            "sessions": [
                {
                    "index": s.index,
                    "label_space": list(s.label_space),
                    "train_manifest": [list(e) for e in s.train_manifest],
                    "test_manifest": [list(e) for e in s.test_manifest],
                }
                for s in self.sessions
            ],
        }

    @staticmethod
    def from_dict(data: dict) -> "SessionSchedule":
        sessions = [
            SessionDescriptor(
                index=s["index"],
                label_space=tuple(s["label_space"]),
                train_manifest=[tuple(e) for e in s["train_manifest"]],
                test_manifest=[tuple(e) for e in s["test_manifest"]],
            )
            for s in data["sessions"]
        ]
        return SessionSchedule(sessions=sessions, n_way=data["n_way"], k_shot=data["k_shot"])


@dataclass(frozen=True)
class Episode:
    """N-way K-shot support set drawn from the base session."""

    support: list[ManifestEntry]
    label_set: tuple[str, ...]


@dataclass(frozen=True)
class QuerySet:
    samples: list[ManifestEntry] = field(default_factory=list)


def distinct_labels(entries: list[ManifestEntry]) -> list[str]:
    """Labels in first-seen order."""
    seen: dict[str, None] = {}
    for _, label in entries:
        seen.setdefault(label, None)
    return list(seen)


def group_by_label(entries: list[ManifestEntry]) -> dict[str, list[ManifestEntry]]:
    groups: dict[str, list[ManifestEntry]] = {}
    for entry in entries:
        groups.setdefault(entry[1], []).append(entry)
    return groups


def _session_label_space(manifest: SplitManifest, index: int) -> tuple[str, ...]:
    labels = distinct_labels(manifest.train)
    space = set(labels)
    for _, label in manifest.test:
        if label not in space:
            raise ProtocolError(
                f"session {index}: test label {label!r} missing from the train manifest"
            )
    return tuple(labels)


def build_schedule(
    base_manifest: SplitManifest,
    incremental_manifests: list[SplitManifest],
    n_way: int,
    k_shot: int,
    *,
    seed: int = 0,
) -> SessionSchedule:
    """Validate manifests and assemble the session schedule.

    Incremental train manifests oversupplied in classes or shots are cut down
    to exactly ``n_way`` classes x ``k_shot`` samples by seeded sampling, so
    different seeds yield different few-shot trials over the same data.
    """
    if n_way < 1 or k_shot < 1:
        raise ProtocolError(f"n_way and k_shot must be >= 1, got {n_way}/{k_shot}")
    if not base_manifest.train:
        raise ProtocolError("base session train manifest is empty")

    rng = np.random.default_rng(seed)
    sessions = [
        SessionDescriptor(
            index=0,
            label_space=_session_label_space(base_manifest, 0),
            train_manifest=list(base_manifest.train),
            test_manifest=list(base_manifest.test),
        )
    ]

    for offset, manifest in enumerate(incremental_manifests, start=1):
        groups = group_by_label(manifest.train)
        labels = distinct_labels(manifest.train)
        if len(labels) < n_way:
            raise ProtocolError(
                f"session {offset}: {len(labels)} classes supplied, {n_way} required"
            )
        if len(labels) > n_way:
            keep_idx = sorted(rng.choice(len(labels), size=n_way, replace=False))
            labels = [labels[i] for i in keep_idx]
        label_set = set(labels)

        train: list[ManifestEntry] = []
        for label in labels:
            candidates = groups[label]
            if len(candidates) < k_shot:
                raise ProtocolError(
                    f"session {offset}: class {label!r} has {len(candidates)} "
                    f"train samples, {k_shot} required"
                )
            if len(candidates) > k_shot:
                chosen = sorted(rng.choice(len(candidates), size=k_shot, replace=False))
                candidates = [candidates[i] for i in chosen]
            train.extend(candidates)

        test = [entry for entry in manifest.test if entry[1] in label_set]
        sessions.append(
            SessionDescriptor(
                index=offset,
                label_space=tuple(labels),
                train_manifest=train,
                test_manifest=test,
            )
        )

    seen: set[str] = set()
    for descriptor in sessions:
        overlap = seen.intersection(descriptor.label_space)
        if overlap:
            raise ProtocolError(
                f"label spaces overlap at session {descriptor.index}: {sorted(overlap)}"
            )
        seen.update(descriptor.label_space)

    return SessionSchedule(sessions=sessions, n_way=n_way, k_shot=k_shot)


def cumulative_test_set(schedule: SessionSchedule, l: int) -> list[ManifestEntry]:
    """Union of the test manifests of sessions 0..l, in session order."""
    if not 0 <= l < len(schedule.sessions):
        raise ProtocolError(f"session index {l} out of range 0..{len(schedule.sessions) - 1}")
    combined: list[ManifestEntry] = []
    for descriptor in schedule.sessions[: l + 1]:
        combined.extend(descriptor.test_manifest)
    return combined


def sample_episode(
    base_train_manifest: list[ManifestEntry],
    n: int,
    k: int,
    rng: np.random.Generator,
) -> Episode:
    """Draw an N-way K-shot support set from the base training data."""
    groups = group_by_label(base_train_manifest)
    eligible = [label for label in distinct_labels(base_train_manifest) if len(groups[label]) >= k]
    if len(eligible) < n:
        raise SamplingError(
            f"need {n} classes with >= {k} samples, only {len(eligible)} available"
        )
    chosen = rng.choice(len(eligible), size=n, replace=False)
    labels = [eligible[i] for i in chosen]
    support: list[ManifestEntry] = []
    for label in labels:
        candidates = groups[label]
        picks = rng.choice(len(candidates), size=k, replace=False)
        support.extend(candidates[i] for i in picks)
    return Episode(support=support, label_set=tuple(labels))


def sample_query_set(
    base_train_manifest: list[ManifestEntry],
    q_per_class: int,
    rng: np.random.Generator,
) -> QuerySet:
    """Draw q samples per base class; the query set covers every base class."""
    if q_per_class < 1:
        raise SamplingError(f"q_per_class must be >= 1, got {q_per_class}")
    groups = group_by_label(base_train_manifest)
    samples: list[ManifestEntry] = []
    for label in distinct_labels(base_train_manifest):
        candidates = groups[label]
        if len(candidates) < q_per_class:
            raise SamplingError(
                f"class {label!r} has {len(candidates)} samples, {q_per_class} required"
            )
        picks = rng.choice(len(candidates), size=q_per_class, replace=False)
        samples.extend(candidates[i] for i in picks)
    if not samples:
        raise SamplingError("query set is empty")
    return QuerySet(samples=samples)


def load_manifest(path: str | Path) -> SplitManifest:
    """Read a tab-separated manifest: sample_ref, label, session_index, split."""
    train: list[ManifestEntry] = []
    test: list[ManifestEntry] = []
    path = Path(path)
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ProtocolError(f"{path}:{lineno}: expected 4 tab-separated fields")
        ref, label, _, split = parts
        if split == "train":
            train.append((ref, label))
        elif split == "test":
            test.append((ref, label))
        else:
            raise ProtocolError(f"{path}:{lineno}: unknown split {split!r}")
    return SplitManifest(train=train, test=test)


def write_manifest(path: str | Path, manifest: SplitManifest, session_index: int) -> None:
    lines = [
        f"{ref}\t{label}\t{session_index}\ttrain" for ref, label in manifest.train
    ] + [f"{ref}\t{label}\t{session_index}\ttest" for ref, label in manifest.test]
    Path(path).write_text("\n".join(lines) + "\n")
