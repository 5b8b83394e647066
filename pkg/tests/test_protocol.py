import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from incproto.errors import ProtocolError, SamplingError
from incproto.protocol import (
    SplitManifest,
    build_schedule,
    cumulative_test_set,
    load_manifest,
    sample_episode,
    sample_query_set,
    write_manifest,
)


def make_manifest(labels, n_train, n_test, prefix=""):
    train = [(f"{prefix}{lab}/t{i}", lab) for lab in labels for i in range(n_train)]
    test = [(f"{prefix}{lab}/x{i}", lab) for lab in labels for i in range(n_test)]
    return SplitManifest(train=train, test=test)


class TestBuildSchedule:
    def test_hundred_class_layout(self):
        # 55 base classes + 9 sessions x 5 classes -> 10 sessions, 100 classes
        base = make_manifest([f"b{i}" for i in range(55)], 3, 2)
        incs = [
            make_manifest([f"n{s}_{j}" for j in range(5)], 6, 2, prefix=f"s{s}/")
            for s in range(9)
        ]
        schedule = build_schedule(base, incs, n_way=5, k_shot=5, seed=0)
        assert len(schedule.sessions) == 10
        all_labels = [lab for s in schedule.sessions for lab in s.label_space]
        assert len(all_labels) == 100
        assert len(set(all_labels)) == 100

    def test_single_session_schedule(self):
        base = make_manifest(["a", "b"], 4, 2)
        schedule = build_schedule(base, [], n_way=1, k_shot=1)
        assert len(schedule.sessions) == 1

    def test_label_overlap_rejected(self):
        base = make_manifest(["a", "b"], 3, 1)
        inc = make_manifest(["b", "c"], 3, 1)
        with pytest.raises(ProtocolError):
            build_schedule(base, [inc], n_way=2, k_shot=2)

    def test_undersupplied_class_rejected(self):
        base = make_manifest(["a", "b", "c"], 3, 1)
        inc = make_manifest(["d", "e"], 2, 1)
        with pytest.raises(ProtocolError):
            build_schedule(base, [inc], n_way=2, k_shot=3)

    def test_truncation_to_n_by_k(self):
        base = make_manifest(["a", "b", "c"], 3, 1)
        inc = make_manifest(["d", "e", "f"], 7, 2)
        schedule = build_schedule(base, [inc], n_way=2, k_shot=3, seed=5)
        session = schedule.sessions[1]
        assert len(session.label_space) == 2
        assert len(session.train_manifest) == 6
        counts = {}
        for _, lab in session.train_manifest:
            counts[lab] = counts.get(lab, 0) + 1
        assert all(c == 3 for c in counts.values())
        # test manifest restricted to the selected classes
        assert {lab for _, lab in session.test_manifest} == set(session.label_space)

    def test_truncation_is_seeded(self):
        base = make_manifest(["a", "b"], 3, 1)
        inc = make_manifest(["d", "e"], 8, 1)
        s1 = build_schedule(base, [inc], n_way=2, k_shot=3, seed=1)
        s2 = build_schedule(base, [inc], n_way=2, k_shot=3, seed=1)
        s3 = build_schedule(base, [inc], n_way=2, k_shot=3, seed=2)
        assert s1.sessions[1].train_manifest == s2.sessions[1].train_manifest
        assert s1.sessions[1].train_manifest != s3.sessions[1].train_manifest


class TestCumulativeTestSet:
    def test_base_only(self):
        base = make_manifest(["a"], 2, 3)
        schedule = build_schedule(base, [], n_way=1, k_shot=1)
        assert cumulative_test_set(schedule, 0) == base.test

    def test_sizes_add_up(self):
        base = make_manifest(["a"], 2, 100)
        incs = [
            make_manifest(["b"], 2, 10, prefix="s1/"),
            make_manifest(["c"], 2, 10, prefix="s2/"),
        ]
        schedule = build_schedule(base, incs, n_way=1, k_shot=2)
        assert len(cumulative_test_set(schedule, 2)) == 120

    def test_full_union_covers_all_classes(self):
        base = make_manifest([f"b{i}" for i in range(55)], 2, 1)
        incs = [
            make_manifest([f"n{s}_{j}" for j in range(5)], 5, 1, prefix=f"s{s}/")
            for s in range(9)
        ]
        schedule = build_schedule(base, incs, n_way=5, k_shot=5)
        union = cumulative_test_set(schedule, 9)
        # independent count of distinct labels in the union
        distinct = set()
        for _, lab in union:
            distinct.add(lab)
        assert len(distinct) == 100

    def test_out_of_range(self):
        base = make_manifest(["a"], 2, 1)
        schedule = build_schedule(base, [], n_way=1, k_shot=1)
        with pytest.raises(ProtocolError):
            cumulative_test_set(schedule, 1)
        with pytest.raises(ProtocolError):
            cumulative_test_set(schedule, -1)


class TestSampleEpisode:
    def setup_method(self):
        self.manifest = make_manifest([f"c{i}" for i in range(55)], 10, 0).train

    def test_shape(self):
        episode = sample_episode(self.manifest, 5, 5, np.random.default_rng(0))
        assert len(episode.support) == 25
        assert len(episode.label_set) == 5
        refs = [r for r, _ in episode.support]
        assert len(set(refs)) == 25

    def test_insufficient_classes(self):
        with pytest.raises(SamplingError):
            sample_episode(self.manifest, 56, 2, np.random.default_rng(0))

    def test_insufficient_shots(self):
        with pytest.raises(SamplingError):
            sample_episode(self.manifest, 5, 11, np.random.default_rng(0))

    def test_seed_reproducibility(self):
        e1 = sample_episode(self.manifest, 5, 5, np.random.default_rng(9))
        e2 = sample_episode(self.manifest, 5, 5, np.random.default_rng(9))
        assert e1 == e2


class TestSampleQuerySet:
    def test_covers_every_class(self):
        manifest = make_manifest([f"c{i}" for i in range(10)], 5, 0).train
        query = sample_query_set(manifest, 2, np.random.default_rng(0))
        assert len(query.samples) == 20
        assert {lab for _, lab in query.samples} == {f"c{i}" for i in range(10)}

    def test_single_class_single_sample(self):
        manifest = [("only/one", "a")]
        query = sample_query_set(manifest, 1, np.random.default_rng(0))
        assert query.samples == [("only/one", "a")]

    def test_undersupply(self):
        manifest = [("r0", "a"), ("r1", "a"), ("r2", "b")]
        with pytest.raises(SamplingError):
            sample_query_set(manifest, 2, np.random.default_rng(0))

    def test_seed_reproducibility(self):
        manifest = make_manifest([f"c{i}" for i in range(6)], 7, 0).train
        q1 = sample_query_set(manifest, 3, np.random.default_rng(4))
        q2 = sample_query_set(manifest, 3, np.random.default_rng(4))
        assert q1 == q2


@st.composite
def random_layouts(draw):
    n_base = draw(st.integers(min_value=3, max_value=12))
    n_sessions = draw(st.integers(min_value=0, max_value=4))
    n_way = draw(st.integers(min_value=1, max_value=3))
    k_shot = draw(st.integers(min_value=1, max_value=3))
    supply = draw(st.integers(min_value=0, max_value=4))
    test_per_class = draw(st.integers(min_value=1, max_value=3))
    return n_base, n_sessions, n_way, k_shot, supply, test_per_class


@given(random_layouts(), st.integers(min_value=0, max_value=2**31 - 1))
@settings(max_examples=60, deadline=None)
def test_schedule_invariants(layout, seed):
    n_base, n_sessions, n_way, k_shot, supply, test_per_class = layout
    base = make_manifest([f"b{i}" for i in range(n_base)], k_shot + supply, test_per_class)
    incs = [
        make_manifest(
            [f"s{s}_{j}" for j in range(n_way)],
            k_shot + supply,
            test_per_class,
            prefix=f"i{s}/",
        )
        for s in range(n_sessions)
    ]
    schedule = build_schedule(base, incs, n_way, k_shot, seed=seed)

    spaces = [set(s.label_space) for s in schedule.sessions]
    for i in range(len(spaces)):
        for j in range(i + 1, len(spaces)):
            assert not spaces[i] & spaces[j]

    sizes = [len(cumulative_test_set(schedule, l)) for l in range(len(schedule.sessions))]
    assert sizes == sorted(sizes)
    expected = 0
    for l, s in enumerate(schedule.sessions):
        expected += len(s.test_manifest)
        assert sizes[l] == expected

    for s in schedule.sessions[1:]:
        assert len(s.label_space) == n_way
        assert len(s.train_manifest) == n_way * k_shot


@given(
    st.integers(min_value=2, max_value=8),
    st.integers(min_value=1, max_value=4),
    st.integers(min_value=0, max_value=2**31 - 1),
)
@settings(max_examples=40, deadline=None)
def test_episode_shape_property(n, k, seed):
    manifest = make_manifest([f"c{i}" for i in range(10)], 6, 0).train
    episode = sample_episode(manifest, n, min(k, 6), np.random.default_rng(seed))
    labels = [lab for _, lab in episode.support]
    assert len(set(labels)) == n
    for lab in episode.label_set:
        assert labels.count(lab) == min(k, 6)


def test_manifest_round_trip(tmp_path):
    manifest = make_manifest(["dog", "cat"], 2, 1)
    path = tmp_path / "session0.tsv"
    write_manifest(path, manifest, session_index=0)
    loaded = load_manifest(path)
    assert loaded == manifest


def test_manifest_rejects_bad_lines(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("just-one-field\n")
    with pytest.raises(ProtocolError):
        load_manifest(path)
