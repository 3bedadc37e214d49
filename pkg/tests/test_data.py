from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedzsl.data import (
    AttributeTable,
    DataError,
    SampleSet,
    SplitSpec,
    SyntheticSpec,
    check_plan,
    generate_synthetic,
    largest_remainder,
    load_attribute_table,
    load_feature_set,
    load_matrix,
    load_split,
    partition_class_ratio,
    partition_iid,
    partition_noniid_dirichlet,
    partition_pccd,
    partition_pccd_imbalanced,
    subsample_ratio,
    write_attribute_table,
    write_feature_set,
    write_matrix,
    write_split,
)


def _labelled(n_classes: int, per_class: int, d: int = 3) -> SampleSet:
    labels = np.repeat(np.arange(n_classes), per_class)
    return SampleSet(np.arange(len(labels)), labels, np.ones((len(labels), d)))


def test_counting_example():
    ds = generate_synthetic(SyntheticSpec(n_classes=30, n_seen=25, train_per_class=20, test_per_class=20))
    assert len(ds.train) == 500
    assert len(ds.test_unseen.classes()) == 5
    assert set(ds.train.classes()) == set(ds.split.seen)
    assert set(ds.test_unseen.classes()) == set(ds.split.unseen)
    ds.split.check(ds.table)


def test_noiseless_features_are_rectified_map():
    ds = generate_synthetic(SyntheticSpec(noise=0.0, seed=4))
    for c in ds.split.seen:
        feats = ds.train.features[ds.train.labels == c]
        expected = np.maximum(ds.feature_map @ ds.table.row(c), 0.0)
        np.testing.assert_allclose(feats, np.broadcast_to(expected, feats.shape), rtol=1e-12, atol=1e-14)
        assert np.all(feats == feats[0])


def test_generation_is_bit_identical_per_seed():
    a = generate_synthetic(SyntheticSpec(seed=9))
    b = generate_synthetic(SyntheticSpec(seed=9))
    c = generate_synthetic(SyntheticSpec(seed=10))
    assert a.train.features.tobytes() == b.train.features.tobytes()
    assert a.table.rows.tobytes() == b.table.rows.tobytes()
    assert a.train.features.tobytes() != c.train.features.tobytes()


def test_synthetic_rows_have_equal_norm_and_block_structure():
    ds = generate_synthetic(SyntheticSpec(seed=1))
    norms = np.linalg.norm(ds.table.rows, axis=1)
    assert np.allclose(norms, math.sqrt(16))
    unit = ds.table.rows / norms[:, None]
    cos = unit @ unit.T
    same = np.arange(30)[:, None] // 5 == np.arange(30)[None, :] // 5
    off = ~np.eye(30, dtype=bool)
    assert cos[same & off].mean() > cos[~same].mean() + 0.3


@pytest.mark.parametrize(
    "kwargs", [{"n_seen": 30}, {"d_a": 0}, {"train_per_class": 0}, {"noise": -1.0}, {"attr_norm": 0.0}]
)
def test_degenerate_spec_rejected(kwargs):
    with pytest.raises(DataError):
        generate_synthetic(SyntheticSpec(**kwargs))


def test_attribute_table_invariants():
    with pytest.raises(DataError, match="all-zero"):
        AttributeTable([0, 1], [[1.0, 0.0], [0.0, 0.0]])
    with pytest.raises(DataError, match="duplicate"):
        AttributeTable([0, 0], [[1.0, 0.0], [0.0, 1.0]])
    t = AttributeTable([5, 2], [[1.0, 0.0], [0.0, 1.0]])
    assert list(t.positions([2, 5])) == [1, 0]
    with pytest.raises(DataError, match="unknown class 7"):
        t.positions([7])


def test_split_must_be_disjoint():
    with pytest.raises(DataError):
        SplitSpec((1, 2), (2, 3))


def test_attribute_csv_example(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("class_id,a_0,a_1,a_2,a_3,a_4\n0,1,0,0,0,0\n1,0,1,0,0,0\n2,0,0,1,0,0.5\n")
    t = load_attribute_table(p)
    assert (t.n_classes, t.d_a) == (3, 5)
    with pytest.raises(DataError, match="dimension mismatch"):
        load_attribute_table(p, d_a=4)


def test_feature_csv_errors(tmp_path, tiny_table):
    p = tmp_path / "f.csv"
    p.write_text("sample_id,class_id,v_0,v_1\n0,1,0.5,1.0\n1,99,0.1,0.2\n")
    with pytest.raises(DataError, match="unknown class"):
        load_feature_set(p, tiny_table)
    p.write_text("sample_id,class_id,v_0,v_1\n0,1,0.5,abc\n")
    with pytest.raises(DataError, match="malformed numeric field"):
        load_feature_set(p, tiny_table)
    p.write_text("sample_id,class_id,v_0,v_1\n0,1,0.5,1.0\n")
    with pytest.raises(DataError, match="dimension mismatch"):
        load_feature_set(p, tiny_table, d_in=3)


@pytest.mark.parametrize("content", ["", "class_id,a_0\n"])
def test_empty_files_report_no_rows(tmp_path, content, tiny_table):
    p = tmp_path / "x.csv"
    p.write_text(content)
    with pytest.raises(DataError, match="no rows"):
        load_attribute_table(p)
    with pytest.raises(DataError, match="no rows"):
        load_feature_set(p, tiny_table)


def test_csv_round_trip_is_exact(tmp_path, small_ds):
    write_attribute_table(small_ds.table, tmp_path / "a.csv")
    write_feature_set(small_ds.train, tmp_path / "t.csv")
    write_split(small_ds.split, tmp_path / "s.csv")
    write_matrix(small_ds.table.rows, tmp_path / "m.csv")
    table = load_attribute_table(tmp_path / "a.csv")
    train = load_feature_set(tmp_path / "t.csv", table)
    assert table.rows.tobytes() == small_ds.table.rows.tobytes()
    assert train.features.tobytes() == small_ds.train.features.tobytes()
    assert np.array_equal(train.ids, small_ds.train.ids)
    assert load_split(tmp_path / "s.csv", table) == small_ds.split
    assert np.array_equal(load_matrix(tmp_path / "m.csv"), small_ds.table.rows)


def test_pccd_benchmark_shape():
    train = _labelled(150, 2)
    plan = partition_pccd(train, range(150), 10, seed=0)
    sets = [set(a.classes) for a in plan.assignments]
    assert all(len(s) == 15 for s in sets)
    assert set().union(*sets) == set(range(150))
    assert sum(len(s) for s in sets) == 150
    check_plan(plan, train, range(150))


def test_pccd_remainder_and_single_client():
    train = _labelled(10, 3)
    plan = partition_pccd(train, range(10), 3, seed=5)
    assert [len(a.classes) for a in plan.assignments] == [4, 3, 3]
    for a in plan.assignments:
        assert set(train.labels[a.indices]) == set(a.classes)
        assert len(a.indices) == 3 * len(a.classes)
    one = partition_pccd(train, range(10), 1, seed=5)
    assert one.assignments[0].classes == tuple(range(10))
    with pytest.raises(DataError):
        partition_pccd(train, range(10), 11, seed=5)


def test_imbalanced_constraints():
    train = _labelled(40, 2)
    for seed in range(10):
        plan = partition_pccd_imbalanced(train, range(40), 10, 0.5, 2, seed)
        sizes = [len(a.classes) for a in plan.assignments]
        assert min(sizes) >= 2 and sum(sizes) == 40
        check_plan(plan, train, range(40))
    forced = partition_pccd_imbalanced(_labelled(4, 1), range(4), 2, 0.1, 2, seed=0)
    assert [len(a.classes) for a in forced.assignments] == [2, 2]
    with pytest.raises(DataError, match="infeasible"):
        partition_pccd_imbalanced(train, range(40), 10, 0.5, 5, seed=0)


def test_imbalanced_large_alpha_is_near_uniform():
    train = _labelled(100, 1)
    for seed in range(20):
        plan = partition_pccd_imbalanced(train, range(100), 10, 1e6, 1, seed)
        sizes = [len(a.classes) for a in plan.assignments]
        assert max(sizes) / min(sizes) <= 2


def test_iid_and_noniid():
    train = _labelled(5, 100)
    plan = partition_iid(train, 10, seed=1)
    for a in plan.assignments:
        counts = np.bincount(train.labels[a.indices], minlength=5)
        assert list(counts) == [10] * 5
    sparse = partition_noniid_dirichlet(_labelled(20, 30), 10, 0.5, seed=0)
    cells = np.array([np.bincount(_labelled(20, 30).labels[a.indices], minlength=20) for a in sparse.assignments])
    assert (cells == 0).any()
    assert cells.sum() == 600
    for fn in (lambda t: partition_iid(t, 1, 0), lambda t: partition_noniid_dirichlet(t, 1, 0.5, 0)):
        p = fn(train)
        assert len(p.assignments[0].indices) == len(train)


def test_subsample_ratio_examples():
    train = _labelled(4, 60)
    plan = partition_pccd(train, range(4), 2, seed=0)
    assert subsample_ratio(plan, train, 1.0, seed=0).sizes() == plan.sizes()
    tenth = subsample_ratio(plan, train, 0.1, seed=0)
    for a in tenth.assignments:
        assert list(np.bincount(train.labels[a.indices])[list(a.classes)]) == [6] * len(a.classes)
    small = _labelled(2, 10)
    p = subsample_ratio(partition_pccd(small, range(2), 1, 0), small, 0.01, seed=0)
    assert p.sizes() == [2]
    with pytest.raises(DataError):
        subsample_ratio(plan, train, 0.0, seed=0)


def test_class_ratio_partition():
    train = _labelled(20, 2)
    plan = partition_class_ratio(train, range(20), 4, 0.3, seed=2)
    assert all(len(a.classes) == 6 for a in plan.assignments)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(0.0, 1.0, allow_nan=False), min_size=1, max_size=12).filter(lambda v: sum(v) > 0),
    st.integers(0, 200),
)
def test_largest_remainder_conserves_total(props, total):
    counts = largest_remainder(np.array(props), total)
    assert counts.sum() == total
    exact = np.array(props) / sum(props) * total
    assert np.all(np.abs(counts - exact) < 1.0 + 1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(1, 8), st.integers(0, 1000))
def test_partitions_conserve_samples(n_classes, K, seed):
    train = _labelled(n_classes, 7)
    plans = [partition_iid(train, K, seed), partition_noniid_dirichlet(train, K, 0.5, seed)]
    if K <= n_classes:
        plans.append(partition_pccd(train, range(n_classes), K, seed))
    for plan in plans:
        idx = np.concatenate([a.indices for a in plan.assignments])
        assert len(idx) == len(train) and len(np.unique(idx)) == len(train)
        again = {
            "iid": partition_iid(train, K, seed),
            "noniid_dirichlet": partition_noniid_dirichlet(train, K, 0.5, seed),
        }.get(plan.mode) or partition_pccd(train, range(n_classes), K, seed)
        assert all(np.array_equal(a.indices, b.indices) for a, b in zip(plan.assignments, again.assignments))
