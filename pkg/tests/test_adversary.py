from __future__ import annotations

import numpy as np
import pytest

from fedzsl.adversary import (
    Attack,
    AttackSpec,
    AttackWindow,
    backdoor_accuracy,
    estimate_feature_map,
    inject_into_batch,
    make_malicious_set,
    malicious_local_train,
    replacement_beta,
)
from fedzsl.data import SampleSet, SyntheticSpec, generate_synthetic
from fedzsl.defense import feature_magnitudes
from fedzsl.federation import AggregationConfig, ClientState, aggregate, aggregation_weights, local_train
from fedzsl.model import Hyper, ZslParams, init_params


@pytest.fixture(scope="module")
def ds():
    return generate_synthetic(SyntheticSpec(n_classes=12, n_seen=10, d_a=6, d_v=12, train_per_class=12, seed=8))


def attacked_client(ds, spec, k=0):
    seen = list(ds.split.seen)[:5]
    idx = np.flatnonzero(np.isin(ds.train.labels, seen))
    c = ClientState(k, tuple(seen), ds.train.subset(idx))
    fmap = estimate_feature_map(ds.train, ds.table)
    tr, te = make_malicious_set(spec, 12, ds.table, 0, clean_median=10.0, feature_map=fmap)
    c.attack = Attack(spec, tr, te)
    return c


def test_spec_invariants():
    for kw in ({"kind": "laser"}, {"beta": 0.5}, {"beta": "double"}, {"p_rep": 0.0}, {"p_rep": 1.5}, {"size": 0}, {"sigma": -1.0}):
        with pytest.raises(ValueError):
            AttackSpec(**{"kind": "background", "target": 0, **kw})
    with pytest.raises(ValueError):
        AttackWindow("multi", 5, 4)
    with pytest.raises(ValueError):
        AttackWindow("single", 0)


def test_windows():
    assert [AttackWindow("single", 3).active(r) for r in (2, 3, 4)] == [False, True, False]
    assert [AttackWindow("multi", 3, 5).active(r) for r in (2, 3, 5, 6)] == [False, True, True, False]
    assert [AttackWindow("all_after", 3).active(r) for r in (2, 3, 50)] == [False, True, True]


@pytest.mark.parametrize("kind", ["background", "style", "object"])
def test_malicious_sets(ds, kind):
    spec = AttackSpec(kind, target=2, size=50, test_size=30)
    fmap = estimate_feature_map(ds.train, ds.table)
    tr, te = make_malicious_set(spec, 12, ds.table, 0, clean_median=10.0, feature_map=fmap)
    assert len(tr) == 50 and len(te) == 30
    assert np.all(tr.labels == 2) and np.all(te.labels == 2)
    assert not set(tr.ids) & set(te.ids)
    assert np.all(tr.features >= 0)
    again = make_malicious_set(spec, 12, ds.table, 0, clean_median=10.0, feature_map=fmap)[0]
    assert np.array_equal(again.features, tr.features)


def test_background_magnitudes_below_margin(ds):
    tr, te = make_malicious_set(AttackSpec("background", target=0), 12, ds.table, 1, clean_median=10.0)
    assert feature_magnitudes(tr.features).max() <= 1.0
    assert feature_magnitudes(te.features).max() <= 1.0


def test_correlation_ordering(ds):
    fmap = estimate_feature_map(ds.train, ds.table)
    mags = {}
    for kind in ("background", "style", "object"):
        tr, _ = make_malicious_set(AttackSpec(kind, target=0), 12, ds.table, 0, clean_median=10.0, feature_map=fmap)
        mags[kind] = float(np.median(feature_magnitudes(tr.features)))
    assert mags["background"] < mags["style"] < mags["object"]


def test_feature_map_recovers_generator(ds):
    clean = generate_synthetic(SyntheticSpec(n_classes=12, n_seen=10, d_a=6, d_v=12, noise=0.0, seed=8))
    fmap = estimate_feature_map(clean.train, clean.table)
    pred = np.maximum(clean.table.rows[clean.table.positions(clean.train.labels)] @ fmap.T, 0)
    # rectification makes the fit approximate; it still reconstructs most mass
    assert np.linalg.norm(pred - clean.train.features) < 0.5 * np.linalg.norm(clean.train.features)


def test_feature_map_required(ds):
    with pytest.raises(ValueError):
        make_malicious_set(AttackSpec("object", target=0), 12, ds.table, 0, clean_median=1.0)
    with pytest.raises(ValueError):
        make_malicious_set(AttackSpec("background", target=99), 12, ds.table, 0, clean_median=1.0)


def test_injection_examples():
    rng = np.random.default_rng(0)
    X = np.abs(rng.normal(size=(64, 5)))
    labels = np.arange(64) % 7
    mal = np.abs(rng.normal(size=(10, 5)))
    X0, l0, m0 = inject_into_batch(X, labels, mal, 3, 0.0, 0.05, np.random.default_rng(1))
    assert np.array_equal(X0, X) and np.array_equal(l0, labels) and not m0.any()
    X1, l1, m1 = inject_into_batch(X, labels, mal, 3, 1.0, 0.05, np.random.default_rng(1))
    assert m1.all() and np.all(l1 == 3) and np.all(X1 >= 0)
    Xa, la, ma = inject_into_batch(X, labels, mal, 3, 0.5, 0.05, np.random.default_rng(9))
    Xb, lb, mb = inject_into_batch(X, labels, mal, 3, 0.5, 0.05, np.random.default_rng(9))
    assert 18 <= ma.sum() <= 46
    assert np.array_equal(Xa, Xb) and np.array_equal(ma, mb)
    assert np.array_equal(Xa[~ma], X[~ma]) and np.array_equal(la[~ma], labels[~ma])
    assert X.shape == Xa.shape


def test_replacement_beta():
    assert replacement_beta(1.0, 0.25) == 4.0
    assert replacement_beta(0.5, 0.1) == pytest.approx(20.0)


def _dyadic(seed: int, shape) -> np.ndarray:
    return np.random.default_rng(seed).integers(-64, 64, size=shape) / 8.0


def test_replacement_identity_dyadic():
    """Power-of-two weights and dyadic parameters make every step exact."""
    for rule, counts in (("uniform", [1, 1, 1, 1]), ("class_ratio", [4, 2, 1, 1]), ("data_size", [2, 2, 2, 2])):
        cohort = [
            ClientState(k, tuple(range(n)), SampleSet(np.arange(n), np.arange(n), np.ones((n, 1))))
            for k, n in enumerate(counts)
        ]
        weights = aggregation_weights(cohort, AggregationConfig(rule))
        w = ZslParams(*(_dyadic(i, s) for i, s in enumerate([(3, 2), (2, 4), (4,), (4, 2), (2,)])))
        w_hat = ZslParams(*(_dyadic(10 + i, a.shape) for i, a in enumerate(w.arrays())))
        beta = replacement_beta(1.0, weights[0])
        updates = {k: w.zeros_like() for k in weights}
        updates[0] = (w_hat - w) * beta
        assert aggregate(w, updates, weights, 1.0).equals(w_hat)


def test_scaling_linearity_and_window_isolation(ds):
    spec = AttackSpec("style", target=int(ds.split.seen[0]), window=AttackWindow("single", 2))
    c = attacked_client(ds, spec)
    p = init_params(12, 12, 6, seed=0)
    space = np.arange(12)
    h = Hyper(mu=0.0)
    one = malicious_local_train(c, p, h, None, ds.table, space, seed=1, round_no=2, beta=1.0)
    ten = malicious_local_train(c, p, h, None, ds.table, space, seed=1, round_no=2, beta=10.0)
    assert ten.delta.equals(one.delta * 10.0)
    assert one.n_injected > 0
    honest = ClientState(0, c.classes, c.data)
    for r in (1, 3):
        a = malicious_local_train(c, p, h, None, ds.table, space, seed=1, round_no=r, beta=10.0)
        b = local_train(honest, p, h, None, ds.table, space, seed=1, round_no=r)
        assert a.delta.equals(b.delta) and a.n_injected == 0
    with pytest.raises(ValueError):
        malicious_local_train(honest, p, h, None, ds.table, space, seed=1, round_no=2)


def test_unresolved_replace_beta(ds):
    spec = AttackSpec("background", target=int(ds.split.seen[0]), beta="replace", window=AttackWindow("single", 1))
    c = attacked_client(ds, spec)
    with pytest.raises(ValueError):
        malicious_local_train(c, init_params(12, 12, 6, 0), Hyper(mu=0.0), None, ds.table, np.arange(12), seed=0, round_no=1)


def test_backdoor_accuracy_examples(ds):
    p = init_params(12, 12, 6, seed=0)
    spec = AttackSpec("background", target=3, test_size=500)
    _, te = make_malicious_set(spec, 12, ds.table, 0, clean_median=10.0)
    assert backdoor_accuracy(p, te, 3, ds.table, [3]) == 1.0
    p.w_g[:] = 0
    p.b_g = ds.table.row(3) * 10
    assert backdoor_accuracy(p, te, 3, ds.table, list(ds.table.class_ids)) == 1.0
    with pytest.raises(ValueError):
        backdoor_accuracy(p, te.subset(np.arange(0)), 3, ds.table, [3])


def test_backdoor_accuracy_near_chance_for_random_model():
    big = generate_synthetic(SyntheticSpec(n_classes=50, n_seen=40, d_a=16, d_v=16, train_per_class=2, seed=0))
    hits = []
    for s in range(5):
        p = init_params(16, 16, 16, seed=s, scale=1.0)
        p.w_f = np.random.default_rng(100 + s).normal(size=(16, 16))
        x = np.random.default_rng(200 + s).normal(size=(500, 16))
        te = SampleSet(np.arange(500), np.full(500, 7), np.abs(x))
        hits.append(backdoor_accuracy(p, te, 7, big.table, list(big.table.class_ids)))
    assert abs(np.mean(hits) - 1 / 50) <= 0.1
