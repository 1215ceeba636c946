"""Feature reducer: triplet mining, analytic gradients, training quality."""

import numpy as np
import pytest

from oodkit.errors import DataError, DivergenceError, TripletError
from oodkit.sdr import (
    Mlp,
    Reducer,
    SdrConfig,
    mine_triplets,
    train_reducer,
    triplet_loss_and_grads,
)


def _finite_difference_grads(model, anchors, positives, negatives, margin, h=1e-5):
    grads = []
    for param in model.params:
        grad = np.zeros_like(param)
        it = np.nditer(param, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            original = param[idx]
            param[idx] = original + h
            up, _ = triplet_loss_and_grads(model, anchors, positives, negatives, margin)
            param[idx] = original - h
            down, _ = triplet_loss_and_grads(model, anchors, positives, negatives, margin)
            param[idx] = original
            grad[idx] = (up - down) / (2.0 * h)
        grads.append(grad)
    return grads


def test_analytic_gradients_match_finite_differences():
    """5-input / 4-hidden / 2-output net, central differences at h = 1e-5:
    every parameter gradient agrees to a relative error of 1e-4."""
    rng = np.random.default_rng(12)
    model = Mlp([5, 4, 2], rng)
    anchors = rng.normal(size=(6, 5))
    positives = rng.normal(size=(6, 5))
    negatives = rng.normal(size=(6, 5))
    loss, analytic = triplet_loss_and_grads(model, anchors, positives, negatives, 1.0)
    assert loss > 0.0  # hinge active for at least one triplet
    numeric = _finite_difference_grads(model, anchors, positives, negatives, 1.0)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.abs(a) + np.abs(n), 1e-8)
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    assert worst <= 1e-4, f"max relative gradient error {worst}"


def test_triplet_loss_non_negative():
    rng = np.random.default_rng(3)
    model = Mlp([4, 3], rng)
    for _ in range(50):
        a, p, n = (rng.normal(size=(5, 4)) for _ in range(3))
        loss, _ = triplet_loss_and_grads(model, a, p, n, margin=float(rng.uniform(0, 2)))
        assert loss >= 0.0


def test_satisfied_triplets_give_zero_loss_and_zero_grads():
    rng = np.random.default_rng(1)
    model = Mlp([3, 2], rng)
    anchors = rng.normal(size=(4, 3))
    negatives = anchors + 100.0  # far from the anchors in embedding space too
    loss, grads = triplet_loss_and_grads(model, anchors, anchors.copy(), negatives, 0.0)
    assert loss == 0.0
    assert all(np.all(g == 0.0) for g in grads)


def test_mine_triplets_two_by_two_structure():
    features = np.array([[0.0], [0.1], [5.0], [5.1]])
    labels = np.array([0, 0, 1, 1])
    triples = mine_triplets(features, labels, k_neighbors=3, seed=0)
    assert len(triples) == 4
    for a, p, n in triples:
        assert a != p
        assert labels[a] == labels[p]
        assert labels[a] != labels[n]
        # the only same-class candidate is the partner point
        assert p == (a ^ 1)


def test_mine_triplets_label_contract_on_blobs():
    rng = np.random.default_rng(7)
    features = np.concatenate([rng.normal(c, 1.0, size=(30, 4)) for c in (0.0, 6.0, -6.0)])
    labels = np.repeat([0, 1, 2], 30)
    triples = mine_triplets(features, labels, k_neighbors=15, seed=2)
    for a, p, n in triples:
        assert labels[a] == labels[p] and a != p
        assert labels[a] != labels[n]


def test_mine_triplets_k1_picks_brute_force_nearest_neighbor():
    rng = np.random.default_rng(9)
    features = rng.normal(size=(40, 3))
    labels = np.repeat([0, 1], 20)
    triples = mine_triplets(features, labels, k_neighbors=1, seed=0)
    for a, p, _ in triples:
        same = [i for i in range(40) if labels[i] == labels[a] and i != a]
        dists = [np.linalg.norm(features[a] - features[i]) for i in same]
        assert p == same[int(np.argmin(dists))]


def test_mine_triplets_single_class_rejected():
    with pytest.raises(TripletError):
        mine_triplets(np.zeros((6, 2)), np.zeros(6, dtype=int))


def test_transform_zero_network_maps_to_zero():
    rng = np.random.default_rng(0)
    model = Mlp([4, 3, 2], rng)
    for w in model.weights:
        w[:] = 0.0
    reducer = Reducer(model, SdrConfig())
    np.testing.assert_array_equal(reducer.transform(np.ones(4)), np.zeros(2))


def test_transform_identity_projection():
    rng = np.random.default_rng(0)
    model = Mlp([4, 2], rng)  # single linear layer
    model.weights[0][:] = np.eye(4)[:, :2]
    model.biases[0][:] = 0.0
    reducer = Reducer(model, SdrConfig())
    x = np.array([3.0, -1.0, 7.0, 2.0])
    np.testing.assert_array_equal(reducer.transform(x), x[:2])


def test_transform_deterministic_and_shape_checked():
    rng = np.random.default_rng(5)
    reducer = Reducer(Mlp([6, 4, 2], rng), SdrConfig())
    x = rng.normal(size=6)
    first = reducer.transform(x)
    second = reducer.transform(x)
    assert np.array_equal(first, second)
    assert first.shape == (2,)
    with pytest.raises(DataError):
        reducer.transform(np.zeros(5))


def test_transform_lipschitz_bound_from_weights():
    """ReLU layers are contractions, so output differences are bounded by
    the product of the weight spectral norms times the input difference."""
    rng = np.random.default_rng(8)
    model = Mlp([5, 8, 3], rng)
    reducer = Reducer(model, SdrConfig())
    bound = float(np.prod([np.linalg.norm(w, ord=2) for w in model.weights]))
    for _ in range(100):
        x, y = rng.normal(size=5), rng.normal(size=5)
        gap = np.linalg.norm(reducer.transform(x) - reducer.transform(y))
        assert gap <= bound * np.linalg.norm(x - y) + 1e-9


def _separable_features(rng, n_per=150, dim=64):
    mean_b = np.zeros(dim)
    mean_b[:8] = 3.0
    features = np.concatenate(
        [rng.normal(0.0, 1.0, size=(n_per, dim)), rng.normal(mean_b, 1.0, size=(n_per, dim))]
    )
    labels = np.repeat([0, 1], n_per)
    return features, labels


def test_training_separates_linearly_separable_blobs():
    """After training, held-out mean inter-class embedding distance is at
    least 3x the mean intra-class distance. The margin is set well above
    the intra-class spread so satisfied triplets keep a wide moat."""
    rng = np.random.default_rng(42)
    features, labels = _separable_features(rng)
    cfg = SdrConfig(
        out_dim=2, hidden_dims=(32,), k_neighbors=10, margin=16.0, max_epochs=100, seed=0
    )
    reducer = train_reducer(features, labels, cfg)

    test_features, test_labels = _separable_features(rng, n_per=80)
    embedded = reducer.transform(test_features)
    by_class = [embedded[test_labels == c] for c in (0, 1)]
    intra = [
        np.linalg.norm(group[:, None, :] - group[None, :, :], axis=2)[
            np.triu_indices(len(group), 1)
        ].mean()
        for group in by_class
    ]
    inter = np.linalg.norm(
        by_class[0][:, None, :] - by_class[1][None, :, :], axis=2
    ).mean()
    ratio = inter / np.mean(intra)
    assert ratio >= 3.0, f"separation ratio {ratio:.2f}"


def test_training_is_deterministic_per_seed():
    rng = np.random.default_rng(10)
    features, labels = _separable_features(rng, n_per=40, dim=8)
    cfg = SdrConfig(out_dim=2, hidden_dims=(8,), k_neighbors=5, max_epochs=5, seed=7)
    r1 = train_reducer(features, labels, cfg)
    r2 = train_reducer(features, labels, cfg)
    for w1, w2 in zip(r1.model.weights, r2.model.weights):
        assert np.array_equal(w1, w2)


def test_training_improves_over_initialization():
    rng = np.random.default_rng(2)
    features, labels = _separable_features(rng, n_per=60, dim=16)
    cfg = SdrConfig(out_dim=2, hidden_dims=(16,), k_neighbors=5, max_epochs=20, seed=3)
    triples = mine_triplets(features, labels, k_neighbors=5, seed=1)
    a, p, n = features[triples[:, 0]], features[triples[:, 1]], features[triples[:, 2]]

    untrained = Mlp([16, 16, 2], np.random.default_rng(cfg.seed))
    before, _ = triplet_loss_and_grads(untrained, a, p, n, cfg.margin)
    reducer = train_reducer(features, labels, cfg)
    after, _ = triplet_loss_and_grads(reducer.model, a, p, n, cfg.margin)
    assert after < 0.5 * before


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_absurd_learning_rate_diverges():
    rng = np.random.default_rng(4)
    features, labels = _separable_features(rng, n_per=30, dim=8)
    cfg = SdrConfig(out_dim=2, hidden_dims=(8,), learning_rate=1e155, max_epochs=5, seed=0)
    with pytest.raises(DivergenceError):
        train_reducer(features, labels, cfg)


def test_reducer_json_round_trip():
    rng = np.random.default_rng(6)
    reducer = Reducer(Mlp([5, 4, 3], rng), SdrConfig(out_dim=3))
    doc = reducer.to_json_dict()
    back = Reducer.from_json_dict(doc)
    x = rng.normal(size=5)
    np.testing.assert_array_equal(back.transform(x), reducer.transform(x))
