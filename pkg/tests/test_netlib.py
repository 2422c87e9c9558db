import numpy as np
import pytest

from s2il import tensor as T
from s2il.errors import ContractError, ShapeError
from s2il.gradcheck import finite_difference_check
from s2il.netlib import (FeatureBundle, Model, ProxyHead, class_embeddings, gradcam_importance,
                         grow_head, load_snapshot, lsc_loss, save_snapshot)
from s2il.tensor import Tensor

SMALL = dict(channels=(4, 6), pool=(True, False), image_size=8, proxies_per_class=3)


def small_model(classes=(0, 1, 2), seed=0, **kw):
    m = Model.build(**{**SMALL, **kw}, seed=seed)
    rng = np.random.default_rng(seed + 100)
    if classes:
        m.head.grow(list(classes), rng.normal(size=(len(classes), m.head.dim)), rng)
    return m


def test_zero_input_zero_weights_give_zero_features():
    m = Model.build(**SMALL, zero_init=True, last_activation="relu")
    bundle = m.forward(np.zeros((2, 1, 8, 8)))
    assert all(np.all(f.data == 0) for f in bundle.layers)
    assert np.all(bundle.pooled.data == 0)


def test_softplus_last_layer_is_strictly_positive(rng):
    m = small_model()
    bundle = m.forward(rng.normal(size=(2, 1, 8, 8)))
    assert np.all(bundle.last.data > 0)


def test_pooled_is_average_of_last_maps(rng):
    bundle = small_model().forward(rng.normal(size=(3, 1, 8, 8)))
    np.testing.assert_allclose(bundle.pooled.data, bundle.last.data.mean(axis=(2, 3)), atol=1e-10)


def test_score_shape(rng):
    bundle = small_model().forward(rng.normal(size=(5, 1, 8, 8)))
    assert bundle.scores.shape == (5, 3)
    assert [f.shape for f in bundle.layers] == [(5, 4, 4, 4), (5, 6, 4, 4)]


def test_forward_is_deterministic(rng):
    x = rng.normal(size=(2, 1, 8, 8))
    a, b = small_model(seed=3), small_model(seed=3)
    fa, fb = a.forward(x), b.forward(x)
    assert np.array_equal(fa.scores.data, fb.scores.data)
    assert all(np.array_equal(u.data, v.data) for u, v in zip(fa.layers, fb.layers))


def test_wrong_input_shape():
    with pytest.raises(ShapeError):
        small_model().forward(np.zeros((1, 1, 9, 9)))


def test_invalid_activation():
    with pytest.raises(ContractError):
        Model.build(**SMALL, last_activation="tanh")


def test_grow_by_zero_is_noop():
    m = small_model()
    before = m.head.proxies.data.copy()
    grow_head(m.head, [], np.zeros((0, m.head.dim)))
    assert np.array_equal(m.head.proxies.data, before)


def test_grow_two_classes_with_ten_proxies(rng):
    head = ProxyHead(dim=6, proxies_per_class=10)
    head.grow([0], rng.normal(size=(1, 6)), rng)
    old = head.proxies.data.copy()
    emb = rng.normal(size=(2, 6))
    grow_head(head, [5, 7], emb, rng)
    assert head.proxies.shape == (30, 6)
    assert np.array_equal(head.proxies.data[:10], old)
    new = head.proxies.data[10:]
    np.testing.assert_allclose(np.linalg.norm(new, axis=1), 1.0, atol=1e-12)
    for k, e in enumerate(emb):
        block = new[k * 10:(k + 1) * 10]
        cos = block @ e / np.linalg.norm(e)
        assert np.all(cos > 0.99)
    assert len({tuple(r) for r in new}) == 20


def test_growth_keeps_old_scores(rng):
    m = small_model()
    x = rng.normal(size=(4, 1, 8, 8))
    before = m.forward(x).scores.data
    m.head.grow([9], rng.normal(size=(1, m.head.dim)), rng)
    after = m.forward(x).scores.data
    assert np.array_equal(after[:, :3], before)


def test_grow_errors(rng):
    head = ProxyHead(dim=4, proxies_per_class=2)
    head.grow([1], rng.normal(size=(1, 4)), rng)
    with pytest.raises(ContractError):
        head.grow([1], rng.normal(size=(1, 4)), rng)
    with pytest.raises(ContractError):
        head.grow([2, 2], rng.normal(size=(2, 4)), rng)
    head.grow([3], np.zeros((1, 4)), rng)
    np.testing.assert_allclose(np.linalg.norm(head.proxies.data, axis=1), 1.0)


def test_class_embeddings_are_class_means():
    m = small_model(classes=())
    x = np.random.default_rng(0).normal(size=(6, 1, 8, 8))
    y = np.array([0, 1, 0, 1, 0, 2])
    emb = class_embeddings(m, x, y, [0, 2])
    pooled = m.forward(x, with_head=False).pooled.data
    np.testing.assert_allclose(emb[0], pooled[y == 0].mean(0))
    np.testing.assert_allclose(emb[1], pooled[5])
    with pytest.raises(ContractError):
        class_embeddings(m, x, y, [4])


# ---------------------------------------------------------------- loss

def _bundle_from(head, feats):
    pooled = T.as_tensor(feats)
    return FeatureBundle([], pooled, head.similarities(pooled), head.scale, head.margin, list(head.class_ids))


def test_single_class_loss_is_zero_regardless_of_direction(rng):
    for _ in range(5):
        head = ProxyHead(dim=4, proxies_per_class=3)
        head.grow([0], rng.normal(size=(1, 4)), rng)
        loss = lsc_loss(_bundle_from(head, rng.normal(size=(3, 4))), [0, 0, 0])
        assert loss.data.item() == 0.0


def test_closed_form_with_orthogonal_distractor():
    head = ProxyHead(dim=2, proxies_per_class=1, margin=0.6)
    head.proxies = Tensor(np.eye(2), requires_grad=True)
    head.class_ids = [0, 1]
    for s in (1.0, 10.0, 50.0):
        head.scale = Tensor(s, requires_grad=True)
        loss = lsc_loss(_bundle_from(head, np.array([[3.0, 0.0]])), [0]).data.item()
        assert loss == pytest.approx(np.log1p(np.exp(-s * (1 - 0.6))), rel=1e-12)
    assert loss < 1e-8


def test_permuting_classes_and_slots(rng):
    head = ProxyHead(dim=5, proxies_per_class=2)
    head.grow([3, 8, 1], rng.normal(size=(3, 5)), rng)
    feats = rng.normal(size=(6, 5))
    labels = [3, 8, 1, 1, 3, 8]
    base = lsc_loss(_bundle_from(head, feats), labels).data.item()
    perm = [2, 0, 1]
    rows = np.concatenate([head.proxies.data[2 * k:2 * k + 2] for k in perm])
    other = ProxyHead(dim=5, proxies_per_class=2)
    other.proxies = Tensor(rows, requires_grad=True)
    other.class_ids = [head.class_ids[k] for k in perm]
    assert lsc_loss(_bundle_from(other, feats), labels).data.item() == pytest.approx(base, abs=1e-14)


def test_unknown_label(rng):
    head = ProxyHead(dim=3, proxies_per_class=1)
    head.grow([0, 1], rng.normal(size=(2, 3)), rng)
    with pytest.raises(ContractError):
        lsc_loss(_bundle_from(head, rng.normal(size=(1, 3))), [5])


def test_loss_gradient_matches_differences(rng):
    head = ProxyHead(dim=6, proxies_per_class=3, scale_init=4.0)
    head.grow([0, 1, 2], rng.normal(size=(3, 6)), rng)
    labels = [0, 2, 1, 2]
    feats = rng.normal(size=(4, 6))
    report = finite_difference_check(lambda f: lsc_loss(_bundle_from(head, f), labels), feats)
    assert report.passed, report.max_deviation


# ---------------------------------------------------------------- Grad-CAM

def test_zeroed_weight_gives_zero_importance(rng):
    m = small_model()
    w = rng.normal(size=(3, 6))
    w[:, 2] = 0.0
    fn = lambda maps: T.matmul(T.global_avg_pool(maps), Tensor(w.T))
    alpha = gradcam_importance(m, rng.normal(size=(3, 1, 8, 8)), 1, score_fn=fn)
    assert alpha[2] == 0.0


def test_linear_head_importance_is_scaled_weight_row(rng):
    m = small_model()
    w = rng.normal(size=(3, 6))
    fn = lambda maps: T.matmul(T.global_avg_pool(maps), Tensor(w.T))
    alpha = gradcam_importance(m, rng.normal(size=(3, 1, 8, 8)), 2, score_fn=fn)
    # pooled over 4x4 positions: each map position gets w/(H*W), and alpha averages those
    np.testing.assert_allclose(alpha, w[2] / 16, atol=1e-15)


def test_importance_invariant_to_duplication_and_order(rng):
    m = small_model()
    x = rng.normal(size=(4, 1, 8, 8))
    a = gradcam_importance(m, x, 1)
    b = gradcam_importance(m, np.concatenate([x, x]), 1)
    c = gradcam_importance(m, x[::-1], 1)
    np.testing.assert_allclose(b, a, atol=1e-14)
    np.testing.assert_allclose(c, a, atol=1e-14)
    assert a.shape == (6,)


def test_importance_errors(rng):
    m = small_model()
    with pytest.raises(ContractError):
        gradcam_importance(m, np.zeros((0, 1, 8, 8)), 0)
    with pytest.raises(ContractError):
        gradcam_importance(m, rng.normal(size=(1, 1, 8, 8)), 0, score="bogus")


# ---------------------------------------------------------------- snapshots

def test_snapshot_round_trip(rng):
    m = small_model(last_activation="relu")
    clone = load_snapshot(save_snapshot(m))
    assert clone.checksum() == m.checksum()
    assert clone.head.class_ids == m.head.class_ids
    assert clone.backbone.last_activation == "relu"
    x = rng.normal(size=(2, 1, 8, 8))
    assert np.array_equal(clone.forward(x).scores.data, m.forward(x).scores.data)


def test_copy_is_independent():
    m = small_model()
    c = m.copy()
    c.backbone.weights[0].data += 1.0
    assert c.checksum() != m.checksum()


def test_corrupt_snapshot():
    with pytest.raises(ContractError):
        load_snapshot(b"XXXX" + save_snapshot(small_model())[4:])
