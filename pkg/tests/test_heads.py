import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctx_fewshot import heads as H
from ctx_fewshot import tensor as T
from ctx_fewshot.gradcheck import grad_check
from ctx_fewshot.tensor import NonFiniteError, Tensor


def params(rng, d, dk, dv):
    return H.HeadParams(Tensor(rng.normal(size=(d, dk)), requires_grad=True),
                        Tensor(rng.normal(size=(d, dv)), requires_grad=True))


def loop_ctx_logits(support, labels, query, gamma, lam):
    """Direct transcription of attention, aligned prototypes and distance."""
    ns, h, w, d = support.shape
    n_classes = int(labels.max()) + 1
    dk = gamma.shape[1]
    out = np.zeros((query.shape[0], n_classes))
    for qi in range(query.shape[0]):
        for c in range(n_classes):
            members = [j for j in range(ns) if labels[j] == c]
            total = 0.0
            for p in range(h * w):
                qp = query[qi].reshape(-1, d)[p]
                scores, vals = [], []
                for j in members:
                    for m in range(h * w):
                        sm = support[j].reshape(-1, d)[m]
                        scores.append(float((gamma.T @ sm) @ (gamma.T @ qp)) / math.sqrt(dk))
                        vals.append(lam.T @ sm)
                top = max(scores)
                ex = [math.exp(s - top) for s in scores]
                z = sum(ex)
                t = sum(e / z * v for e, v in zip(ex, vals))
                wq = lam.T @ qp
                total += float(((t - wq) ** 2).sum())
            out[qi, c] = -total / (h * w)
    return out


# -- prototypical ---------------------------------------------------------------

def test_proto_prototype_examples():
    np.testing.assert_allclose(H.proto_prototype([Tensor([0.0, 0.0]), Tensor([2.0, 2.0])]).data, [1, 1])
    v = Tensor([0.3, -1.2, 5.0])
    np.testing.assert_allclose(H.proto_prototype([v]).data, v.data)
    rng = np.random.default_rng(0)
    vecs = rng.normal(size=(5, 7))
    ref = [sum(vecs[i, k] for i in range(5)) / 5 for k in range(7)]
    np.testing.assert_allclose(H.proto_prototype(Tensor(vecs)).data, ref, atol=1e-6)
    with pytest.raises(ValueError):
        H.proto_prototype([])


def test_class_prototypes_requires_every_class():
    with pytest.raises(ValueError):
        H.class_prototypes(Tensor(np.ones((3, 2))), [0, 0, 2], 3)


def test_proto_logits_hand_softmax():
    logits = H.proto_logits(Tensor([1.0, 1.0]), Tensor([[1.0, 1.0], [3.0, 1.0]]))
    np.testing.assert_allclose(logits.data, [0.0, -4.0])
    probs = T.softmax(logits).data
    np.testing.assert_allclose(probs, [0.9820, 0.0180], atol=1e-4)


def test_proto_logits_equal_prototype_is_max():
    rng = np.random.default_rng(1)
    protos = rng.normal(size=(4, 3))
    logits = H.proto_logits(Tensor(protos[2]), Tensor(protos)).data
    assert logits[2] == 0.0 and np.argmax(logits) == 2 and np.sum(logits == 0) == 1


def test_cosine_scale_invariance_and_zero_norm():
    rng = np.random.default_rng(2)
    protos = rng.normal(size=(3, 4))
    for scale in (0.01, 1.0, 250.0):
        logits = H.proto_logits(Tensor(scale * protos[1]), Tensor(protos), "cosine").data
        assert abs(logits[1]) < 1e-6
    with pytest.raises(NonFiniteError):
        H.proto_logits(Tensor(np.zeros(4)), Tensor(protos), "cosine")
    with pytest.raises(ValueError):
        H.proto_logits(Tensor(np.ones(4)), Tensor(protos[:1]))


# -- attention --------------------------------------------------------------------

def test_identical_keys_give_uniform_attention():
    rng = np.random.default_rng(3)
    pr = params(rng, 4, 3, 2)
    support = Tensor(np.tile(rng.normal(size=4), (2, 2, 2, 1)))  # N=2 images, 2x2 grid
    att = H.ctx_attention(Tensor(rng.normal(size=(2, 2, 4))), support, pr)
    np.testing.assert_allclose(att.weights.data, 1 / 8, atol=1e-7)


def test_attention_hand_case():
    # d_k = 1, one image with two positions, keys (0, ln 3), query scalar 1
    pr = H.HeadParams(Tensor([[1.0]]), Tensor([[1.0]]))
    support = Tensor(np.array([0.0, math.log(3.0)]).reshape(1, 1, 2, 1))
    query = Tensor(np.ones((1, 2, 1)))
    att = H.ctx_attention(query, support, pr)
    np.testing.assert_allclose(att.weights.data[0, 0, 0], [0.25, 0.75], atol=1e-6)


def test_attention_rejects_bad_dk_and_shapes():
    with pytest.raises(ValueError):
        H.HeadParams.init(4, d_k=0)
    rng = np.random.default_rng(4)
    pr = params(rng, 4, 2, 2)
    with pytest.raises(T.ShapeError):
        H.ctx_attention(Tensor(np.ones((2, 2, 4))), Tensor(np.ones((1, 3, 3, 4))), pr)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 3), g=st.integers(1, 3), nq=st.integers(1, 3))
def test_attention_normalized_and_prototype_in_hull(seed, n, g, nq):
    rng = np.random.default_rng(seed)
    pr = params(rng, 5, 3, 4)
    support = Tensor(rng.normal(size=(n, g, g, 5)))
    query = Tensor(rng.normal(size=(nq, g, g, 5)))
    att = H.ctx_attention(query, support, pr)
    w = att.weights.data
    assert np.all((w >= 0) & (w <= 1))
    np.testing.assert_allclose(w.sum(axis=(2, 3)), 1.0, atol=1e-5)
    vals = H.support_values(support, pr)
    t = H.ctx_aligned_prototype(att, vals).data
    flat = vals.data.reshape(-1, 4)
    assert np.all(t >= flat.min(axis=0) - 1e-5) and np.all(t <= flat.max(axis=0) + 1e-5)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), factor=st.floats(0.05, 20.0))
def test_attention_argmax_invariant_to_temperature(seed, factor):
    rng = np.random.default_rng(seed)
    pr = params(rng, 4, 2, 2)
    support, query = Tensor(rng.normal(size=(2, 2, 2, 4))), Tensor(rng.normal(size=(2, 2, 4)))
    att = H.ctx_attention(query, support, pr)
    scores = att.scores.data.reshape(1, 4, -1)
    rescaled = T.softmax(Tensor(scores / (pr.temperature * factor)), axis=-1).data
    np.testing.assert_array_equal(np.argmax(rescaled, axis=-1), np.argmax(scores, axis=-1))
    np.testing.assert_array_equal(np.argmax(att.flat_weights().data, axis=-1), np.argmax(scores, axis=-1))


def test_aligned_prototype_delta_uniform_and_oracle():
    rng = np.random.default_rng(5)
    vals = rng.normal(size=(2, 4, 3))  # N=2, M=4, d_v=3
    delta = np.zeros((1, 4, 2, 4))
    delta[0, :, 1, 2] = 1.0
    t = H.ctx_aligned_prototype(Tensor(delta), Tensor(vals)).data
    np.testing.assert_allclose(t[0], np.tile(vals[1, 2], (4, 1)))
    uni = np.full((1, 4, 2, 4), 1 / 8)
    t = H.ctx_aligned_prototype(Tensor(uni), Tensor(vals)).data
    np.testing.assert_allclose(t[0], np.tile(vals.reshape(-1, 3).mean(0), (4, 1)), atol=1e-6)
    w = rng.uniform(size=(1, 4, 2, 4))
    w /= w.sum(axis=(2, 3), keepdims=True)
    ref = np.zeros((4, 3))
    for p in range(4):
        for j in range(2):
            for m in range(4):
                ref[p] += w[0, p, j, m] * vals[j, m]
    np.testing.assert_allclose(H.ctx_aligned_prototype(Tensor(w), Tensor(vals)).data[0], ref, atol=1e-5)


def test_ctx_distance_examples():
    w = Tensor(np.zeros((1, 4, 3)))
    t = np.zeros((1, 4, 3))
    t[0, 2, 0] = 1.0
    assert H.ctx_distance(Tensor(t), w).data[0] == pytest.approx(0.25)
    assert H.ctx_distance(w, w).data[0] == 0.0
    rng = np.random.default_rng(6)
    a, b = rng.normal(size=(2, 4, 3)), rng.normal(size=(2, 4, 3))
    assert np.all(H.ctx_distance(Tensor(a), Tensor(b)).data > 0)


def delta_distance(fm, pr):
    """Distance of a query to its own single-image support with p = m attention."""
    p = fm.shape[0] * fm.shape[1]
    att = np.eye(p).reshape(1, p, 1, p)
    proto = H.ctx_aligned_prototype(Tensor(att), H.support_values(Tensor(fm[None]), pr))
    return H.ctx_distance(proto, H.query_values(Tensor(fm), pr)).data[0]


@pytest.mark.parametrize("seed", range(20))
def test_delta_attention_zero_distance_any_weights(seed):
    rng = np.random.default_rng(seed)
    d, dv = 6, int(rng.integers(1, 9))
    pr = params(rng, d, 4, dv)
    fm = rng.normal(size=(3, 3, d))
    assert delta_distance(fm, pr) <= 1e-6


def test_copy_class_beats_random_class_under_delta_attention():
    rng = np.random.default_rng(7)
    pr = params(rng, 5, 3, 4)
    q = rng.normal(size=(2, 2, 5))
    other = rng.normal(size=(2, 2, 5))
    p = 4
    att = Tensor(np.eye(p).reshape(1, p, 1, p))
    qv = H.query_values(Tensor(q), pr)
    d1 = H.ctx_distance(H.ctx_aligned_prototype(att, H.support_values(Tensor(q[None]), pr)), qv).data[0]
    d2 = H.ctx_distance(H.ctx_aligned_prototype(att, H.support_values(Tensor(other[None]), pr)), qv).data[0]
    assert d1 <= d2 and d2 > 0


# -- episode logits ------------------------------------------------------------------

def tiny_episode(rng):
    c = int(rng.integers(2, 4))
    n_per = rng.integers(1, 3, c)
    g = int(rng.integers(1, 4))
    d = int(rng.integers(2, 5))
    labels = np.repeat(np.arange(c), n_per)
    support = rng.normal(size=(len(labels), g, g, d))
    query = rng.normal(size=(int(rng.integers(1, 4)), g, g, d))
    pr = params(rng, d, int(rng.integers(1, 4)), int(rng.integers(1, 4)))
    return support, labels, query, pr


@pytest.mark.parametrize("seed", range(200))
def test_ctx_logits_match_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    support, labels, query, pr = tiny_episode(rng)
    with T.default_dtype(np.float64):
        got = H.ctx_logits(Tensor(support), labels, Tensor(query), pr).data
    ref = loop_ctx_logits(support, labels, query, pr.key_query.data.astype(np.float64),
                          pr.value.data.astype(np.float64))
    np.testing.assert_allclose(got, ref, atol=1e-4, rtol=1e-4)


def test_ctx_logits_permutation_symmetries():
    rng = np.random.default_rng(8)
    pr = params(rng, 4, 3, 3)
    labels = np.array([0, 0, 1, 1, 2])
    support = rng.normal(size=(5, 2, 2, 4))
    query = rng.normal(size=(3, 2, 2, 4))
    base = H.ctx_logits(Tensor(support), labels, Tensor(query), pr).data
    # relabel classes 0 <-> 2
    relabel = np.array([2, 1, 0])[labels]
    swapped = H.ctx_logits(Tensor(support), relabel, Tensor(query), pr).data
    np.testing.assert_allclose(swapped, base[:, [2, 1, 0]], atol=1e-5)
    # reorder images inside class 1
    order = np.array([0, 1, 3, 2, 4])
    within = H.ctx_logits(Tensor(support[order]), labels[order], Tensor(query), pr).data
    np.testing.assert_allclose(within, base, atol=1e-5)


def test_ctx_logits_empty_class_errors():
    rng = np.random.default_rng(9)
    pr = params(rng, 4, 2, 2)
    with pytest.raises(ValueError):
        H.ctx_logits(Tensor(rng.normal(size=(2, 2, 2, 4))), [0, 2], Tensor(rng.normal(size=(1, 2, 2, 4))), pr, 3)


@pytest.mark.parametrize("seed", range(10))
def test_head_gradients(seed):
    rng = np.random.default_rng(seed)
    support, labels, query, pr = tiny_episode(rng)
    s, q = Tensor(support, requires_grad=True), Tensor(query, requires_grad=True)
    qlabels = rng.integers(0, labels.max() + 1, query.shape[0])

    def loss_with(**over):
        ss, qq = over.get("s", s), over.get("q", q)
        hp = H.HeadParams(over.get("g", pr.key_query), over.get("v", pr.value))
        return T.cross_entropy(H.ctx_logits(ss, labels, qq, hp), qlabels)
    assert grad_check(lambda t: loss_with(s=t), s).passed
    assert grad_check(lambda t: loss_with(q=t), q).passed
    assert grad_check(lambda t: loss_with(g=t), pr.key_query).passed
    assert grad_check(lambda t: loss_with(v=t), pr.value).passed
    assert grad_check(lambda t: T.tsum(H.ctx_distance(
        H.ctx_aligned_prototype(H.ctx_attention(q, t, pr), H.support_values(t, pr)),
        H.query_values(q, pr))), s).passed
    pooled = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    protos = rng.normal(size=(2, 3))
    for metric in H.METRICS:
        assert grad_check(lambda t: T.cross_entropy(H.proto_logits(t, Tensor(protos), metric),
                                                    [0, 1, 0, 1, 1]), pooled).passed


# -- logistic regression combiner --------------------------------------------------

def test_lr_combine_lambda_zero_is_exact():
    rng = np.random.default_rng(10)
    base = rng.normal(size=(4, 3)).astype(np.float32)
    out = H.global_lr_combine(base, rng.normal(size=(6, 5)), [0, 0, 1, 1, 2, 2], rng.normal(size=(4, 5)), lam=0.0)
    assert np.array_equal(out, base)


def test_lr_follows_separable_features_with_large_lambda():
    rng = np.random.default_rng(11)
    sup = np.concatenate([rng.normal([3, 0], 0.1, (5, 2)), rng.normal([0, 3], 0.1, (5, 2))])
    labels = np.repeat([0, 1], 5)
    query = np.array([[3.0, 0.1], [0.1, 3.0]])
    ctx = np.array([[0.0, 1.0], [1.0, 0.0]])  # contradicts the features
    out = H.global_lr_combine(ctx, sup, labels, query, lam=100.0)
    assert list(np.argmax(out, axis=1)) == [0, 1]


def test_lr_duplicate_support_point_gets_its_class():
    rng = np.random.default_rng(12)
    sup = rng.normal(size=(9, 4))
    labels = np.repeat([0, 1, 2], 3)
    for i in range(9):
        lr = H.lr_logits(sup, labels, sup[i:i + 1], 3)
        assert np.argmax(lr[0]) == labels[i]


def test_lr_fit_reaches_stationarity():
    rng = np.random.default_rng(13)
    x = H._l2n(rng.normal(size=(12, 3)))
    y = np.repeat([0, 1, 2], 4)
    w, b = H.fit_logistic_regression(x, y, 3, max_iter=20000, tol=1e-7)
    z = x @ w + b
    p = np.exp(z - z.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    r = (p - np.eye(3)[y]) / 12
    assert np.linalg.norm(x.T @ r + w / (10 * 12)) < 1e-6


# -- auxiliary loss ---------------------------------------------------------------------

def test_aux_loss_examples():
    k = 7
    pooled = Tensor(np.eye(k) * 50.0)
    weight, bias = Tensor(np.eye(k)), Tensor(np.zeros(k))
    assert H.aux_global_loss(pooled, np.arange(k), weight, bias).item() < 1e-6
    zero = Tensor(np.zeros((3, k)))
    assert H.aux_global_loss(zero, [0, 1, 6], weight, bias).item() == pytest.approx(math.log(k), rel=1e-6)
    rng = np.random.default_rng(14)
    x, w, b = rng.normal(size=(4, 3)), rng.normal(size=(3, k)), rng.normal(size=k)
    y = rng.integers(0, k, 4)
    z = x @ w + b
    ref = np.mean([-(z[i, y[i]] - np.log(np.exp(z[i]).sum())) for i in range(4)])
    with T.default_dtype(np.float64):
        got = H.aux_global_loss(Tensor(x), y, Tensor(w), Tensor(b)).item()
    assert got == pytest.approx(ref, abs=1e-5)
    with pytest.raises(ValueError):
        H.aux_global_loss(zero, [0, 1, k], weight, bias)
