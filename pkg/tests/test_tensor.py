import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctx_fewshot import tensor as T
from ctx_fewshot.gradcheck import NonDeterministicError, grad_check
from ctx_fewshot.tensor import NonFiniteError, ShapeError, Tensor


def leaf(rng, shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def test_matmul_hand_case():
    out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]]))
    np.testing.assert_array_equal(out.data, [[3], [7]])


def test_softmax_hand_case():
    out = T.softmax(Tensor([0.0, np.log(3.0)]))
    np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-7)


def test_identity_kernel_conv_is_identity():
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(2, 5, 6, 3))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0] = np.eye(3)
    np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(w)).data, x.astype(np.float32))


def test_shape_errors_name_op_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="add"):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(ShapeError, match="conv2d"):
        T.conv2d(Tensor(np.ones((1, 4, 4, 2))), Tensor(np.ones((3, 3, 3, 1))))


def test_no_general_broadcasting():
    a = Tensor(np.ones((3, 1)))
    b = Tensor(np.ones((1, 4)))
    with pytest.raises(ShapeError):
        T.mul(a, b)
    # scalar and leading-batch cases are allowed
    assert T.mul(Tensor(np.ones((2, 3))), 2.0).shape == (2, 3)
    assert T.add(Tensor(np.ones((5, 2, 3))), Tensor(np.ones((2, 3)))).shape == (5, 2, 3)


def test_non_finite_output_names_op():
    with pytest.raises(NonFiniteError, match="log"):
        T.log(Tensor([0.0, 1.0]))
    with pytest.raises(NonFiniteError, match="exp"):
        T.exp(Tensor([1e4]))


def test_every_leaf_gets_grad_and_graph_visited_once():
    rng = np.random.default_rng(1)
    a, b = leaf(rng, (3, 4)), leaf(rng, (4, 2))
    h = T.matmul(a, b)
    loss = T.tsum(T.mul(h, h)) + T.tsum(h)  # h feeds two consumers
    loss.backward()
    hd = a.data @ b.data
    g = 2 * hd + 1
    np.testing.assert_allclose(a.grad, g @ b.data.T, rtol=1e-5)
    np.testing.assert_allclose(b.grad, a.data.T @ g, rtol=1e-5)


def test_backward_is_additive():
    rng = np.random.default_rng(2)
    x = leaf(rng, (4,))
    T.tsum(T.square(x)).backward()
    T.tsum(T.mul(x, 3.0)).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 3, rtol=1e-6)


def test_quadratic_grad_check():
    x = Tensor([1.0, 2.0], requires_grad=True)
    T.tsum(T.square(x)).backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0])
    x.grad = None
    assert grad_check(lambda t: T.tsum(T.square(t)), x).passed


def test_grad_check_rejects_bad_eps_and_nondeterminism():
    x = Tensor([1.0], requires_grad=True)
    with pytest.raises(ValueError):
        grad_check(lambda t: T.tsum(t), x, eps=1e-1)
    with pytest.raises(ValueError):
        grad_check(lambda t: T.tsum(t), x, eps=1e-5, dtype=np.float32)
    with pytest.raises(ValueError):
        grad_check(lambda t: T.tsum(t), x, eps=1e-8)
    assert grad_check(lambda t: T.tsum(T.square(t)), x, eps=1e-6).passed
    rng = np.random.default_rng(0)
    with pytest.raises(NonDeterministicError):
        grad_check(lambda t: T.tsum(T.mul(t, float(rng.uniform()))), x)


def test_grad_check_detects_wrong_gradient():
    def bad_square(a):
        return T._make("bad", a.data ** 2, (a,), lambda g: (g * a.data,))  # missing factor 2
    x = Tensor([0.5, -0.7], requires_grad=True)
    assert not grad_check(lambda t: T.tsum(bad_square(t)), x).passed


def test_cross_entropy_grad_check_tight():
    rng = np.random.default_rng(3)
    logits = leaf(rng, (4, 5), -3, 3)
    labels = rng.integers(0, 5, 4)
    assert grad_check(lambda t: T.cross_entropy(t, labels), logits, tol=1e-3).passed


def test_cross_entropy_label_range():
    with pytest.raises(ValueError, match="label"):
        T.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_l2_normalize_zero_norm_errors():
    with pytest.raises(NonFiniteError):
        T.l2_normalize(Tensor(np.zeros((1, 3))))


def _dilated_kernel(w, d):
    kh, kw, ci, co = w.shape
    out = np.zeros(((kh - 1) * d + 1, (kw - 1) * d + 1, ci, co))
    out[::d, ::d] = w
    return out


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), d=st.integers(1, 3), size=st.integers(5, 8))
def test_dilation_equals_zero_interleaved_kernel(seed, d, size):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (1, size, size, 2))
    w = rng.uniform(-1, 1, (2, 2, 2, 3))
    if (w.shape[0] - 1) * d + 1 > size:
        return
    with T.default_dtype(np.float64):
        a = T.conv2d(Tensor(x), Tensor(w), dilation=d).data
        b = T.conv2d(Tensor(x), Tensor(_dilated_kernel(w, d))).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(4)
    x = rng.uniform(-1, 1, (2, 7, 6, 2))
    w = rng.uniform(-1, 1, (3, 3, 2, 4))
    stride, dil, pad = 2, 1, 1
    with T.default_dtype(np.float64):
        out = T.conv2d(Tensor(x), Tensor(w), stride=stride, dilation=dil, padding=pad).data
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ref = np.zeros_like(out)
    for n in range(out.shape[0]):
        for i in range(out.shape[1]):
            for j in range(out.shape[2]):
                patch = xp[n, i * stride:i * stride + 3, j * stride:j * stride + 3]
                ref[n, i, j] = np.einsum("hwc,hwco->o", patch, w)
    np.testing.assert_allclose(out, ref, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), shape=st.lists(st.integers(1, 5), min_size=1, max_size=3))
def test_softmax_sums_to_one_and_shift_invariant(seed, shape):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-5, 5, shape)
    s = T.softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(T.softmax(Tensor(x + 7.3), axis=-1).data, s, atol=1e-5)


# -- gradient property sweep over primitives -------------------------------------

def _unary_cases(rng):
    shape = tuple(int(v) for v in rng.integers(1, 4, rng.integers(1, 4)))
    return {
        "square": (lambda t: T.tsum(T.square(t)), leaf(rng, shape)),
        "exp": (lambda t: T.tsum(T.exp(t)), leaf(rng, shape)),
        "log": (lambda t: T.tsum(T.log(t)), leaf(rng, shape, 0.5, 1.5)),
        "relu": (lambda t: T.tsum(T.mul(T.relu(t), t)), leaf(rng, shape)),
        "mean": (lambda t: T.tsum(T.square(T.mean(t, axis=0))), leaf(rng, shape)),
        "softmax": (lambda t: T.tsum(T.mul(T.softmax(t, axis=-1), Tensor(np.arange(t.size).reshape(t.shape)))),
                    leaf(rng, shape)),
        "log_softmax": (lambda t: T.tsum(T.mul(T.log_softmax(t), Tensor(np.linspace(-1, 1, t.size).reshape(t.shape)))),
                        leaf(rng, shape)),
        "l2_normalize": (lambda t: T.tsum(T.mul(T.l2_normalize(t), Tensor(np.linspace(-1, 2, t.size).reshape(t.shape)))),
                         leaf(rng, shape, 0.2, 1.0)),
        "div": (lambda t: T.tsum(T.div(T.square(t), T.add(T.square(t), 1.0))), leaf(rng, shape)),
        "transpose": (lambda t: T.tsum(T.mul(T.transpose(t), Tensor(np.arange(t.size).reshape(t.shape[::-1])))),
                      leaf(rng, shape)),
    }


@pytest.mark.parametrize("seed", range(50))
def test_primitive_gradients_random(seed):
    rng = np.random.default_rng(seed)
    for name, (f, x) in _unary_cases(rng).items():
        rep = grad_check(f, x, eps=1e-4 if name == "relu" else 1e-3)
        assert rep.passed, (name, rep)
    a, b = leaf(rng, (2, 3, 4)), leaf(rng, (4, 2))
    assert grad_check(lambda t: T.tsum(T.square(T.matmul(t, b))), a).passed
    assert grad_check(lambda t: T.tsum(T.square(T.matmul(a, t))), b).passed
    p, q = leaf(rng, (3, 4)), leaf(rng, (5, 4))
    assert grad_check(lambda t: T.tsum(T.pairwise_sq_dist(t, q)), p).passed
    assert grad_check(lambda t: T.tsum(T.pairwise_sq_dist(p, t)), q).passed
    idx = rng.integers(0, 3, 5)
    assert grad_check(lambda t: T.tsum(T.square(T.take(t, idx))), p).passed
    assert grad_check(lambda t: T.tsum(T.square(T.concat([t, p], axis=0))), leaf(rng, (2, 4))).passed
    assert grad_check(lambda t: T.tsum(T.square(T.getitem(t, (slice(0, 2), 1)))), p).passed


@pytest.mark.parametrize("seed", range(50))
def test_cross_attention_gradients(seed):
    rng = np.random.default_rng(seed)
    q, k, v = leaf(rng, (3, 4)), leaf(rng, (5, 4)), leaf(rng, (5, 2))
    w = Tensor(rng.uniform(-1, 1, (3, 2)))
    for which in range(3):
        args = [q, k, v]

        def f(t, which=which):
            a = list(args)
            a[which] = t
            return T.tsum(T.mul(T.cross_attention(*a, scale=0.5), w))
        assert grad_check(f, args[which]).passed


@pytest.mark.parametrize("seed", range(50))
def test_conv_and_batch_norm_gradients(seed):
    rng = np.random.default_rng(seed)
    stride, dilation = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    x, w = leaf(rng, (2, 6, 6, 2)), leaf(rng, (3, 3, 2, 3))
    probe = Tensor(rng.uniform(-1, 1, T.conv2d(x, w, stride, dilation, dilation).shape))
    assert grad_check(lambda t: T.tsum(T.mul(T.conv2d(t, w, stride, dilation, dilation), probe)), x).passed
    assert grad_check(lambda t: T.tsum(T.mul(T.conv2d(x, t, stride, dilation, dilation), probe)), w).passed
    h = leaf(rng, (4, 3, 3, 2))
    g, b = leaf(rng, (2,), 0.5, 1.5), leaf(rng, (2,))
    pr = Tensor(rng.uniform(-1, 1, h.shape))
    rows = int(rng.integers(1, 5))
    for st_rows in (None, rows):
        assert grad_check(lambda t: T.tsum(T.mul(T.batch_norm(t, g, b, stats_rows=st_rows)[0], pr)), h).passed
        assert grad_check(lambda t: T.tsum(T.mul(T.batch_norm(h, t, b, stats_rows=st_rows)[0], pr)), g).passed
    run = (rng.uniform(-1, 1, 2), rng.uniform(0.5, 2, 2))
    assert grad_check(lambda t: T.tsum(T.mul(T.batch_norm(t, g, b, running=run)[0], pr)), h).passed


def test_batch_norm_running_stats_are_constant():
    x = Tensor(np.arange(12, dtype=float).reshape(3, 4))
    out, (mu, var) = T.batch_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)),
                                  running=(np.zeros(4), np.ones(4)), eps=0.0)
    np.testing.assert_allclose(out.data, x.data)


def test_take_out_of_range():
    with pytest.raises(ShapeError):
        T.take(Tensor(np.ones((3, 2))), [3])
