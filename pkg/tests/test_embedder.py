import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctx_fewshot import tensor as T
from ctx_fewshot.embedder import Embedder, EmbedderConfig, global_pool
from ctx_fewshot.gradcheck import grad_check
from ctx_fewshot.tensor import Tensor

SMALL = dict(channels=(4, 4, 8, 8), feature_dim=8)


def images(rng, n, size=32, c=1):
    return rng.uniform(0, 1, (n, size, size, c))


@pytest.mark.parametrize("stride,dilation,grid", [(1, 2, 4), (2, 1, 2)])
def test_grid_sizes(stride, dilation, grid):
    cfg = EmbedderConfig(final_stage_stride=stride, final_stage_dilation=dilation, **SMALL)
    assert cfg.grid_size == grid
    out = Embedder(cfg).embed(images(np.random.default_rng(0), 2))
    assert out.shape == (2, grid, grid, 8)


def test_resolution_variants_differ_by_factor_two():
    rng = np.random.default_rng(1)
    x = images(rng, 2, 16)
    up = x.repeat(2, axis=1).repeat(2, axis=2)
    hi = Embedder(EmbedderConfig(input_size=32, final_stage_stride=1, final_stage_dilation=2, **SMALL))
    lo = Embedder(EmbedderConfig(input_size=32, final_stage_stride=2, final_stage_dilation=1, **SMALL))
    a, b = hi.embed(up).shape, lo.embed(up).shape
    assert a[1] == 2 * b[1] and a[2] == 2 * b[2]


def test_invalid_configs():
    with pytest.raises(ValueError):
        EmbedderConfig(final_stage_stride=1, final_stage_dilation=1, **SMALL).validate()
    with pytest.raises(ValueError):
        EmbedderConfig(channels=(4, 8), feature_dim=4).validate()
    with pytest.raises(ValueError, match="divisible"):
        EmbedderConfig(input_size=36, **SMALL).validate()
    emb = Embedder(EmbedderConfig(**SMALL))
    with pytest.raises(ValueError, match="divisible by 8"):
        emb.embed(np.zeros((1, 36, 36, 1)))
    with pytest.raises(ValueError):
        emb.embed(np.zeros((1, 32, 32, 1)), bn_mode="eval")


def test_zero_image_zero_final_layer_gives_zero_map():
    emb = Embedder(EmbedderConfig(**SMALL))
    emb.params["s3b1.gamma"].data[:] = 0
    emb.params["s3b1.beta"].data[:] = 0
    out = emb.embed(np.zeros((2, 32, 32, 1)), "test-ema")
    assert np.all(out.data == 0)


def test_global_pool_examples():
    v = np.array([1.0, -2.0, 3.0])
    np.testing.assert_allclose(global_pool(Tensor(np.tile(v, (4, 4, 1)))).data, v)
    two = Tensor(np.array([[[1.0], [3.0]]]))
    assert global_pool(two).data[0] == pytest.approx(2.0)
    rng = np.random.default_rng(2)
    fm = rng.normal(size=(3, 4, 5, 6))
    ref = np.array([[fm[n, :, :, d].sum() / 20 for d in range(6)] for n in range(3)])
    np.testing.assert_allclose(global_pool(Tensor(fm)).data, ref, atol=1e-6)


def test_train_ema_updates_with_decay():
    rng = np.random.default_rng(3)
    emb = Embedder(EmbedderConfig(**SMALL))
    x = images(rng, 4)
    before = emb.bn.copy()
    emb.embed(x, "train-ema")
    # first layer statistics are those of the raw conv output
    conv = T.conv2d(Tensor(x), emb.params["s0b0.w"], stride=2, padding=1).data
    mu, var = conv.mean(axis=(0, 1, 2)), conv.var(axis=(0, 1, 2))
    np.testing.assert_allclose(emb.bn.mean["s0b0"], 0.9 * before.mean["s0b0"] + 0.1 * mu, rtol=1e-5, atol=1e-7)
    np.testing.assert_allclose(emb.bn.var["s0b0"], 0.9 * before.var["s0b0"] + 0.1 * var, rtol=1e-5)
    assert all(np.all(v > 0) for v in emb.bn.var.values())


@pytest.mark.parametrize("mode", ["test-ema", "test-support-stats"])
def test_test_modes_leave_buffers_untouched(mode):
    emb = Embedder(EmbedderConfig(**SMALL))
    before = emb.bn.copy()
    emb.embed(images(np.random.default_rng(4), 3), mode)
    for k in before.mean:
        assert np.array_equal(before.mean[k], emb.bn.mean[k])
        assert np.array_equal(before.var[k], emb.bn.var[k])


def test_test_ema_is_pure():
    emb = Embedder(EmbedderConfig(**SMALL))
    emb.embed(images(np.random.default_rng(5), 4), "train-ema")
    x = images(np.random.default_rng(6), 3)
    a = emb.embed(x, "test-ema").data
    b = emb.embed(x, "test-ema").data
    assert np.array_equal(a, b)
    # each image is embedded independently of the batch
    c = emb.embed(x[:1], "test-ema").data
    np.testing.assert_allclose(a[:1], c, atol=1e-6)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 1000))
def test_support_stats_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    x = images(rng, 5)
    perm = rng.permutation(5)
    # float64 so the check sees the symmetry rather than summation order
    with T.default_dtype(np.float64):
        emb = Embedder(EmbedderConfig(**SMALL), rng)
        a = emb.embed(x, "test-support-stats").data
        b = emb.embed(x[perm], "test-support-stats").data
    np.testing.assert_allclose(a[perm], b, atol=1e-9)


def test_stats_rows_ignore_trailing_rows():
    rng = np.random.default_rng(7)
    emb = Embedder(EmbedderConfig(**SMALL))
    support, query = images(rng, 4), images(rng, 2)
    a = emb.embed(np.concatenate([support, query]), "test-support-stats", stats_rows=4).data
    b = emb.embed(np.concatenate([support, images(rng, 2)]), "test-support-stats", stats_rows=4).data
    np.testing.assert_allclose(a[:4], b[:4], atol=1e-6)


@pytest.mark.parametrize("mode", ["train-ema", "test-ema", "test-support-stats"])
def test_embedder_gradients(mode):
    rng = np.random.default_rng(8)
    cfg = EmbedderConfig(input_size=16, channels=(3, 4, 4), feature_dim=4)
    emb = Embedder(cfg, rng)
    x = images(rng, 3, 16)
    probe = rng.normal(size=(3, 4, 4, 4))
    for _ in range(40):  # running statistics close to the batch's, as after training
        emb.embed(x, "train-ema")
    for name in ("s0b0.w", "s1b1.gamma", "s2b1.w", "s2b0.beta"):
        p = emb.params[name]

        def f(t, name=name):
            saved = emb.params[name]
            emb.params[name] = t
            state = emb.bn.copy()
            try:
                return T.tsum(T.mul(emb.embed(x, mode, stats_rows=2), Tensor(probe)))
            finally:
                emb.params[name] = saved
                emb.bn = state
        rep = grad_check(f, p, eps=1e-4, max_coords=12, rng=np.random.default_rng(0))
        assert rep.passed, (name, rep)
