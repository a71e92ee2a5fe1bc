import numpy as np
import pytest

from mspcaps import functional as F
from mspcaps.errors import ContractError, ShapeError
from mspcaps.nn import BatchNorm2d, Conv2d, LayerNorm, Parameter
from mspcaps.tensor import Tensor


def _naive_conv(x, w, b, stride, padding):
    batch, _, h, width = x.shape
    out_ch, in_ch, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (width + 2 * padding - k) // stride + 1
    out = np.zeros((batch, out_ch, ho, wo))
    for n in range(batch):
        for o in range(out_ch):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[n, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[n, o, i, j] = np.sum(patch * w[o]) + (b[o] if b is not None else 0)
    return out


@pytest.mark.parametrize("stride,padding,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2)])
def test_conv2d_matches_naive_loops_exactly(stride, padding, k, rng, f64):
    x = rng.integers(-3, 4, size=(2, 3, 6, 6)).astype(np.float64)
    w = rng.integers(-2, 3, size=(4, 3, k, k)).astype(np.float64)
    b = rng.integers(-2, 3, size=4).astype(np.float64)
    params = F.ConvParams(Tensor(w), Tensor(b), stride, padding)
    out = F.conv2d(Tensor(x), params)
    np.testing.assert_array_equal(out.data, _naive_conv(x, w, b, stride, padding))


@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1)])
def test_conv2d_gradients(stride, padding, rng, gradcheck):
    x = rng.normal(size=(2, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    gradcheck(lambda xt, wt, bt: (F.conv2d(xt, F.ConvParams(wt, bt, stride, padding)) ** 2).sum(), [x, w, b])


def test_conv2d_channel_mismatch():
    params = F.ConvParams(Tensor(np.ones((4, 3, 3, 3))))
    with pytest.raises(ShapeError, match="channel"):
        F.conv2d(Tensor(np.ones((1, 2, 8, 8))), params)


def test_conv_output_size():
    assert F.conv_output_size(32, 3, 2, 1) == 16
    assert F.conv_output_size(32, 3, 1, 1) == 32


def test_avgpool_values_and_gradient(rng, gradcheck):
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    out = F.avgpool2d(Tensor(x, dtype=np.float64), 2, 2)
    np.testing.assert_array_equal(out.data[0, 0], [[2.5, 4.5], [10.5, 12.5]])
    weights = rng.normal(size=(2, 3, 2, 2))
    gradcheck(lambda t: (F.avgpool2d(t, 2, 2) * weights).sum(), [rng.normal(size=(2, 3, 4, 4))])


def test_avgpool_rejects_indivisible_map():
    with pytest.raises(ShapeError, match="p=3"):
        F.avgpool2d(Tensor(np.ones((1, 1, 8, 8))), 3, 3)


def test_batchnorm_train_normalizes_and_updates_running_stats(rng, f64):
    bn = BatchNorm2d(3)
    x = rng.normal(2.0, 3.0, size=(4, 3, 5, 5))
    out = bn(Tensor(x)).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, rtol=1e-3)
    n = 4 * 5 * 5
    expected_var = 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1)
    np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(bn.running_var, expected_var)


def test_batchnorm_eval_uses_running_stats(f64):
    bn = BatchNorm2d(2).eval()
    bn.running_mean = np.array([1.0, -1.0])
    bn.running_var = np.array([4.0, 1.0])
    x = np.ones((1, 2, 1, 1))
    out = bn(Tensor(x)).data.reshape(2)
    np.testing.assert_allclose(out, [0.0, 2.0 / np.sqrt(1.0 + 1e-5)])


def test_batchnorm_train_needs_two_items():
    with pytest.raises(ContractError):
        BatchNorm2d(1)(Tensor(np.ones((1, 1, 2, 2))))


def test_batchnorm_gradient(rng, gradcheck):
    weights = rng.normal(size=(3, 2, 2, 2))

    def loss(x, gamma, beta):
        bn = BatchNorm2d(2, dtype=np.float64)
        bn.gamma, bn.beta = gamma, beta
        return (bn(x) * weights).sum()

    gradcheck(loss, [rng.normal(size=(3, 2, 2, 2)), rng.uniform(0.5, 1.5, size=2), rng.normal(size=2)])


def test_layernorm_gradient(rng, gradcheck):
    weights = rng.normal(size=(2, 3, 4))

    def loss(x, gamma, beta):
        ln = LayerNorm(4, dtype=np.float64)
        ln.gamma, ln.beta = gamma, beta
        return (ln(x) * weights).sum()

    gradcheck(loss, [rng.normal(size=(2, 3, 4)), rng.normal(size=4), rng.normal(size=4)])


def test_dropout_masks_and_rescales(rng):
    x = Tensor(np.ones((1000,)))
    out = F.dropout(x, 0.25, True, rng).data
    kept = out != 0
    np.testing.assert_allclose(out[kept], 1 / 0.75, rtol=1e-6)
    assert 0.2 < 1 - kept.mean() < 0.3
    assert F.dropout(x, 0.25, False, None) is x


@pytest.mark.parametrize("p", [1, 2, 4])
def test_avgpool_then_nearest_upsample_keeps_patch_means(p, rng, f64):
    x = rng.normal(size=(2, 3, 8, 8))
    pooled = F.avgpool2d(Tensor(x), p, p).data
    upsampled = np.repeat(np.repeat(pooled, p, axis=2), p, axis=3)
    assert upsampled.shape == x.shape
    np.testing.assert_allclose(F.avgpool2d(Tensor(upsampled), p, p).data, pooled, rtol=1e-12, atol=1e-15)
    patch_means = x.reshape(2, 3, 8 // p, p, 8 // p, p).mean(axis=(3, 5))
    np.testing.assert_allclose(pooled, patch_means, rtol=1e-12, atol=1e-15)


def test_dropout_statistics_on_a_million_elements(f64):
    rng = np.random.default_rng(11)
    n = 10**6
    out = F.dropout(Tensor(np.ones(n)), 0.1, True, rng).data
    assert abs(np.mean(out != 0) - 0.9) < 0.002
    assert abs(out.mean() - 1.0) < 0.005

    x = rng.uniform(0.5, 1.5, size=n)
    noise = F.dropout(Tensor(x), 0.1, True, rng).data - x
    # train-mode expectation equals the eval-mode output
    assert abs(noise.mean()) < 4 * noise.std() / np.sqrt(n)
    np.testing.assert_array_equal(F.dropout(Tensor(x), 0.1, False, rng).data, x)


def test_init_scale_examples(rng):
    xavier = np.concatenate([F.init_xavier_normal((50, 50), rng, dtype=np.float64).ravel() for _ in range(40)])
    assert xavier.size == 10**5
    assert F.compute_fans((50, 50)) == (50, 50)
    assert xavier.std() == pytest.approx(np.sqrt(2 / 100), rel=0.02)
    assert abs(xavier.mean()) < 0.002

    kaiming = F.init_kaiming((800, 128), rng, dtype=np.float64)
    assert F.compute_fans((800, 128))[0] == 128
    assert kaiming.std() == pytest.approx(0.125, rel=0.02)
    assert abs(kaiming.mean()) < 0.002


def test_dropout_contract():
    with pytest.raises(ContractError):
        F.dropout(Tensor(np.ones(2)), 1.0, True, np.random.default_rng(0))
    with pytest.raises(ContractError):
        F.dropout(Tensor(np.ones(2)), 0.5, True, None)


def test_fans_and_init_scale(rng):
    assert F.compute_fans((8, 3, 3, 3)) == (27, 72)
    assert F.compute_fans((5, 7)) == (7, 5)
    w = F.init_kaiming((400, 50, 3, 3), rng)
    assert w.dtype == np.float32
    assert abs(w.std() - np.sqrt(2 / 450)) < 0.02 * np.sqrt(2 / 450)
    x = F.init_xavier_normal((300, 200), rng, dtype=np.float64)
    assert abs(x.std() - np.sqrt(2 / 500)) < 0.02 * np.sqrt(2 / 500)
    with pytest.raises(ContractError):
        F.init_kaiming((4,), rng)


def test_conv_layer_without_bias_has_only_weight(rng):
    conv = Conv2d(3, 8, 3, rng, padding=1)
    assert [name for name, _ in conv.named_parameters()] == ["weight"]
    assert isinstance(conv.weight, Parameter) and conv.weight.decay
