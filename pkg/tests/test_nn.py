import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from carnet import nn
from carnet import tensor as T
from carnet.gradcheck import check
from carnet.tensor import ShapeError, Tensor, backward


def p64(rng, *shape, scale=1.0):
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True, dtype=np.float64)


def weighted_sum(y, seed=0):
    w = np.random.default_rng(seed).standard_normal(y.shape)
    return T.reduce_sum(T.mul(y, Tensor(w)))


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d_reference(x, w, b, stride, pad):
    """Direct nested-loop convolution over (N, C, H, W)."""
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride:i * stride + k, j * stride:j * stride + k]
            out[:, :, i, j] = np.einsum("nckl,ockl->no", patch, w) + b
    return out


def conv_transpose2d_reference(x, w, b, stride, pad, out_pad):
    """Scatter form: every input pixel adds a weighted copy of the kernel."""
    n, ci, h, wd = x.shape
    _, co, k, _ = w.shape
    full = np.zeros((n, co, (h - 1) * stride + k + out_pad, (wd - 1) * stride + k + out_pad))
    for i in range(h):
        for j in range(wd):
            full[:, :, i * stride:i * stride + k, j * stride:j * stride + k] += np.einsum(
                "nc,cokl->nokl", x[:, :, i, j], w)
    ho = (h - 1) * stride - 2 * pad + k + out_pad
    wo = (wd - 1) * stride - 2 * pad + k + out_pad
    return full[:, :, pad:pad + ho, pad:pad + wo] + b[None, :, None, None]


def test_conv_all_ones_gives_nine():
    x = Tensor(np.ones((1, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    y = nn.conv2d(x, w, Tensor(np.zeros(1)))
    assert y.shape == (1, 1, 1) and y.data.item() == 9.0


def test_conv_zero_in_zero_out():
    rng = np.random.default_rng(0)
    layer = nn.Conv2d(2, 3, 3, rng, padding=1)
    assert np.all(layer(np.zeros((1, 2, 5, 5), dtype=np.float32)).data == 0)


def test_first_full_scale_block_shape():
    rng = np.random.default_rng(0)
    a = nn.Conv2d(1, 2, 3, rng, stride=2, padding=1)
    b = nn.Conv2d(2, 2, 3, rng, stride=1, padding=1)
    assert b(a(np.zeros((1, 256, 256), dtype=np.float32))).shape == (2, 128, 128)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_direct_summation(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    y = nn.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad)
    np.testing.assert_allclose(y.data, conv2d_reference(x, w, b, stride, pad), rtol=1e-10, atol=1e-10)


@pytest.mark.parametrize("stride,pad,op", [(1, 0, 0), (1, 1, 0), (2, 1, 1), (2, 0, 0)])
def test_conv_transpose_matches_scatter(stride, pad, op):
    rng = np.random.default_rng(stride * 100 + pad * 10 + op)
    x = rng.standard_normal((2, 3, 4, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(2)
    y = nn.conv_transpose2d(Tensor(x), Tensor(w), Tensor(b), stride, pad, op)
    np.testing.assert_allclose(y.data, conv_transpose2d_reference(x, w, b, stride, pad, op), rtol=1e-10, atol=1e-10)


def test_conv_transpose_is_adjoint_of_conv():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 2, 8, 8))
    w = rng.standard_normal((3, 2, 3, 3))
    y = rng.standard_normal((1, 3, 4, 4))
    cx = nn.conv2d(Tensor(x), Tensor(w), None, 2, 1).data
    # the transposed conv with the same weights read as (in=3, out=2) is the adjoint
    ty = nn.conv_transpose2d(Tensor(y), Tensor(w), None, 2, 1, 1).data
    assert np.sum(cx * y) == pytest.approx(np.sum(x * ty), rel=1e-10)


def test_output_size_arithmetic():
    assert nn.conv_output_size(256, 3, 2, 1) == 128
    assert nn.conv_output_size(4, 4, 1, 0) == 1
    assert nn.conv_transpose_output_size(1, 4, 1, 0) == 4
    assert nn.conv_transpose_output_size(4, 3, 2, 1, 1) == 8


def test_conv_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(ShapeError, match="channel"):
        nn.Conv2d(2, 3, 3, rng)(np.zeros((1, 4, 5, 5), dtype=np.float32))
    with pytest.raises(ShapeError, match="output size"):
        nn.Conv2d(1, 1, 5, rng)(np.zeros((1, 1, 3, 3), dtype=np.float32))


def test_conv_gradients():
    rng = np.random.default_rng(5)
    for i in range(20):
        x, w, b = p64(rng, 2, 2, 5, 5), p64(rng, 3, 2, 3, 3), p64(rng, 3)
        stride = 1 + i % 2
        assert check(lambda x, w, b: weighted_sum(nn.conv2d(x, w, b, stride, 1), i), [x, w, b]) < 1e-4


def test_conv_transpose_gradients():
    rng = np.random.default_rng(6)
    for i in range(20):
        x, w, b = p64(rng, 2, 2, 3, 3), p64(rng, 2, 3, 3, 3), p64(rng, 3)
        stride = 1 + i % 2
        op = stride - 1
        assert check(lambda x, w, b: weighted_sum(nn.conv_transpose2d(x, w, b, stride, 1, op), i), [x, w, b]) < 1e-4


def test_projection_kernel_gradients():
    rng = np.random.default_rng(7)
    for i in range(20):
        x, w = p64(rng, 2, 3, 4, 4), p64(rng, 5, 3, 4, 4)
        assert check(lambda x, w: weighted_sum(nn.conv2d(x, w), i), [x, w]) < 1e-4


# ---------------------------------------------------------------------------
# batch norm
# ---------------------------------------------------------------------------

def test_batchnorm_constant_input():
    x = Tensor(np.full((2, 3, 4, 4), 7.0))
    g, b = Tensor(np.ones(3)), Tensor(np.zeros(3))
    np.testing.assert_array_equal(nn.batchnorm2d(x, g, b).data, 0.0)
    np.testing.assert_allclose(nn.batchnorm2d(x, g, Tensor(np.full(3, 5.0))).data, 5.0)


def test_batchnorm_statistics():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(3.0, 2.0, (8, 3, 5, 5)))
    gamma, beta = rng.uniform(0.5, 2.0, 3), rng.standard_normal(3)
    y = nn.batchnorm2d(x, Tensor(gamma), Tensor(beta)).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), beta, atol=1e-5)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), gamma ** 2, atol=1e-3)


def test_batchnorm_running_stats_and_eval_mode():
    rng = np.random.default_rng(1)
    bn = nn.BatchNorm2d(2, dtype=np.float64)
    x = rng.normal(2.0, 3.0, (4, 2, 3, 3))
    bn(x)
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3), ddof=1)
    np.testing.assert_allclose(bn.running_mean.data, 0.1 * mean, rtol=1e-12)
    np.testing.assert_allclose(bn.running_var.data, 0.9 + 0.1 * var, rtol=1e-12)
    bn.eval()
    y = bn(x).data
    expect = (x - bn.running_mean.data[None, :, None, None]) / np.sqrt(bn.running_var.data[None, :, None, None] + 1e-5)
    np.testing.assert_allclose(y, expect, rtol=1e-10)


def test_batchnorm_gradients():
    rng = np.random.default_rng(8)
    for i in range(20):
        x, g, b = p64(rng, 3, 2, 3, 3), p64(rng, 2), p64(rng, 2)
        assert check(lambda x, g, b: weighted_sum(nn.batchnorm2d(x, g, b), i), [x, g, b]) < 1e-4


# ---------------------------------------------------------------------------
# pooling, filtering, neighbourhoods, activations
# ---------------------------------------------------------------------------

def test_avg_pool_and_filter_gradients():
    rng = np.random.default_rng(9)
    kernel = np.array([0.25, 0.5, 0.25])
    for i in range(20):
        x = p64(rng, 2, 1, 6, 6)
        assert check(lambda x: weighted_sum(nn.avg_pool2d(x, 2), i), [x]) < 1e-4
        assert check(lambda x: weighted_sum(nn.separable_filter(x, kernel), i), [x]) < 1e-4
        assert check(lambda x: weighted_sum(nn.unfold_neighborhoods(x, 3), i), [x]) < 1e-4


def test_separable_filter_matches_2d_valid_correlation():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((1, 1, 9, 8))
    g = np.array([0.1, 0.2, 0.4, 0.2, 0.1])
    y = nn.separable_filter(Tensor(x), g).data[0, 0]
    k2 = np.outer(g, g)
    ref = np.array([[np.sum(x[0, 0, i:i + 5, j:j + 5] * k2) for j in range(4)] for i in range(5)])
    np.testing.assert_allclose(y, ref, rtol=1e-12)


def test_unfold_neighbourhoods_zero_pads():
    x = Tensor(np.arange(9.0).reshape(1, 1, 3, 3))
    nb = nn.unfold_neighborhoods(x, 3).data     # (1, 3, 3, 9, 1)
    assert nb.shape == (1, 3, 3, 9, 1)
    np.testing.assert_array_equal(nb[0, 0, 0, :, 0], [0, 0, 0, 0, 0, 1, 0, 3, 4])
    np.testing.assert_array_equal(nb[0, 1, 1, :, 0], np.arange(9.0))


def test_activation_dispatch():
    x = Tensor(np.array([-2.0, 3.0]))
    np.testing.assert_array_equal(nn.activation("relu", x).data, [0.0, 3.0])
    assert nn.activation("softmax", x, axis=0).data.sum() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        nn.activation("softmax", x)
    with pytest.raises(ValueError):
        nn.activation("gelu", x)


def test_linear_gradients():
    rng = np.random.default_rng(11)
    for i in range(20):
        layer = nn.Linear(4, 3, rng, dtype=np.float64)
        layer.bias.data = rng.standard_normal(3)
        x = p64(rng, 5, 4)
        assert check(lambda x, w, b: weighted_sum(layer(x), i), [x, layer.weight, layer.bias]) < 1e-4


# ---------------------------------------------------------------------------
# GRU
# ---------------------------------------------------------------------------

def zero_gru(n_in, n_hidden, dtype=np.float64):
    cell = nn.GRUCell(n_in, n_hidden, np.random.default_rng(0), dtype=dtype)
    for p in cell.parameters():
        p.data = np.zeros_like(p.data)
    return cell


def test_gru_zero_weights_halves_state():
    cell = zero_gru(3, 4)
    h_prev = np.array([1.0, -2.0, 0.3, 7.0])
    h, gates = nn.gru_step(h_prev, np.array([5.0, -1.0, 2.0]), cell, return_gates=True)
    np.testing.assert_array_equal(gates["z"].data, 0.5)
    np.testing.assert_array_equal(gates["r"].data, 0.5)
    np.testing.assert_array_equal(gates["h_tilde"].data, 0.0)
    np.testing.assert_array_equal(h.data, 0.5 * h_prev)


def test_gru_scalar_hand_evaluation():
    cell = nn.GRUCell(1, 1, np.random.default_rng(0), dtype=np.float64)
    for w in (cell.W_z, cell.W_r, cell.W):
        w.data = np.ones((1, 2))
    h, gates = nn.gru_step(np.zeros(1), np.ones(1), cell, return_gates=True)
    assert gates["z"].data[0] == pytest.approx(0.7310585786300049, abs=1e-15)
    assert gates["h_tilde"].data[0] == pytest.approx(np.tanh(1.0), abs=1e-15)
    # h = (1 - z) * 0 + z * tanh(1) = sigmoid(1) * tanh(1)
    assert h.data[0] == pytest.approx(0.7310585786300049 * 0.7615941559557649, abs=1e-15)
    assert h.data[0] == pytest.approx(0.556770, abs=1e-6)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_gru_convex_combination(seed):
    rng = np.random.default_rng(seed)
    cell = nn.GRUCell(3, 5, rng, dtype=np.float64)
    for p in cell.parameters():
        p.data = 0.5 * rng.standard_normal(p.shape)   # keeps sigmoid away from float64 saturation
    h_prev = rng.standard_normal(5)
    h, g = nn.gru_step(h_prev, rng.standard_normal(3), cell, return_gates=True)
    lo = np.minimum(h_prev, g["h_tilde"].data)
    hi = np.maximum(h_prev, g["h_tilde"].data)
    assert np.all((h.data >= lo - 1e-12) & (h.data <= hi + 1e-12))
    assert np.all((g["z"].data > 0) & (g["z"].data < 1)) and np.all((g["r"].data > 0) & (g["r"].data < 1))


def test_gru_shape_error():
    cell = nn.GRUCell(3, 4, np.random.default_rng(0))
    with pytest.raises(ShapeError, match="gru_step"):
        nn.gru_step(np.zeros(4), np.zeros(2), cell)


def test_gru_gradients():
    rng = np.random.default_rng(12)
    for i in range(20):
        cell = nn.GRUCell(3, 4, rng, dtype=np.float64)
        for p in (cell.b_z, cell.b_r, cell.b):
            p.data = rng.standard_normal(4)
        h0, x = p64(rng, 2, 4), p64(rng, 2, 3)
        params = [h0, x, *cell.parameters()]
        assert check(lambda h0, x, *_: weighted_sum(cell(h0, x), i), params) < 1e-4


# ---------------------------------------------------------------------------
# local self-attention
# ---------------------------------------------------------------------------

def attention_reference(x, p, relative):
    """Per-pixel loop over the zero-padded neighbourhood."""
    d_in, h, w = x.shape
    k, r = p.k, p.k // 2
    wq, wk, wv = p.W_Q.data, p.W_K.data, p.W_V.data
    xp = np.pad(x, ((0, 0), (r, r), (r, r)))
    out = np.zeros((wq.shape[0], h, w))
    for i in range(h):
        for j in range(w):
            q = wq @ x[:, i, j]
            scores, values = [], []
            for a in range(k):
                for b in range(k):
                    xab = xp[:, i + a, j + b]
                    s = q @ (wk @ xab)
                    if relative:
                        s += q @ np.concatenate([p.r_row.data[a], p.r_col.data[b]])
                    scores.append(s)
                    values.append(wv @ xab)
            e = np.exp(np.array(scores) - max(scores))
            out[:, i, j] = (e / e.sum()) @ np.array(values)
    return out


@pytest.mark.parametrize("relative", [False, True])
def test_attention_matches_reference(relative):
    rng = np.random.default_rng(13)
    p = nn.LocalSelfAttention(3, 4, 3, rng, relative=relative, dtype=np.float64)
    x = rng.standard_normal((3, 5, 4))
    y = nn.local_self_attention(x, p, relative=relative)
    np.testing.assert_allclose(y.data, attention_reference(x, p, relative), rtol=1e-10, atol=1e-12)


def test_attention_k1_is_value_projection():
    rng = np.random.default_rng(14)
    p = nn.LocalSelfAttention(2, 4, 1, rng, relative=True, dtype=np.float64)
    x = rng.standard_normal((2, 2, 6, 5))
    y = nn.local_self_attention(x, p, relative=True).data
    expect = np.moveaxis(np.moveaxis(x, 1, -1) @ p.W_V.data.T, -1, 1)   # W_V x_ij at every pixel
    np.testing.assert_array_equal(y, expect)


def test_attention_two_equal_scores_average():
    # a 1-wide image with k=3 and W_K = 0: two of the three zero-padded neighbours are real
    p = nn.LocalSelfAttention(1, 2, 3, np.random.default_rng(0), relative=False, dtype=np.float64)
    p.W_Q.data = np.zeros((2, 1))
    p.W_K.data = np.zeros((2, 1))
    p.W_V.data = np.array([[1.0], [2.0]])
    x = np.array([[[3.0], [5.0]]])           # (1, 2, 1)
    y, wts = nn.local_self_attention(x, p, relative=False, return_weights=True)
    np.testing.assert_allclose(wts.data, 1 / 9)  # all nine scores equal, padding included
    assert y.data[0, 0, 0] == pytest.approx((3.0 + 5.0) / 9)


def test_attention_equal_scores_average_the_row():
    # relative row offsets of -60 silence the top and bottom rows; the middle row holds
    # the left padding, the pixel itself and its right neighbour with equal scores
    p = nn.LocalSelfAttention(1, 2, 3, np.random.default_rng(0), relative=True, dtype=np.float64)
    p.W_Q.data = np.array([[1.0], [0.0]])
    p.W_K.data = np.zeros((2, 1))
    p.W_V.data = np.array([[1.0], [1.0]])
    p.r_row.data = np.array([[-60.0], [0.0], [-60.0]])
    p.r_col.data = np.zeros((3, 1))
    x = np.array([[[1.0, 2.0]]])
    y, w = nn.local_self_attention(x, p, relative=True, return_weights=True)
    np.testing.assert_allclose(w.data[0, 0, 0, 3:6], 1 / 3, rtol=1e-12)
    assert y.data[0, 0, 0] == pytest.approx((0.0 + 1.0 + 2.0) / 3, rel=1e-12)


def test_attention_weighted_scores_ln3():
    p = nn.LocalSelfAttention(1, 2, 3, np.random.default_rng(0), relative=True, dtype=np.float64)
    p.W_Q.data = np.array([[1.0], [1.0]])
    p.W_K.data = np.zeros((2, 1))
    p.W_V.data = np.array([[1.0], [0.0]])
    p.r_row.data = np.array([[-80.0], [0.0], [-80.0]])
    p.r_col.data = np.array([[-80.0], [0.0], [np.log(3.0)]])
    x = np.array([[[1.0, 4.0]]])          # pixel (0,0): self value 1, right neighbour value 4
    y = nn.local_self_attention(x, p, relative=True).data
    assert y[0, 0, 0] == pytest.approx(0.25 * 1.0 + 0.75 * 4.0, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.sampled_from([1, 3, 5]))
def test_attention_weights_normalised_and_convex(seed, k):
    rng = np.random.default_rng(seed)
    p = nn.LocalSelfAttention(2, 4, k, rng, relative=True, dtype=np.float64)
    for t in p.parameters():
        t.data = 2 * rng.standard_normal(t.shape)
    x = 2 * rng.standard_normal((1, 2, 4, 4))
    y, w = nn.local_self_attention(x, p, relative=True, return_weights=True)
    np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-6)
    v = T.matmul(nn.unfold_neighborhoods(x, k), T.transpose(p.W_V)).data   # (1, H, W, K, d)
    yy = np.moveaxis(y.data, 1, -1)
    assert np.all(yy >= v.min(axis=-2) - 1e-12) and np.all(yy <= v.max(axis=-2) + 1e-12)


def test_attention_argument_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="odd"):
        nn.LocalSelfAttention(1, 2, 2, rng)
    with pytest.raises(ValueError, match="even"):
        nn.LocalSelfAttention(1, 3, 3, rng, relative=True)


def test_attention_gradients():
    rng = np.random.default_rng(15)
    for i in range(20):
        p = nn.LocalSelfAttention(2, 2, 3, rng, relative=True, dtype=np.float64)
        x = p64(rng, 1, 2, 3, 3)
        assert check(lambda x, *_: weighted_sum(p(x), i), [x, *p.parameters()]) < 1e-4


def test_module_registry_order_and_buffers():
    bn = nn.BatchNorm2d(3)
    assert [n for n, _ in bn.named_parameters()] == ["weight", "bias"]
    assert [n for n, _ in bn.named_buffers()] == ["running_mean", "running_var"]
    seq = nn.Sequential(nn.Linear(2, 2, np.random.default_rng(0)), nn.ReLU(), bn)
    assert [n for n, _ in seq.named_parameters()] == ["0.weight", "0.bias", "2.weight", "2.bias"]
