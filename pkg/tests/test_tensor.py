import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from align.tensor import (
    GraphError,
    Tensor,
    activation,
    avg_pool2x2,
    backward,
    bilinear_upsample,
    conv2d,
    finite_difference_check,
    grad,
    no_grad,
    reduce,
    softmax,
)


def naive_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for i in range(n):
        for o in range(f):
            for r in range(ho):
                for s in range(wo):
                    acc = b[o]
                    for ch in range(c):
                        for p in range(kh):
                            for q in range(kw):
                                acc += xp[i, ch, r * stride + p, s * stride + q] * w[o, ch, p, q]
                    out[i, o, r, s] = acc
    return out


# -- conv2d ------------------------------------------------------------------------


def test_conv_all_ones_is_nine():
    out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 9.0


def test_conv_zero_kernel_gives_bias():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 6, 6)))
    out = conv2d(x, Tensor(np.zeros((4, 3, 3, 3))), Tensor(np.array([1.0, -2.0, 0.5, 3.0])), padding=1)
    for k, b in enumerate([1.0, -2.0, 0.5, 3.0]):
        assert np.all(out.data[:, k] == b)


def test_conv_matches_loops_hand_config():
    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1)
    np.testing.assert_allclose(out.data, naive_conv(x, w, b, 1, 1), atol=1e-12, rtol=0)


@pytest.mark.parametrize("seed", range(50))
def test_conv_matches_loops_random(seed):
    rng = np.random.default_rng(seed)
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    k = int(rng.choice([1, 3]))
    # choose H so that the output size divides exactly
    ho, wo = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    h, w = (ho - 1) * stride + k - 2 * pad, (wo - 1) * stride + k - 2 * pad
    if h < 1 or w < 1:
        h, w, pad = (ho - 1) * stride + k, (wo - 1) * stride + k, 0
    x = rng.normal(size=(int(rng.integers(1, 3)), int(rng.integers(1, 4)), h, w))
    kern = rng.normal(size=(int(rng.integers(1, 4)), x.shape[1], k, k))
    b = rng.normal(size=kern.shape[0])
    out = conv2d(Tensor(x), Tensor(kern), Tensor(b), stride=stride, padding=pad)
    np.testing.assert_allclose(out.data, naive_conv(x, kern, b, stride, pad), atol=1e-12, rtol=0)


def test_conv_shape_errors_name_both_shapes():
    with pytest.raises(ValueError, match=r"\(1, 2, 5, 5\).*\(3, 3, 3, 3\)|\(3, 3, 3, 3\).*\(1, 2, 5, 5\)"):
        conv2d(Tensor(np.zeros((1, 2, 5, 5))), Tensor(np.zeros((3, 3, 3, 3))))
    with pytest.raises(ValueError):
        conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride=2)
    with pytest.raises(ValueError):
        conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


# -- elementwise / reductions ---------------------------------------------------------


def test_relu_and_sigmoid_values():
    np.testing.assert_array_equal(activation(Tensor([-1.0, 0.0, 2.0]), "relu").data, [0, 0, 2])
    assert activation(Tensor([0.0]), "sigmoid").item() == 0.5
    # independent high-precision evaluation
    import mpmath

    mpmath.mp.dps = 40
    expected = float(1 / (1 + mpmath.exp(-2)))
    assert activation(Tensor([2.0]), "sigmoid").item() == pytest.approx(expected, abs=1e-15)
    with pytest.raises(ValueError):
        activation(Tensor([1.0]), "gelu")


def test_reductions():
    assert reduce(Tensor([[1.0, 2.0], [3.0, 4.0]]), "mean").item() == 2.5
    assert reduce(Tensor(np.zeros((3, 3))), "abs_sum").item() == 0.0
    a = np.random.default_rng(3).normal(size=(4, 4))
    total = 0.0
    for v in a.ravel():
        total += abs(v)
    assert reduce(Tensor(a), "abs_sum").item() == pytest.approx(total, abs=1e-12)
    np.testing.assert_allclose(reduce(Tensor(a), "mean", (1,)).data, a.mean(1))
    with pytest.raises(ValueError):
        reduce(Tensor(a), "sum", (2,))


def test_no_broadcasting_between_shaped_tensors():
    with pytest.raises(ValueError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((1, 3)))
    # scalars are allowed, and explicit expand works
    assert (Tensor(np.ones((2, 3))) * 2.0).data.sum() == 12.0
    assert (Tensor(np.ones((2, 3))) + Tensor(np.ones((1, 3))).expand(2, 3)).data.sum() == 12.0


def test_softmax_rows_sum_to_one():
    x = Tensor(np.random.default_rng(4).normal(size=(5, 7)) * 30)
    np.testing.assert_allclose(softmax(x).data.sum(1), 1.0, atol=1e-12)


# -- upsampling -------------------------------------------------------------------


def test_upsample_constant_identity_and_hand_case():
    c = bilinear_upsample(Tensor(np.full((1, 1, 2, 2), 3.7)), (8, 8))
    np.testing.assert_allclose(c.data, 3.7, atol=1e-15)
    m = np.array([[[[0.0, 1.0], [0.0, 1.0]]]])
    np.testing.assert_array_equal(bilinear_upsample(Tensor(m), (2, 2)).data, m)
    out = bilinear_upsample(Tensor(np.array([[[[0.0, 1.0], [2.0, 3.0]]]])), (3, 3)).data[0, 0]
    np.testing.assert_allclose(out, [[0, 0.5, 1], [1, 1.5, 2], [2, 2.5, 3]], atol=1e-15)
    with pytest.raises(ValueError):
        bilinear_upsample(Tensor(np.zeros((1, 1, 4, 4))), (2, 8))


def test_upsample_matches_formula_on_random_map():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(3, 4))
    H, W = 7, 9
    out = bilinear_upsample(Tensor(a[None, None]), (H, W)).data[0, 0]
    for i in range(H):
        for j in range(W):
            y, x = i * 2 / (H - 1), j * 3 / (W - 1)
            y0, x0 = min(int(y), 1), min(int(x), 2)
            dy, dx = y - y0, x - x0
            v = (a[y0, x0] * (1 - dy) * (1 - dx) + a[y0 + 1, x0] * dy * (1 - dx)
                 + a[y0, x0 + 1] * (1 - dy) * dx + a[y0 + 1, x0 + 1] * dy * dx)
            assert out[i, j] == pytest.approx(v, abs=1e-12)


# -- backward ----------------------------------------------------------------------


def test_backward_sum_and_mean_square():
    x = Tensor(np.random.default_rng(6).normal(size=(3, 4)), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))
    x.zero_grad()
    ((x * x).mean() * 0.5).backward()
    np.testing.assert_allclose(x.grad, x.data / 12, atol=1e-15)


def test_fan_out_accumulates():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (x * 3.0 + x * x).sum().backward()
    np.testing.assert_allclose(x.grad, 3 + 2 * x.data)


def test_backward_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        (x * 2.0).backward()  # non-scalar
    y = (x * x).sum()
    y.backward()
    with pytest.raises(GraphError):
        y.backward()  # graph freed
    y2 = (x * x).sum()
    y2.backward(retain_graph=True)
    y2.backward()
    np.testing.assert_allclose(x.grad, 2 * 2 * np.ones(3) + 2 * np.ones(3))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad
    with pytest.raises(GraphError):
        backward(y)


def test_backward_is_bitwise_deterministic():
    rng = np.random.default_rng(7)
    x0, w0 = rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(4, 3, 3, 3))

    def run():
        x, w = Tensor(x0, requires_grad=True), Tensor(w0, requires_grad=True)
        (conv2d(x, w, padding=1).relu() * conv2d(x, w, padding=1)).mean().backward()
        return x.grad.copy(), w.grad.copy()

    a, b = run(), run()
    assert all(np.array_equal(p, q) for p, q in zip(a, b))


def test_linearity_of_gradients():
    rng = np.random.default_rng(8)
    x0 = rng.normal(size=(4, 5))

    def f(x):
        return (x.sigmoid() * x).sum()

    def g(x):
        return (x.tanh() ** 2).mean()

    gf = grad(f(xf := Tensor(x0, requires_grad=True)), [xf])[0].data
    gg = grad(g(xg := Tensor(x0, requires_grad=True)), [xg])[0].data
    xc = Tensor(x0, requires_grad=True)
    gc = grad(f(xc) * 2.5 + g(xc) * -0.7, [xc])[0].data
    np.testing.assert_allclose(gc, 2.5 * gf - 0.7 * gg, atol=1e-12)


def test_second_order_gradient():
    # d/dx of (d/dx sum x^3) . 1 = 6x
    x = Tensor(np.array([0.5, -1.0, 2.0]), requires_grad=True)
    (gx,) = grad((x ** 3).sum(), [x], create_graph=True)
    (ggx,) = grad(gx.sum(), [x])
    np.testing.assert_allclose(ggx.data, 6 * x.data)


def test_conv_double_backward_matches_fd():
    rng = np.random.default_rng(9)
    w = Tensor(rng.normal(size=(2, 1, 3, 3)), requires_grad=True)

    def fn(x):
        (gx,) = grad((conv2d(x, w, padding=1).sigmoid()).sum(), [x], create_graph=True)
        return (gx * gx).sum()

    assert finite_difference_check(fn, rng.normal(size=(1, 1, 5, 5))) < 1e-6


# -- finite differences ---------------------------------------------------------------


def test_fd_check_trivial_cases():
    x = np.random.default_rng(10).normal(size=(3, 3))
    assert finite_difference_check(lambda t: t.sum(), x) < 1e-9
    x0 = Tensor(np.zeros(4), requires_grad=True)
    (g,) = grad(x0.sum().sigmoid(), [x0])
    np.testing.assert_allclose(g.data, 0.25)
    assert finite_difference_check(lambda t: t.sum().sigmoid(), np.zeros(4)) < 1e-6
    with pytest.raises(ValueError):
        finite_difference_check(lambda t: t.sum(), x, step=0.1)
    with pytest.raises(FloatingPointError):
        finite_difference_check(lambda t: (t * 0.0).sum().log(), x)


OPS = {
    "add": lambda x: (x + x * 0.3).sum(),
    "sub_div": lambda x: ((x - 2.0) / (x * x + 1.0)).sum(),
    "pow": lambda x: ((x * x + 1.0) ** 1.5).sum(),
    "exp_log": lambda x: ((x * 0.5).exp() + (x * x + 0.5).log()).sum(),
    "abs": lambda x: (x.abs() * x).sum(),
    "relu": lambda x: (x.relu() * x).sum(),
    "sigmoid_tanh": lambda x: (x.sigmoid() * x.tanh()).sum(),
    "sqrt_clamp": lambda x: ((x * x + 1.0).sqrt() + x.clamp(-0.5, 0.5) * x).sum(),
    "max": lambda x: x.max((2, 3)).sum(),
    "mean_abs_sum": lambda x: x.mean((1,)).abs_sum(),
    "reshape_T": lambda x: (x.reshape(x.shape[0], -1).T @ x.reshape(x.shape[0], -1)).sum(),
    "slice_pick": lambda x: (x[:, :, 1:, :-1] * 2.0).sum() + x.reshape(x.shape[0], -1).pick([1] * x.shape[0]).sum(),
    "expand": lambda x: (x.mean((2, 3), keepdims=True).expand(x.shape) * x).sum(),
    "softmax": lambda x: (softmax(x.reshape(1, -1)) * Tensor(np.arange(64.0).reshape(1, -1))).sum(),
    "conv": lambda x: conv2d(x, Tensor(np.linspace(-1, 1, 18).reshape(2, 1, 3, 3)), Tensor(np.array([0.1, -0.2])), padding=1).tanh().sum(),
    "conv_stride": lambda x: conv2d(x, Tensor(np.linspace(-1, 1, 8).reshape(2, 1, 2, 2)), stride=2).sigmoid().sum(),
    "avg_pool": lambda x: (avg_pool2x2(x) ** 2).sum(),
    "upsample": lambda x: (bilinear_upsample(avg_pool2x2(x), (8, 8)) * x).sum(),
}


@pytest.mark.parametrize("name", sorted(OPS))
@pytest.mark.parametrize("seed", range(20))
def test_every_op_passes_fd(name, seed):
    x = np.random.default_rng(seed).normal(size=(1, 1, 8, 8))
    # keep away from the kinks of relu/abs/clamp/max where central differences are meaningless
    x = np.where((np.abs(x) < 0.05) | (np.abs(np.abs(x) - 0.5) < 0.05), 0.3, x)
    assert finite_difference_check(OPS[name], x) < 1e-4


# -- properties ---------------------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 4))
def test_upsample_preserves_constants(seed, h, w):
    c = np.random.default_rng(seed).normal()
    out = bilinear_upsample(Tensor(np.full((1, 1, h, w), c)), (h + 3, w + 5))
    np.testing.assert_allclose(out.data, c, rtol=1e-12, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_values_stay_finite(seed):
    x = Tensor(np.random.default_rng(seed).normal(size=(3, 4)) * 50, requires_grad=True)
    out = softmax(x).log().sum() + x.sigmoid().sum()
    out.backward()
    assert np.isfinite(out.data).all() and np.isfinite(x.grad).all()

