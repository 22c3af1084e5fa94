import numpy as np
import pytest

from encstream.tensor_nn import (LayerSpec as L, NetworkSpec, ShapeError, accuracy, backprop, col2im,
                                 conv_out_size, forward, im2col, infer, init_params,
                                 sequential_matmul, softmax_cross_entropy)


def one_fc(w, b=0.0):
    net = NetworkSpec((L.fc(1),), (1,), 1)
    return net, [{"W": np.array([[w]], np.float32), "b": np.array([b], np.float32)}]


def test_fc_scalar():
    net, p = one_fc(2.0)
    assert infer(net, p, np.array([3.0], np.float32)).tolist() == [6.0]


def test_relu_and_maxpool_definitions():
    net = NetworkSpec((L.relu(),), (3,), 3)
    assert infer(net, [{}], np.array([-1, 0, 2], np.float32)).tolist() == [0, 0, 2]
    net = NetworkSpec((L.maxpool(2),), (1, 2, 2), 1)
    assert infer(net, [{}], np.array([[[1, 2], [3, 4]]], np.float32)).tolist() == [4]


def test_fc_backprop_example():
    net, p = one_fc(2.0)
    rec = forward(net, p, np.array([[3.0]], np.float32))
    g = backprop(net, p, rec, np.array([[1.0]]))
    assert g.params[0]["W"].tolist() == [[3.0]]
    assert g.input.tolist() == [[2.0]]


def test_relu_backprop_example():
    net = NetworkSpec((L.relu(),), (2,), 2)
    rec = forward(net, [{}], np.array([[-1.0, 2.0]], np.float32))
    assert backprop(net, [{}], rec, np.array([[5.0, 5.0]])).input.tolist() == [[0, 5]]


def test_backprop_requires_record():
    net, p = one_fc(2.0)
    with pytest.raises(ValueError):
        backprop(net, p, None, np.ones((1, 1)))
    other, _ = one_fc(1.0)
    rec = forward(other, p, np.ones((1, 1), np.float32))
    with pytest.raises(ValueError):
        backprop(net, p, rec, np.ones((1, 1)))


def _loss(net, params, x, coef):
    return float((forward(net, params, x).output * coef).sum())


def _fd_check(net, seed, n=3):
    """Central differences (h=1e-4, float64) against backprop for every parameter."""
    rng = np.random.default_rng(seed)
    params = init_params(net, seed, dtype=np.float64)
    for i, layer in enumerate(net.layers):
        if "b" in params[i]:
            params[i]["b"] = rng.normal(0, 0.1, params[i]["b"].shape)
        if "alpha" in params[i]:
            params[i]["alpha"] = rng.uniform(0.5, 1.5, params[i]["alpha"].shape)
            params[i]["beta"] = rng.normal(0, 0.1, params[i]["beta"].shape)
    x = rng.normal(size=(n,) + net.input_shape)
    coef = rng.normal(size=(n, net.num_classes))
    rec = forward(net, params, x)
    grads = backprop(net, params, rec, coef)
    h = 1e-4
    for i, p in enumerate(params):
        for key, arr in p.items():
            num = np.zeros_like(arr)
            for j in np.ndindex(arr.shape):
                old = arr[j]
                arr[j] = old + h
                up = _loss(net, params, x, coef)
                arr[j] = old - h
                down = _loss(net, params, x, coef)
                arr[j] = old
                num[j] = (up - down) / (2 * h)
            got = grads.params[i][key]
            rel = np.abs(got - num) / np.maximum(1.0, np.abs(num))
            assert rel.max() < 1e-5, (net.describe(i), key, rel.max())


def test_mlp_gradients_match_finite_differences():
    net = NetworkSpec((L.fc(3), L.relu(), L.fc(2)), (4,), 2)
    _fd_check(net, 1)


def test_conv_bn_pool_gradients_match_finite_differences():
    net = NetworkSpec((L.conv(2, 3, 1, 1), L.batchnorm(), L.relu(), L.maxpool(2),
                       L.conv(2, 2, 2, 0), L.fc(3)), (2, 6, 6), 3)
    _fd_check(net, 2, n=2)


def test_input_gradient_matches_finite_differences():
    net = NetworkSpec((L.conv(3, 3, 2, 1), L.relu(), L.fc(2)), (1, 5, 5), 2)
    params = init_params(net, 3, dtype=np.float64)
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 1, 5, 5))
    coef = rng.normal(size=(2, 2))
    g = backprop(net, params, forward(net, params, x), coef).input
    h = 1e-4
    for j in [(0, 0, 0, 0), (1, 0, 2, 3), (0, 0, 4, 4)]:
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        num = (_loss(net, params, xp, coef) - _loss(net, params, xm, coef)) / (2 * h)
        assert abs(g[j] - num) < 1e-5 * max(1, abs(num))


def _naive_windows(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh, ow = conv_out_size(h, kh, stride, pad), conv_out_size(w, kw, stride, pad)
    out = []
    for r in range(oh):
        for q in range(ow):
            win = []
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        win.append(xp[:, ch, r * stride + i, q * stride + j])
            out.append(np.stack(win, axis=1))
    return np.stack(out, axis=1)


@pytest.mark.parametrize("shape,k,s,p", [((2, 3, 5, 5), (3, 3), 1, 1), ((1, 2, 7, 6), (2, 3), 2, 0),
                                         ((1, 1, 4, 4), (4, 4), 1, 0)])
def test_im2col_window_order(shape, k, s, p):
    x = np.random.default_rng(0).normal(size=shape)
    assert np.array_equal(im2col(x, k, s, p), _naive_windows(x, k[0], k[1], s, p))


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 6, 5))
    cols = im2col(x, (3, 2), 2, 1)
    c = rng.normal(size=cols.shape)
    assert np.isclose((cols * c).sum(), (x * col2im(c, x.shape, (3, 2), 2, 1)).sum())


def test_conv_output_shape_rule():
    for h, k, s, p in [(28, 5, 1, 0), (7, 3, 2, 1), (5, 5, 1, 2), (9, 2, 3, 0)]:
        net = NetworkSpec((L.conv(1, k, s, p),), (1, h, h), conv_out_size(h, k, s, p) ** 2)
        assert net.out_shape(0) == (1, (h + 2 * p - k) // s + 1, (h + 2 * p - k) // s + 1)


def test_shape_errors_name_the_layer():
    with pytest.raises(ShapeError, match="layer 1"):
        NetworkSpec((L.conv(2, 3), L.conv(2, 9)), (1, 6, 6), 8)
    with pytest.raises(ShapeError, match="classes"):
        NetworkSpec((L.fc(3),), (4,), 2)
    with pytest.raises(ShapeError):
        NetworkSpec((), (4,), 4)


def test_sequential_matmul_matches_blas_and_is_ordered():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(7, 33)).astype(np.float32)
    w = rng.normal(size=(5, 33)).astype(np.float32)
    seq = sequential_matmul(a, w)
    assert np.allclose(seq, a @ w.T, atol=1e-4)
    acc = np.zeros(5, np.float32)
    for k in range(33):
        acc = acc + a[3, k] * w[:, k]
    assert np.array_equal(seq[3], acc)


def test_float32_throughout_and_deterministic():
    net = NetworkSpec((L.conv(2, 3), L.relu(), L.fc(3)), (1, 5, 5), 3)
    p = init_params(net, 0)
    x = np.random.default_rng(0).random((4, 1, 5, 5)).astype(np.float32)
    a, b = infer(net, p, x), infer(net, p, x)
    assert a.dtype == np.float32 and np.array_equal(a, b)
    rec = forward(net, p, x)
    g1 = backprop(net, p, rec, np.ones((4, 3), np.float32))
    g2 = backprop(net, p, forward(net, p, x), np.ones((4, 3), np.float32))
    assert all(np.array_equal(g1.params[i][k], g2.params[i][k]) for i in range(3) for k in g1.params[i])


def test_accuracy_examples():
    net = NetworkSpec((L.fc(2),), (2,), 2)
    ident = [{"W": np.eye(2, dtype=np.float32), "b": np.zeros(2, np.float32)}]
    x = np.eye(2, dtype=np.float32)
    assert accuracy(net, ident, (x, np.array([0, 1]))) == 1.0
    const = [{"W": np.zeros((2, 2), np.float32), "b": np.zeros(2, np.float32)}]
    assert accuracy(net, const, (x, np.array([1, 1]))) == 0.0
    x3 = np.array([[1, 0], [0, 1], [1, 0]], np.float32)
    assert accuracy(net, ident, (x3, np.array([0, 1, 1])), n=3) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        accuracy(net, ident, (x[:0], np.array([], int)))


def test_softmax_cross_entropy_gradient():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(4, 3))
    y = np.array([0, 2, 1, 1])
    loss, g = softmax_cross_entropy(z, y)
    h = 1e-6
    zp = z.copy()
    zp[1, 2] += h
    assert (softmax_cross_entropy(zp, y)[0] - loss) / h == pytest.approx(g[1, 2], abs=1e-5)
