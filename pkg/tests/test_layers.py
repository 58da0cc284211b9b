import itertools

import numpy as np
import pytest

from jule3d.exceptions import DegenerateBatch, LabelOutOfRange, ShapeMismatch
from jule3d.net3d import layers as L
from jule3d.net3d.fused import block1_backward, block1_forward

from gradcheck import RTOL, max_rel_error, numeric_grad


def conv_oracle(x, w, b):
    n, cin, dx, dy, dz = x.shape
    cout, _, kx, ky, kz = w.shape
    out = np.zeros((n, cout, dx - kx + 1, dy - ky + 1, dz - kz + 1))
    for s, o, i, j, k in itertools.product(range(n), range(cout), *map(range, out.shape[2:])):
        acc = b[o]
        for c, a, p, q in itertools.product(range(cin), range(kx), range(ky), range(kz)):
            acc += x[s, c, i + a, j + p, k + q] * w[o, c, a, p, q]
        out[s, o, i, j, k] = acc
    return out


@pytest.mark.parametrize("method", ["gemm", "fft"])
@pytest.mark.parametrize("shape, kshape", [((2, 1, 6, 6, 6), (3, 1, 3, 3, 3)),
                                           ((1, 2, 8, 7, 6), (2, 2, 5, 5, 5)),
                                           ((1, 3, 5, 5, 5), (2, 3, 5, 5, 5))])
def test_conv_matches_loop_oracle(rng, method, shape, kshape):
    x = rng.standard_normal(shape)
    w = rng.standard_normal(kshape)
    b = rng.standard_normal(kshape[0])
    out, _ = L.conv3d_forward(x, w, b, method=method)
    np.testing.assert_allclose(out, conv_oracle(x, w, b), atol=1e-6, rtol=0)


def test_conv_float32_matches_oracle(rng):
    x = rng.standard_normal((1, 1, 6, 6, 6))
    w = rng.standard_normal((4, 1, 5, 5, 5))
    b = rng.standard_normal(4)
    out, _ = L.conv3d_forward(x.astype(np.float32), w.astype(np.float32), b.astype(np.float32))
    np.testing.assert_allclose(out, conv_oracle(x, w, b), atol=1e-4)


def test_conv1_shape(rng):
    x = rng.standard_normal((1, 1, 27, 27, 27)).astype(np.float32)
    w = rng.standard_normal((50, 1, 5, 5, 5)).astype(np.float32)
    out, _ = L.conv3d_forward(x, w, np.zeros(50, np.float32))
    assert out.shape == (1, 50, 23, 23, 23)


def test_delta_kernel_crops(rng):
    x = rng.standard_normal((1, 1, 9, 8, 7))
    w = np.zeros((1, 1, 5, 5, 5))
    w[0, 0, 2, 2, 2] = 1
    out, _ = L.conv3d_forward(x, w, np.zeros(1))
    np.testing.assert_allclose(out[0, 0], x[0, 0, 2:-2, 2:-2, 2:-2], atol=1e-12)


def test_conv_shape_errors(rng):
    with pytest.raises(ShapeMismatch):
        L.conv3d_forward(rng.standard_normal((1, 2, 6, 6, 6)), rng.standard_normal((1, 1, 3, 3, 3)), np.zeros(1))
    with pytest.raises(ShapeMismatch):
        L.conv3d_forward(rng.standard_normal((1, 1, 4, 6, 6)), rng.standard_normal((1, 1, 5, 5, 5)), np.zeros(1))
    with pytest.raises(ShapeMismatch):
        L.conv3d_forward(rng.standard_normal((1, 6, 6, 6)), rng.standard_normal((1, 1, 3, 3, 3)), np.zeros(1))


@pytest.mark.parametrize("method", ["gemm", "fft"])
def test_conv_gradients(rng, method):
    x = rng.standard_normal((2, 2, 5, 6, 5))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    b = rng.standard_normal(3)
    r = rng.standard_normal((2, 3, 3, 4, 3))

    def f():
        return float((L.conv3d_forward(x, w, b, method=method)[0] * r).sum())

    _, cache = L.conv3d_forward(x, w, b, method=method)
    gx, gw, gb = L.conv3d_backward(r, cache)
    assert max_rel_error(gx, numeric_grad(f, x)) <= RTOL
    assert max_rel_error(gw, numeric_grad(f, w)) <= RTOL
    assert max_rel_error(gb, numeric_grad(f, b)) <= RTOL


def test_conv_backward_paths_agree(rng):
    x = rng.standard_normal((2, 8, 7, 7, 7))
    w = rng.standard_normal((4, 8, 5, 5, 5))
    g = rng.standard_normal((2, 4, 3, 3, 3))
    res = [L.conv3d_backward(g, L.conv3d_forward(x, w, np.zeros(4), method=m)[1]) for m in ("gemm", "fft")]
    for a, c in zip(*res):
        np.testing.assert_allclose(a, c, atol=1e-9)


def test_maxpool_examples(rng):
    x = np.arange(8, dtype=np.float64).reshape(1, 1, 2, 2, 2)
    out, _ = L.maxpool3d_forward(x)
    assert out.shape == (1, 1, 1, 1, 1) and out.item() == 7
    const = np.full((1, 2, 4, 4, 4), 3.5)
    assert (L.maxpool3d_forward(const)[0] == 3.5).all()
    assert L.maxpool3d_forward(rng.standard_normal((1, 2, 23, 23, 23)))[0].shape == (1, 2, 11, 11, 11)
    with pytest.raises(ShapeMismatch):
        L.maxpool3d_forward(rng.standard_normal((1, 1, 1, 4, 4)))


def test_maxpool_gradient(rng):
    x = rng.standard_normal((2, 2, 5, 4, 5))
    r = rng.standard_normal((2, 2, 2, 2, 2))

    def f():
        return float((L.maxpool3d_forward(x)[0] * r).sum())

    out, cache = L.maxpool3d_forward(x)
    gx = L.maxpool3d_backward(r, cache)
    assert gx.shape == x.shape
    assert max_rel_error(gx, numeric_grad(f, x)) <= RTOL


def _bn_params(c):
    return np.ones(c), np.zeros(c), np.zeros(c), np.ones(c)


def test_batchnorm_constant_channel():
    x = np.full((2, 1, 3, 3, 3), 4.0)
    out, _ = L.batchnorm3d_forward(x, *_bn_params(1), training=True)
    assert np.abs(out).max() == 0


def test_batchnorm_affine_law(rng):
    x = rng.standard_normal((4, 3, 5, 5, 5))
    x = (x - x.mean(axis=(0, 2, 3, 4), keepdims=True)) / x.std(axis=(0, 2, 3, 4), keepdims=True)
    gamma, beta = np.full(3, 2.0), np.full(3, 3.0)
    out, _ = L.batchnorm3d_forward(x, gamma, beta, np.zeros(3), np.ones(3), training=True)
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3, 4)), 3.0, atol=1e-9)
    np.testing.assert_allclose(out.std(axis=(0, 2, 3, 4)), 2.0, rtol=1e-4)


def test_batchnorm_running_stats(rng):
    x = rng.standard_normal((2, 2, 3, 3, 3)) * 3 + 1
    g, b, rm, rv = _bn_params(2)
    L.batchnorm3d_forward(x, g, b, rm, rv, training=True)
    flat = x.transpose(1, 0, 2, 3, 4).reshape(2, -1)
    np.testing.assert_allclose(rm, 0.1 * flat.mean(axis=1))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * flat.var(axis=1, ddof=1))
    out, _ = L.batchnorm3d_forward(x, g, b, rm, rv, training=False)
    expected = (x - rm[None, :, None, None, None]) / np.sqrt(rv[None, :, None, None, None] + 1e-5)
    np.testing.assert_allclose(out, expected)


def test_batchnorm_degenerate_batch():
    with pytest.raises(DegenerateBatch):
        L.batchnorm3d_forward(np.ones((1, 2, 1, 1, 1)), *_bn_params(2), training=True)


def test_batchnorm_gradient(rng):
    x = rng.standard_normal((2, 3, 2, 2, 2))
    gamma = rng.uniform(0.5, 2, 3)
    beta = rng.standard_normal(3)
    r = rng.standard_normal(x.shape)

    def f():
        return float((L.batchnorm3d_forward(x, gamma, beta, np.zeros(3), np.ones(3), True)[0] * r).sum())

    _, cache = L.batchnorm3d_forward(x, gamma, beta, np.zeros(3), np.ones(3), True)
    gx, gg, gb = L.batchnorm3d_backward(r, cache)
    assert max_rel_error(gx, numeric_grad(f, x)) <= RTOL
    assert max_rel_error(gg, numeric_grad(f, gamma)) <= RTOL
    assert max_rel_error(gb, numeric_grad(f, beta)) <= RTOL


def test_relu(rng):
    out, mask = L.relu_forward(np.array([-1.0, 2.0]))
    np.testing.assert_array_equal(out, [0.0, 2.0])
    assert (L.relu_forward(-np.abs(rng.standard_normal(10)) - 0.1)[0] == 0).all()
    x = rng.standard_normal((3, 7))
    x[np.abs(x) < 0.01] = 0.5  # keep away from the kink
    r = rng.standard_normal(x.shape)

    def f():
        return float((L.relu_forward(x)[0] * r).sum())

    gx = L.relu_backward(r, L.relu_forward(x)[1])
    assert max_rel_error(gx, numeric_grad(f, x)) <= RTOL
    np.testing.assert_array_equal(gx, r * (x > 0))


def test_fc_examples(rng):
    x = rng.standard_normal((5, 4))
    np.testing.assert_allclose(L.fc_forward(x, np.eye(4), np.zeros(4))[0], x)
    b = rng.standard_normal(3)
    np.testing.assert_allclose(L.fc_forward(x, np.zeros((3, 4)), b)[0], np.tile(b, (5, 1)))
    w = rng.standard_normal((3, 4))
    expected = np.array([[sum(w[o, i] * row[i] for i in range(4)) + b[o] for o in range(3)] for row in x])
    np.testing.assert_allclose(L.fc_forward(x, w, b)[0], expected, atol=1e-6)
    with pytest.raises(ShapeMismatch):
        L.fc_forward(rng.standard_normal((5, 3)), w, b)


def test_fc_gradient(rng):
    x = rng.standard_normal((3, 4))
    w = rng.standard_normal((5, 4))
    b = rng.standard_normal(5)
    r = rng.standard_normal((3, 5))

    def f():
        return float((L.fc_forward(x, w, b)[0] * r).sum())

    gx, gw, gb = L.fc_backward(r, L.fc_forward(x, w, b)[1])
    for analytic, arr in ((gx, x), (gw, w), (gb, b)):
        assert max_rel_error(analytic, numeric_grad(f, arr)) <= RTOL


def test_l2normalize(rng):
    np.testing.assert_allclose(L.l2normalize_forward(np.array([[3.0, 4.0]]))[0], [[0.6, 0.8]])
    u = np.array([[0.0, 1.0, 0.0]])
    np.testing.assert_array_equal(L.l2normalize_forward(u)[0], u)
    assert (L.l2normalize_forward(np.zeros((1, 3)))[0] == 0).all()
    x = rng.standard_normal((3, 6))
    r = rng.standard_normal(x.shape)

    def f():
        return float((L.l2normalize_forward(x)[0] * r).sum())

    gx = L.l2normalize_backward(r, L.l2normalize_forward(x)[1])
    assert max_rel_error(gx, numeric_grad(f, x)) <= RTOL
    row = x[0]
    norm = np.linalg.norm(row)
    jac = np.eye(6) / norm - np.outer(row, row) / norm ** 3
    np.testing.assert_allclose(gx[0], jac @ r[0], atol=1e-12)


def test_softmax_examples(rng):
    feats = rng.standard_normal((4, 6))
    loss, _ = L.softmax_xent(feats, np.array([0, 1, 2, 3]), np.zeros((5, 6)), np.zeros(5))
    assert loss == pytest.approx(np.log(5))
    losses = []
    for margin in (1.0, 10.0, 50.0):
        w = np.zeros((3, 6))
        w[1, 0] = margin
        losses.append(L.softmax_xent(np.eye(6)[:1], np.array([1]), w, np.zeros(3))[0])
    assert losses[0] > losses[1] > losses[2] and losses[2] < 1e-20
    with pytest.raises(LabelOutOfRange):
        L.softmax_xent(feats, np.array([0, 1, 2, 3]), np.zeros((3, 6)), np.zeros(3))


def test_softmax_gradient(rng):
    feats = rng.standard_normal((5, 4))
    labels = rng.integers(0, 3, 5)
    w = rng.standard_normal((3, 4))
    b = rng.standard_normal(3)

    def f():
        return L.softmax_xent(feats, labels, w, b)[0]

    _, (gf, gw, gb) = L.softmax_xent(feats, labels, w, b)
    for analytic, arr in ((gf, feats), (gw, w), (gb, b)):
        assert max_rel_error(analytic, numeric_grad(f, arr)) <= RTOL


def _reference_block1(x, w, b, gamma, beta, rm, rv, training):
    h, c_conv = L.conv3d_forward(x, w, b)
    h, c_bn = L.batchnorm3d_forward(h, gamma, beta, rm, rv, training)
    h, c_relu = L.relu_forward(h)
    h, c_pool = L.maxpool3d_forward(h)
    return h, (c_conv, c_bn, c_relu, c_pool)


@pytest.mark.parametrize("training", [True, False])
def test_fused_block_matches_reference(rng, training):
    x = rng.standard_normal((3, 1, 11, 11, 11))
    w = rng.standard_normal((4, 1, 5, 5, 5)) * 0.2
    b = rng.standard_normal(4)
    gamma = rng.uniform(0.5, 2, 4)
    beta = rng.standard_normal(4)
    stats = [(rng.standard_normal(4), rng.uniform(0.5, 2, 4)) for _ in range(2)]
    rm1, rv1 = stats[0][0].copy(), stats[0][1].copy()
    rm2, rv2 = rm1.copy(), rv1.copy()
    fused, cache = block1_forward(x, w, b, gamma, beta, rm1, rv1, training, keep_cache=True)
    ref, rcache = _reference_block1(x, w, b, gamma, beta, rm2, rv2, training)
    np.testing.assert_allclose(fused, ref, atol=1e-10)
    np.testing.assert_allclose(rm1, rm2, atol=1e-12)
    np.testing.assert_allclose(rv1, rv2, atol=1e-12)
    if not training:
        return
    g = rng.standard_normal(fused.shape)
    gw, gb, ggamma, gbeta = block1_backward(g, cache)
    c_conv, c_bn, c_relu, c_pool = rcache
    h = L.relu_backward(L.maxpool3d_backward(g, c_pool), c_relu)
    h, rgamma, rbeta = L.batchnorm3d_backward(h, c_bn)
    _, rgw, rgb = L.conv3d_backward(h, c_conv, need_input_grad=False)
    np.testing.assert_allclose(gw, rgw, atol=1e-9)
    np.testing.assert_allclose(ggamma, rgamma, atol=1e-9)
    np.testing.assert_allclose(gbeta, rbeta, atol=1e-9)
    # a bias feeding batch norm has zero gradient up to rounding
    np.testing.assert_allclose(gb, rgb, atol=1e-9)
