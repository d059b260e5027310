import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from evfuse.nn import functional as F
from evfuse.nn import BackboneSpec, handcrafted_backbone, random_backbone
from _gradcheck import numeric_grad, rel_error


# ---------------------------------------------------------------- conv2d

def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((3, 5, 4))
    w = np.eye(3).reshape(3, 3, 1, 1)
    np.testing.assert_array_equal(F.conv2d(x, w, np.zeros(3)), x)


def test_conv_zero_kernel_bias():
    x = np.random.default_rng(1).standard_normal((2, 6, 6))
    out = F.conv2d(x, np.zeros((4, 2, 3, 3)), np.full(4, 2.5))
    assert out.shape == (4, 4, 4)
    assert np.all(out == 2.5)


def test_conv_ones():
    out = F.conv2d(np.ones((1, 3, 3)), np.ones((1, 1, 3, 3)))
    assert out.shape == (1, 1, 1)
    assert out[0, 0, 0] == 9


@pytest.mark.parametrize("h,k,s,p", [(9, 3, 1, 0), (9, 3, 2, 1), (11, 7, 2, 3), (8, 5, 2, 2)])
def test_conv_output_shape(h, k, s, p):
    x = np.zeros((2, 3, h, h + 1))
    out = F.conv2d(x, np.zeros((5, 3, k, k)), None, s, p)
    assert out.shape == (2, 5, (h + 2 * p - k) // s + 1, (h + 1 + 2 * p - k) // s + 1)


def test_conv_matches_naive_loop():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 5, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out = F.conv2d(x, w, b, stride=2, padding=1)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    for k in range(3):
        for i in range(out.shape[1]):
            for j in range(out.shape[2]):
                ref = np.sum(xp[:, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[k]) + b[k]
                assert out[k, i, j] == pytest.approx(ref, rel=1e-12, abs=1e-12)


def test_conv_shape_mismatch():
    with pytest.raises(ValueError):
        F.conv2d(np.zeros((3, 5, 5)), np.zeros((2, 4, 3, 3)))


def test_conv_linearity():
    rng = np.random.default_rng(3)
    x, y = rng.standard_normal((2, 3, 7, 7))
    w = rng.standard_normal((4, 3, 3, 3))
    a, b = 1.7, -0.3
    lhs = F.conv2d(a * x + b * y, w, None, 2, 1)
    rhs = a * F.conv2d(x, w, None, 2, 1) + b * F.conv2d(y, w, None, 2, 1)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9, rtol=0)


@pytest.mark.parametrize("seed", range(3))
def test_conv_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 2, 6, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    r = rng.standard_normal(F.conv2d(x, w, b, 2, 1).shape)
    loss = lambda: np.sum(r * F.conv2d(x, w, b, 2, 1))
    dx, dw, db = F.conv2d_backward(r, x, w, 2, 1)
    assert rel_error(dx, numeric_grad(loss, x)) < 1e-6
    assert rel_error(dw, numeric_grad(loss, w)) < 1e-6
    assert rel_error(db, numeric_grad(loss, b)) < 1e-6


def test_maxpool_gradients():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 3, 7, 7))
    r = rng.standard_normal(F.max_pool2d(x, 3, 2, 1).shape)
    loss = lambda: np.sum(r * F.max_pool2d(x, 3, 2, 1))
    dx = F.max_pool2d_backward(r, x, 3, 2, 1)
    assert rel_error(dx, numeric_grad(loss, x)) < 1e-6


# ---------------------------------------------------------------- fc / softmax

def test_fc_examples():
    np.testing.assert_array_equal(F.fc([3.0, -1.0], np.eye(2), np.zeros(2)), [3, -1])
    np.testing.assert_array_equal(F.fc([5.0, 6.0], np.zeros((2, 2)), [1, 2]), [1, 2])
    np.testing.assert_array_equal(F.fc([1.0, 1.0], [[1, 2], [3, 4]], [0, 0]), [3, 7])
    with pytest.raises(ValueError):
        F.fc([1.0, 2.0, 3.0], np.eye(2))


def test_fc_gradients():
    rng = np.random.default_rng(6)
    x, w, b = rng.standard_normal((4, 5)), rng.standard_normal((3, 5)), rng.standard_normal(3)
    r = rng.standard_normal((4, 3))
    loss = lambda: np.sum(r * F.fc(x, w, b))
    dx, dw, db = F.fc_backward(r, x, w)
    for ana, var in ((dx, x), (dw, w), (db, b)):
        assert rel_error(ana, numeric_grad(loss, var)) < 1e-7


def test_softmax_examples():
    np.testing.assert_allclose(F.softmax([0.0, 0.0, 0.0]), [1 / 3] * 3, rtol=1e-15)
    c = 4.2
    np.testing.assert_allclose(F.softmax([c, c + math.log(2)]), [1 / 3, 2 / 3], rtol=1e-12)
    out = F.softmax([1000.0, 0.0])
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(1.0) and out[1] == pytest.approx(0.0, abs=1e-300)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)), st.randoms())
def test_softmax_properties(x, rnd):
    y = F.softmax(x)
    assert np.all(y > 0)
    assert abs(y.sum() - 1) < 1e-6
    perm = list(range(len(x)))
    rnd.shuffle(perm)
    np.testing.assert_allclose(F.softmax(x[perm]), y[perm], rtol=1e-12, atol=1e-300)


def test_softmax_gradients():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((3, 5))
    r = rng.standard_normal((3, 5))
    loss = lambda: np.sum(r * F.softmax(x))
    assert rel_error(F.softmax_backward(r, F.softmax(x)), numeric_grad(loss, x)) < 1e-7


# ---------------------------------------------------------------- losses

def test_bce_examples():
    loss, _ = F.bce_loss([0.3, 0.3], 1)
    assert loss == pytest.approx(math.log(2), abs=1e-12)
    loss, _ = F.bce_loss([-800.0, 800.0], 1)
    assert loss == pytest.approx(0.0, abs=1e-12)


def test_bce_classifier_gradient():
    rng = np.random.default_rng(8)
    w, b = rng.standard_normal((2, 8)), rng.standard_normal(2)
    x = rng.standard_normal((6, 8))
    y = rng.integers(0, 2, 6)
    loss = lambda: F.bce_loss(F.fc(x, w, b), y)[0]
    _, dlogits = F.bce_loss(F.fc(x, w, b), y)
    _, dw, db = F.fc_backward(dlogits, x, w)
    assert rel_error(dw, numeric_grad(loss, w)) < 1e-4
    assert rel_error(db, numeric_grad(loss, b)) < 1e-4


def test_instance_embedding_examples():
    assert F.instance_embedding_loss([2.5], 0)[0] == pytest.approx(0.0, abs=1e-15)
    assert F.instance_embedding_loss([0.7, 0.7], 1)[0] == pytest.approx(math.log(2), abs=1e-12)
    expected = -math.log(math.e / (math.e + 1))
    assert F.instance_embedding_loss([1.0, 0.0], 0)[0] == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.3133, abs=1e-4)
    with pytest.raises(IndexError):
        F.instance_embedding_loss([1.0, 0.0], 2)


def test_instance_embedding_gradient():
    rng = np.random.default_rng(9)
    s = rng.standard_normal((4, 5))
    idx = rng.integers(0, 5, 4)
    loss = lambda: F.instance_embedding_loss(s, idx)[0]
    assert rel_error(F.instance_embedding_loss(s, idx)[1], numeric_grad(loss, s)) < 1e-6


# ---------------------------------------------------------------- sgd

def test_sgd_examples():
    p = {"w": np.array([1.0])}
    assert F.sgd_step(p, {"w": np.array([5.0])}, lr=0.0, momentum=0.9)["w"][0] == 1.0
    assert F.sgd_step(p, {"w": np.array([1.0])}, lr=0.1)["w"][0] == pytest.approx(0.9)
    with pytest.raises(ValueError):
        F.sgd_step(p, {"w": np.ones(2)}, lr=0.1)


def test_sgd_momentum_unrolled():
    lr, mu, wd = 0.1, 0.9, 0.01
    p0, g1, g2 = 2.0, 0.5, -0.3
    v1 = -lr * (g1 + wd * p0)
    p1 = p0 + v1
    v2 = mu * v1 - lr * (g2 + wd * p1)
    p2 = p1 + v2
    params, vel = {"w": np.array([p0])}, {}
    params = F.sgd_step(params, {"w": np.array([g1])}, lr, mu, wd, vel)
    params = F.sgd_step(params, {"w": np.array([g2])}, lr, mu, wd, vel)
    assert params["w"][0] == pytest.approx(p2, abs=1e-15)


# ---------------------------------------------------------------- backbone

def test_backbone_spec():
    spec = BackboneSpec()
    assert [l.out_channels for l in spec.layers] == [96, 256, 512]
    assert [l.kernel for l in spec.layers] == [7, 5, 3]
    assert [l.stride for l in spec.layers] == [2, 2, 1]
    assert spec.total_stride == 16
    assert spec.output_size(128, 128) == (8, 8)


def test_backbone_shapes_and_determinism():
    x = np.random.default_rng(0).random((3, 64, 48)).astype(np.float32)
    for bb in (handcrafted_backbone(), random_backbone(3)):
        out = bb(x)
        assert out.shape == (512,) + bb.spec.output_size(64, 48)
        np.testing.assert_array_equal(out, bb(x))
    np.testing.assert_array_equal(random_backbone(3).params["conv2.weight"],
                                  random_backbone(3).params["conv2.weight"])


def test_backbone_gradient_small():
    bb = random_backbone(1, dtype=np.float64)
    x = np.random.default_rng(1).random((1, 3, 20, 20))
    out = bb.forward(x, keep_cache=True)
    r = np.random.default_rng(2).standard_normal(out.shape)
    dx, grads = bb.backward(r)
    loss = lambda: np.sum(r * bb(x))
    assert rel_error(grads["conv3.bias"], numeric_grad(loss, bb.params["conv3.bias"])) < 1e-4
    w = bb.params["conv1.weight"]
    sub = w[:2, :, :2, :2].copy()
    num = np.zeros_like(sub)
    for idx in np.ndindex(sub.shape):
        sl = (idx[0], idx[1], idx[2], idx[3])
        old = w[sl]
        w[sl] = old + 1e-5
        fp = loss()
        w[sl] = old - 1e-5
        fm = loss()
        w[sl] = old
        num[idx] = (fp - fm) / 2e-5
    assert rel_error(grads["conv1.weight"][:2, :, :2, :2], num) < 1e-4
