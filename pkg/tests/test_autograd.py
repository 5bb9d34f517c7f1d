"""Backward-rule tests: finite differences, adjoint identities, determinism."""

import numpy as np
import pytest

from sharpseg import ops
from sharpseg.autograd import Parameter, Tape, grad_check

LAPLACE = np.array([[-1, -1, -1], [-1, 8, -1], [-1, -1, -1]], dtype=np.float64)

TOL = 1e-4


def test_relu_sum_gradient():
    tape = Tape()
    x = tape.input(np.array([-1.0, 2.0]).reshape(1, 1, 1, 2))
    y = tape.relu(x)
    loss = tape.weighted_sum(y, np.ones((1, 1, 1, 2)))
    grads = tape.backward(loss)
    assert np.array_equal(grads[x].ravel(), [0.0, 1.0])


def test_sharp_block_interior_grad_is_zero_and_kernel_has_no_entry():
    tape = Tape()
    x = tape.input(np.random.default_rng(0).standard_normal((1, 2, 6, 6)))
    y = tape.depthwise_sharp(x, LAPLACE)
    loss = tape.weighted_sum(y, np.ones((1, 2, 6, 6)))
    grads = tape.backward(loss)
    # d(sum of output)/dx at interior x = sum of kernel taps = 0
    assert np.abs(grads[x][:, :, 2:-2, 2:-2]).max() < 1e-12
    # the kernel is saved state, not a node: nothing on the tape can hold
    # a gradient for it
    assert all(node.op != "param" for node in tape.nodes)
    assert len(grads) == len(tape.nodes)


def test_backward_requires_scalar_loss():
    tape = Tape()
    x = tape.input(np.ones((1, 1, 2, 2)))
    y = tape.relu(x)
    with pytest.raises(ValueError):
        tape.backward(y)


def test_grad_conv2d():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 4, 4))
    k = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    for padding in ("same", "valid"):
        err = grad_check(
            lambda t, xi, ki, bi, p=padding: t.conv2d(xi, ki, bi, padding=p),
            [x, k, b])
        assert err < TOL, f"conv2d {padding}: {err}"


def test_grad_conv2d_strided():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((1, 2, 5, 5))
    k = rng.standard_normal((2, 2, 3, 3))
    b = rng.standard_normal(2)
    err = grad_check(
        lambda t, xi, ki, bi: t.conv2d(xi, ki, bi, stride=2, padding="valid"),
        [x, k, b])
    assert err < TOL


def test_grad_transposed_conv2d():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 3, 3, 3))
    k = rng.standard_normal((3, 2, 2, 2))
    b = rng.standard_normal(2)
    err = grad_check(lambda t, xi, ki, bi: t.transposed_conv2d(xi, ki, bi),
                     [x, k, b])
    assert err < TOL


def test_grad_depthwise_sharp():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 3, 5, 5))
    err = grad_check(lambda t, xi: t.depthwise_sharp(xi, LAPLACE), [x])
    assert err < TOL


def test_grad_maxpool_strict_windows():
    # values well separated within every 2x2 window so eps=1e-3 cannot flip
    # any argmax
    rng = np.random.default_rng(4)
    base = rng.permutation(64).astype(np.float64).reshape(1, 1, 8, 8)
    err = grad_check(lambda t, xi: t.maxpool2x2(xi), [base])
    assert err < TOL


def test_grad_relu_sigmoid_softmax():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 3, 4, 4)) + 0.1  # keep away from relu kink
    assert grad_check(lambda t, xi: t.relu(xi), [x]) < TOL
    assert grad_check(lambda t, xi: t.sigmoid(xi), [x]) < TOL
    assert grad_check(lambda t, xi: t.softmax_channels(xi), [x]) < TOL


def test_grad_concat():
    rng = np.random.default_rng(7)
    a = rng.standard_normal((1, 2, 4, 4))
    b = rng.standard_normal((1, 3, 4, 4))
    assert grad_check(lambda t, ai, bi: t.concat_channels(ai, bi), [a, b]) < TOL


def test_grad_fused_softmax_cross_entropy():
    rng = np.random.default_rng(8)
    logits = rng.standard_normal((1, 3, 2, 2))
    labels = rng.integers(0, 3, size=(1, 2, 2))
    target = np.zeros((1, 3, 2, 2))
    for c in range(3):
        target[:, c][labels == c] = 1.0
    err = grad_check(lambda t, li: t.softmax_cross_entropy(li, target), [logits])
    assert err < TOL


def test_grad_fused_sigmoid_bce():
    rng = np.random.default_rng(9)
    logits = rng.standard_normal((2, 1, 2, 2))
    target = (rng.random((2, 1, 2, 2)) > 0.5).astype(np.float64)
    err = grad_check(
        lambda t, li: t.sigmoid_binary_cross_entropy(li, target), [logits])
    assert err < TOL


def test_fused_ce_gradient_is_probs_minus_target_over_pixels():
    rng = np.random.default_rng(10)
    logits = rng.standard_normal((1, 4, 2, 2)).astype(np.float32)
    target = np.zeros((1, 4, 2, 2), dtype=np.float32)
    target[0, 1] = 1.0
    tape = Tape()
    lid = tape.input(logits)
    loss = tape.softmax_cross_entropy(lid, target)
    grads = tape.backward(loss)
    probs = ops.softmax_channels(logits)
    assert np.abs(grads[lid] - (probs - target) / 4.0).max() < 1e-6


def test_adjoint_identity_linear_ops():
    # <f(x), y> == <x, f^T(y)> for the linear ops with zero bias
    rng = np.random.default_rng(11)
    x = rng.standard_normal((1, 2, 6, 6))
    k = rng.standard_normal((3, 2, 3, 3))
    cases = []

    def conv_apply(t, xi):
        ki = t.input(k)
        bi = t.input(np.zeros(3))
        return t.conv2d(xi, ki, bi, padding="same")

    cases.append((conv_apply, (1, 3, 6, 6)))

    kt = rng.standard_normal((2, 3, 2, 2))

    def tconv_apply(t, xi):
        ki = t.input(kt)
        bi = t.input(np.zeros(3))
        return t.transposed_conv2d(xi, ki, bi)

    cases.append((tconv_apply, (1, 3, 12, 12)))
    cases.append((lambda t, xi: t.depthwise_sharp(xi, LAPLACE), (1, 2, 6, 6)))

    for apply, out_shape in cases:
        y = rng.standard_normal(out_shape)
        tape = Tape()
        xi = tape.input(x)
        out = apply(tape, xi)
        lhs = float((tape.value(out) * y).sum())
        loss = tape.weighted_sum(out, y)
        grads = tape.backward(loss)
        rhs = float((x * grads[xi]).sum())
        assert abs(lhs - rhs) / max(abs(lhs), 1.0) < 1e-4


def test_backward_is_deterministic_and_repeatable():
    rng = np.random.default_rng(12)
    x = rng.standard_normal((1, 2, 4, 4)).astype(np.float32)
    k = rng.standard_normal((2, 2, 3, 3)).astype(np.float32)
    p = Parameter("k", k)
    tape = Tape()
    xi = tape.input(x)
    ki = tape.parameter(p)
    bi = tape.input(np.zeros(2, dtype=np.float32))
    out = tape.relu(tape.conv2d(xi, ki, bi))
    loss = tape.weighted_sum(out, np.ones(tape.value(out).shape))
    g1 = tape.backward(loss)
    first = {nid: g.copy() for nid, g in g1.items()}
    g2 = tape.backward(loss)
    for nid in first:
        assert np.array_equal(first[nid], g2[nid])
    assert p.grad is not None and np.array_equal(p.grad, g2[ki])


def test_parameter_grad_accumulates_across_reuse():
    # the same parameter used twice in one graph gets the summed gradient
    p = Parameter("k", np.ones((1, 1, 1, 1), dtype=np.float64))
    x = np.ones((1, 1, 2, 2), dtype=np.float64)
    tape = Tape()
    xi = tape.input(x)
    ki = tape.parameter(p)
    bi = tape.input(np.zeros(1))
    y1 = tape.conv2d(xi, ki, bi, padding="valid")
    y2 = tape.conv2d(y1, ki, bi, padding="valid")
    loss = tape.weighted_sum(y2, np.ones((1, 1, 2, 2)))
    tape.backward(loss)
    # y2 = k^2 * x, d/dk = 2k * sum(x) = 8
    assert p.grad.ravel()[0] == pytest.approx(8.0)
