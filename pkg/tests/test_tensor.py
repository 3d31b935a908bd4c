import numpy as np
import pytest

import ccn.tensor as T
from ccn.tensor import (
    DegenerateDirectionError,
    DimensionError,
    GraphError,
    Tensor,
    backward,
    finite_diff_check,
    wrap_angle,
)


def test_tensordot_identity_contraction():
    eye = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = T.tensordot(eye, b, [(1, 0)])
    np.testing.assert_array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])


def test_tensordot_dot_product():
    a = Tensor([1.0, 2.0, 3.0])
    out = T.tensordot(a, Tensor([1.0, 2.0, 3.0]), [(0, 0)])
    assert out.data == 14.0


def test_tensordot_zero_annihilator():
    a = Tensor(np.zeros((3, 4)))
    b = Tensor(np.arange(12.0).reshape(4, 3))
    out = T.tensordot(a, b, [(1, 0)])
    np.testing.assert_array_equal(out.data, np.zeros((3, 3)))


def test_tensordot_shape_mismatch():
    with pytest.raises(DimensionError):
        T.tensordot(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))), [(1, 0)])


def test_tensordot_output_axis_order():
    a = Tensor(np.arange(24.0).reshape(2, 3, 4))
    b = Tensor(np.arange(60.0).reshape(3, 5, 4))
    out = T.tensordot(a, b, [(1, 0), (2, 2)])
    ref = np.einsum("ijk,jlk->il", a.data, b.data)
    np.testing.assert_allclose(out.data, ref, rtol=1e-13)


def test_softmax_symmetry():
    out = T.softmax_axis(Tensor([0.0, 0.0]), 0)
    np.testing.assert_array_equal(out.data, [0.5, 0.5])


def test_softmax_shift_invariance():
    x = np.array([0.3, -1.2, 2.0])
    a = T.softmax_axis(Tensor(x), 0)
    b = T.softmax_axis(Tensor(x + 123.456), 0)
    np.testing.assert_allclose(a.data, b.data, atol=1e-12)


def test_softmax_hand_value():
    out = T.softmax_axis(Tensor([np.log(1.0), np.log(3.0)]), 0)
    np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-12)


def test_softmax_sums_to_one():
    rng = np.random.default_rng(3)
    for _ in range(50):
        x = Tensor(rng.normal(0, 10, (6, 5)))
        s = T.softmax_axis(x, 0)
        np.testing.assert_allclose(s.data.sum(axis=0), np.ones(5), atol=1e-12)
        assert (s.data > 0).all()


def test_atan2_cardinal_directions():
    assert T.atan2(Tensor(0.0), Tensor(1.0)).data == 0.0
    assert T.atan2(Tensor(1.0), Tensor(0.0)).data == np.pi / 2


def test_atan2_diagonal_and_gradient():
    y = Tensor(1.0, requires_grad=True)
    x = Tensor(1.0, requires_grad=True)
    out = T.atan2(y, x)
    assert abs(float(out.data) - np.pi / 4) < 1e-15
    report = finite_diff_check(
        lambda y, x: T.atan2(y, x), {"y": y, "x": x}, h=1e-6, tol=1e-6, op_name="atan2"
    )
    assert report.passed


def test_atan2_degenerate_direction():
    with pytest.raises(DegenerateDirectionError):
        T.atan2(Tensor(0.0), Tensor(1e-13))


def test_atan2_wraps_sin_cos_grid():
    # circular distance so the +-pi seam cannot flip the comparison
    for alpha in np.linspace(-4 * np.pi, 4 * np.pi, 101):
        got = float(T.atan2(Tensor(np.sin(alpha)), Tensor(np.cos(alpha))).data)
        assert abs(wrap_angle(got - wrap_angle(alpha))) < 1e-12


def test_smooth_l1_values():
    z = Tensor(np.zeros(3))
    assert T.smooth_l1(z, np.zeros(3), 1.0).data == 0.0
    assert abs(float(T.smooth_l1(Tensor([0.5]), np.zeros(1), 1.0).data) - 0.125) < 1e-15
    assert abs(float(T.smooth_l1(Tensor([2.0]), np.zeros(1), 1.0).data) - 1.5) < 1e-15


def test_smooth_l1_shape_mismatch():
    with pytest.raises(DimensionError):
        T.smooth_l1(Tensor(np.zeros(3)), np.zeros(4), 1.0)


def test_cross_entropy_uniform():
    out = T.cross_entropy_logits(Tensor([0.0, 0.0]), 0)
    assert abs(float(out.data) - np.log(2.0)) < 1e-15


def test_cross_entropy_large_gap():
    out = T.cross_entropy_logits(Tensor([10.0, -10.0]), 0)
    np.testing.assert_allclose(float(out.data), np.log1p(np.exp(-20.0)), rtol=1e-6)
    assert float(out.data) < 1e-8


def test_cross_entropy_shift_invariance():
    logits = np.array([0.4, -2.0, 1.7])
    a = T.cross_entropy_logits(Tensor(logits), 2)
    b = T.cross_entropy_logits(Tensor(logits + 55.5), 2)
    assert abs(float(a.data) - float(b.data)) < 1e-12


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        T.cross_entropy_logits(Tensor([0.0, 0.0]), 2)


def test_backward_sum_gives_ones():
    w = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    backward(T.tsum(w))
    np.testing.assert_array_equal(w.grad, np.ones((2, 3)))


def test_backward_accumulates_shared_leaf():
    w = Tensor([1.0, 2.0], requires_grad=True)
    loss = T.tsum(T.add(w, w))
    backward(loss)
    np.testing.assert_array_equal(w.grad, [2.0, 2.0])


def test_backward_n_additive_uses():
    for n in (2, 3, 5):
        w = Tensor([1.5, -0.5, 2.0], requires_grad=True)
        acc = w
        for _ in range(n - 1):
            acc = T.add(acc, w)
        backward(T.tsum(acc))
        np.testing.assert_array_equal(w.grad, n * np.ones(3))


def test_backward_rejects_non_scalar():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        backward(T.add(w, w))


def test_backward_returns_gradient_map():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([3.0, 4.0], requires_grad=True)
    grads = backward(T.tsum(T.mul(a, b)))
    np.testing.assert_array_equal(grads[a.node_id], b.data)
    np.testing.assert_array_equal(grads[b.node_id], a.data)


def test_finite_diff_square():
    w = Tensor(3.0, requires_grad=True)
    report = finite_diff_check(lambda w: T.mul(w, w), {"w": w}, h=1e-5, tol=1e-4, op_name="square")
    assert report.passed
    assert abs(float(w.grad) - 6.0) < 1e-10


def test_finite_diff_reports_failure():
    # a wrong-gradient op: forward w^2 but vjp of plain w
    def bad(w):
        return T._node(w.data * w.data, (w,), lambda g: (g,))

    w = Tensor(2.0, requires_grad=True)
    report = finite_diff_check(lambda w: bad(w), {"w": w}, tol=1e-4, op_name="bad")
    assert not report.passed
    assert report.max_rel_error > 1e-2


def test_take_wrap_duplicates_accumulate():
    a = Tensor(np.arange(4.0), requires_grad=True)
    out = T.take_wrap(a, [-1, 0, 1, 2, 3, 4], axis=0)
    np.testing.assert_array_equal(out.data, [3, 0, 1, 2, 3, 0])
    backward(T.tsum(out))
    np.testing.assert_array_equal(a.grad, [2, 1, 1, 2])


def test_primitive_identity_examples():
    x = np.array([0.5, -1.0, 2.0])
    np.testing.assert_array_equal(T.add(Tensor(x), Tensor(np.zeros(3))).data, x)
    np.testing.assert_array_equal(T.mul(Tensor(x), Tensor(np.ones(3))).data, x)
    np.testing.assert_array_equal(T.scale(Tensor(x), 1.0).data, x)
    np.testing.assert_array_equal(T.flip(T.flip(Tensor(x), 0), 0).data, x)
    np.testing.assert_array_equal(T.concat([Tensor(x[:1]), Tensor(x[1:])], 0).data, x)
    np.testing.assert_array_equal(T.sin(Tensor(np.zeros(3))).data, np.zeros(3))
    np.testing.assert_array_equal(T.cos(Tensor(np.zeros(3))).data, np.ones(3))


def test_sliding_windows_contents():
    a = Tensor(np.arange(10.0).reshape(2, 5))
    win = T.sliding_windows(a, axis=1, size=3)
    assert win.shape == (3, 2, 3)
    np.testing.assert_array_equal(win.data[1], a.data[:, 1:4])


def test_conv2d_matches_direct_sum():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(2, 5, 5, 3))
    w = rng.normal(size=(3, 3, 3, 4))
    b = rng.normal(size=4)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    for n in (0, 1):
        for i in (0, 1, 2):
            for j in (0, 1, 2):
                ref = (xp[n, 2 * i:2 * i + 3, 2 * j:2 * j + 3, :, None] * w).sum(axis=(0, 1, 2)) + b
                np.testing.assert_allclose(out.data[n, i, j], ref, rtol=1e-12)


def test_wrap_angle_range_and_values():
    assert wrap_angle(np.pi) == np.pi
    assert wrap_angle(-np.pi) == np.pi
    assert abs(wrap_angle(3 * np.pi) - np.pi) < 1e-12
    assert abs(wrap_angle(np.radians(350.0) - np.radians(10.0)) - np.radians(-20.0)) < 1e-12
    grid = np.linspace(-9.9, 9.9, 67)
    w = wrap_angle(grid)
    assert (w > -np.pi).all() and (w <= np.pi).all()


def test_no_grad_suppresses_graph():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with T.no_grad():
        out = T.tsum(T.mul(w, w))
    assert out.is_leaf()


def test_linear_matches_naive_loop_bitwise():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(5, 7))
    w = rng.normal(size=(7, 3))
    b = rng.normal(size=3)
    out = T.linear(Tensor(x), Tensor(w), Tensor(b))
    ref = np.empty((5, 3))
    for r in range(5):
        for m in range(3):
            acc = b[m]
            for j in range(7):
                acc = acc + x[r, j] * w[j, m]
            ref[r, m] = acc
    np.testing.assert_array_equal(out.data, ref)
