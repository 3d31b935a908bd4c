import numpy as np
import pytest

import ccn.tensor as T
from ccn.cylinder import (
    ConfigurationError,
    CylindricalKernel,
    assemble_windows,
    build_cylinder,
    contract_windows,
    contract_windows_fast,
    extract_view_kernel,
    mirror_view,
    pad_cylinder,
    view_specific_features,
)
from ccn.tensor import Tensor, backward, finite_diff_check


def make_kernel(k=7, n_views=24, ch_in=2, ch_out=3, seed=0, pad_mode="wrap"):
    rng = np.random.default_rng(seed)
    return CylindricalKernel.initialize(k, n_views, ch_in, ch_out, rng, pad_mode)


def column_cylinder(columns, k=3):
    """Raw cylinder tensor with explicit per-column constants (no tying)."""
    n = len(columns)
    full = np.zeros((k, n, 1, 1))
    for j, value in enumerate(columns):
        full[:, j, 0, 0] = value
    return Tensor(full)


# ---------------------------------------------------------------------------
# build_cylinder

def test_cylinder_layout_and_param_count():
    kernel = make_kernel()
    cyl = build_cylinder(kernel)
    assert cyl.shape == (7, 24, 2, 3)
    assert kernel.param_count() == 7 * 13 * 2 * 3
    m = kernel.n_side
    for j in range(1, m):
        np.testing.assert_array_equal(cyl.data[:, m + j], cyl.data[:, m - j])


def test_cylinder_smallest_legal_layout():
    rng = np.random.default_rng(1)
    kernel = CylindricalKernel.initialize(3, 4, 1, 1, rng)
    cyl = build_cylinder(kernel)
    side0 = kernel.w_side.data[:, 0]
    np.testing.assert_array_equal(cyl.data[:, 0], side0)
    np.testing.assert_array_equal(cyl.data[:, 1], kernel.w_front.data[:, 0])
    np.testing.assert_array_equal(cyl.data[:, 2], side0)
    np.testing.assert_array_equal(cyl.data[:, 3], kernel.w_rear.data[:, 0])


def test_cylinder_perturbation_touches_exactly_two_columns():
    kernel = make_kernel(seed=5)
    before = build_cylinder(kernel).data.copy()
    kernel.w_side.data[3, 4, 1, 2] += 1.0
    after = build_cylinder(kernel).data
    changed = [v for v in range(24) if not np.array_equal(before[:, v], after[:, v])]
    assert len(changed) == 2
    assert changed == sorted([4, mirror_view(4, 24)])


def test_cylinder_rejects_bad_geometry():
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigurationError):
        CylindricalKernel.initialize(7, 23, 1, 1, rng)
    with pytest.raises(ConfigurationError):
        CylindricalKernel.initialize(7, 4, 1, 1, rng)
    with pytest.raises(ConfigurationError):
        CylindricalKernel.initialize(4, 24, 1, 1, rng)


# ---------------------------------------------------------------------------
# pad_cylinder / extract_view_kernel

def test_pad_wrap_circular():
    padded = pad_cylinder(column_cylinder([1.0, 2.0, 3.0, 4.0]), "wrap")
    got = padded.data[0, :, 0, 0]
    np.testing.assert_array_equal(got, [4, 1, 2, 3, 4, 1])


def test_pad_flip_mirrors_end_blocks():
    padded = pad_cylinder(column_cylinder([1.0, 2.0, 3.0, 4.0]), "flip")
    got = padded.data[0, :, 0, 0]
    np.testing.assert_array_equal(got, [1, 1, 2, 3, 4, 4])


def test_pad_flip_multi_column_blocks():
    padded = pad_cylinder(column_cylinder([1.0, 2.0, 3.0, 4.0, 5.0, 6.0], k=5), "flip")
    got = padded.data[0, :, 0, 0]
    np.testing.assert_array_equal(got, [2, 1, 1, 2, 3, 4, 5, 6, 6, 5])


def test_pad_wrap_constant_cylinder_stays_constant():
    padded = pad_cylinder(column_cylinder([7.0, 7.0, 7.0, 7.0]), "wrap")
    np.testing.assert_array_equal(padded.data, np.full_like(padded.data, 7.0))


def test_extract_degenerate_k1_window():
    rng = np.random.default_rng(2)
    kernel = CylindricalKernel.initialize(1, 6, 2, 2, rng)
    cyl = build_cylinder(kernel)
    padded = pad_cylinder(cyl, "wrap")
    for v in range(6):
        np.testing.assert_array_equal(extract_view_kernel(padded, v).data, cyl.data[:, v:v + 1])


def test_extract_window_arithmetic():
    padded = pad_cylinder(column_cylinder([1.0, 2.0, 3.0, 4.0]), "wrap")
    win = extract_view_kernel(padded, 0)
    np.testing.assert_array_equal(win.data[0, :, 0, 0], [4, 1, 2])


def test_extract_caller_wrapped_index():
    kernel = make_kernel(k=3, n_views=8, seed=3)
    padded = pad_cylinder(build_cylinder(kernel), "wrap")
    for v in range(8):
        a = extract_view_kernel(padded, v).data
        b = extract_view_kernel(padded, (v + 8) % 8).data
        np.testing.assert_array_equal(a, b)


def test_extract_out_of_range():
    kernel = make_kernel(k=3, n_views=8)
    padded = pad_cylinder(build_cylinder(kernel), "wrap")
    with pytest.raises(IndexError):
        extract_view_kernel(padded, 8)


# ---------------------------------------------------------------------------
# mirror_view

def test_mirror_view_fixed_points_and_example():
    assert mirror_view(11, 24) == 11
    assert mirror_view(23, 24) == 23
    assert mirror_view(0, 24) == 22


def test_mirror_view_is_involution():
    for n in (4, 8, 24, 30):
        for v in range(n):
            assert mirror_view(mirror_view(v, n), n) == v


def test_mirror_kernel_column_reversal_identity():
    kernel = make_kernel(seed=11)
    padded = pad_cylinder(build_cylinder(kernel), "wrap")
    for v in range(24):
        a = extract_view_kernel(padded, mirror_view(v, 24)).data
        b = extract_view_kernel(padded, v).data[:, ::-1]
        np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# view_specific_features

def naive_view_features(x, kernel):
    """Independent triple-loop oracle with explicit wraparound indexing."""
    k, n, ci, co = kernel.k, kernel.n_views, kernel.ch_in, kernel.ch_out
    m = kernel.n_side
    cols = [kernel.w_side.data[:, j] for j in range(m)]
    cols.append(kernel.w_front.data[:, 0])
    cols.extend(kernel.w_side.data[:, m - 1 - j] for j in range(m))
    cols.append(kernel.w_rear.data[:, 0])
    h = k // 2
    out = np.zeros((n, co))
    for v in range(n):
        for o in range(co):
            acc = 0.0
            for r in range(k):
                for c in range(k):
                    col = cols[(v - h + c) % n]
                    for i in range(ci):
                        acc += col[r, i, o] * x[r, c, i]
            out[v, o] = acc
    return out


def test_view_features_constant_field():
    kernel = CylindricalKernel(
        3, 8, 1, 1,
        Tensor(np.ones((3, 3, 1, 1))), Tensor(np.ones((3, 1, 1, 1))), Tensor(np.ones((3, 1, 1, 1))),
    )
    feats = view_specific_features(Tensor(np.ones((3, 3, 1))), kernel)
    np.testing.assert_array_equal(feats.values.data, np.full((8, 1), 9.0))


@pytest.mark.parametrize("seed", range(20))
def test_view_features_match_naive_loop_bitwise(seed):
    rng = np.random.default_rng(seed)
    k, n_views, ci, co = (3, 8, 2, 2) if seed % 2 else (5, 12, 3, 2)
    kernel = CylindricalKernel.initialize(k, n_views, ci, co, rng)
    x = rng.normal(size=(k, k, ci))
    got = view_specific_features(Tensor(x), kernel).values.data
    np.testing.assert_array_equal(got, naive_view_features(x, kernel))


def test_view_features_single_column_support():
    # only the front column (cylinder column m=3) is nonzero: the response is
    # nonzero exactly for views whose window covers that column
    k, n = 3, 8
    kernel = CylindricalKernel(
        k, n, 1, 1,
        Tensor(np.zeros((k, 3, 1, 1))),
        Tensor(np.ones((k, 1, 1, 1))),
        Tensor(np.zeros((k, 1, 1, 1))),
    )
    x = Tensor(np.ones((k, k, 1)))
    feats = view_specific_features(x, kernel).values.data[:, 0]
    covering = {v for v in range(n) for c in range(k) if (v - 1 + c) % n == 3}
    assert covering == {2, 3, 4}
    for v in range(n):
        assert (feats[v] != 0.0) == (v in covering)


def test_view_features_periodicity_against_doubled_cylinder():
    kernel = make_kernel(k=5, n_views=12, seed=7)
    cyl = build_cylinder(kernel).data
    padded = pad_cylinder(build_cylinder(kernel), "wrap").data
    tripled = np.concatenate([cyl, cyl, cyl], axis=1)
    h = kernel.k // 2
    for v in range(12):
        window = padded[:, v:v + kernel.k]
        oracle = tripled[:, v - h + 12: v - h + 12 + kernel.k]
        np.testing.assert_array_equal(window, oracle)


def test_view_features_shape_check():
    kernel = make_kernel(k=3, n_views=8)
    with pytest.raises(T.DimensionError):
        view_specific_features(Tensor(np.ones((5, 5, 2))), kernel)


def test_tied_gradient_finite_difference():
    rng = np.random.default_rng(13)
    kernel = CylindricalKernel.initialize(3, 6, 2, 2, rng)
    x = Tensor(rng.normal(size=(3, 3, 2)), requires_grad=True)

    def f(x, side, front, rear):
        k = CylindricalKernel(3, 6, 2, 2, side, front, rear)
        return T.tsum(view_specific_features(x, k).values)

    params = {"x": x, "side": kernel.w_side, "front": kernel.w_front, "rear": kernel.w_rear}
    report = finite_diff_check(f, params, h=1e-5, tol=1e-4, op_name="tied-cylinder")
    assert report.passed


def test_mirrored_columns_receive_summed_gradients():
    kernel = make_kernel(k=3, n_views=8, ch_in=1, ch_out=1, seed=17)
    for p in kernel.parameters().values():
        p.requires_grad = True
    x = Tensor(np.random.default_rng(0).normal(size=(3, 3, 1)))
    backward(T.tsum(view_specific_features(x, kernel).values))
    # a side column feeds two cylinder columns; front/rear feed one each, so
    # under a symmetric readout the side gradients are roughly twice as dense
    assert kernel.w_side.grad is not None
    assert kernel.w_front.grad is not None
    assert kernel.w_rear.grad is not None


def test_fast_contraction_matches_canonical():
    rng = np.random.default_rng(21)
    kernel = make_kernel(k=7, n_views=24, ch_in=4, ch_out=6, seed=21)
    windows = assemble_windows(kernel)
    x1 = Tensor(rng.normal(size=(7, 7, 4)))
    xb = Tensor(rng.normal(size=(5, 7, 7, 4)))
    np.testing.assert_allclose(
        contract_windows_fast(x1, windows).data, contract_windows(x1, windows).data,
        rtol=1e-12, atol=1e-12,
    )
    np.testing.assert_allclose(
        contract_windows_fast(xb, windows).data, contract_windows(xb, windows).data,
        rtol=1e-12, atol=1e-12,
    )
