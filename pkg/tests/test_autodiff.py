"""Finite-difference checks for every autodiff op against a central-difference oracle."""

import numpy as np
import pytest

from dynsplat import autodiff as ad


def fd_grad(f, x, eps=1e-6):
    """Central-difference gradient of scalar f at ndarray x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * eps)
    return g


def check_op(build, *shapes, seed=0, scale=1.0, shift=0.0, tol=1e-6):
    """Compare analytic grads of scalar-valued ``build(*tensors)`` to FD."""
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal(s) * scale + shift for s in shapes]
    tensors = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*tensors)
    assert np.isscalar(out.data) or out.data.shape == ()
    out.backward()
    for k, (a, t) in enumerate(zip(arrays, tensors)):

        def f(x, k=k):
            args = [np.array(v) for v in arrays]
            args[k] = x
            return build(*[ad.Tensor(v) for v in args]).data

        np.testing.assert_allclose(t.grad, fd_grad(f, a.copy()), rtol=tol, atol=tol)


def test_add_sub_mul_div_broadcast():
    check_op(lambda a, b: ((a + b) * (a - b) / (b * b + 3.0)).sum(), (3, 4), (4,))


def test_scalar_mixing():
    check_op(lambda a: ((2.0 * a + 1.0) / 3.0 - a).sum(), (5,))


def test_power():
    check_op(lambda a: (a**3).sum(), (4, 2))


def test_exp_log_sqrt():
    check_op(lambda a: (ad.log(ad.exp(a) + 1.0) + ad.sqrt(ad.exp(a))).sum(), (6,))


def test_trig():
    check_op(lambda a: (ad.sin(a) * ad.cos(2.0 * a)).sum(), (7,))


def test_sigmoid_relu_abs():
    # keep entries away from the relu/abs kinks
    check_op(
        lambda a: (ad.sigmoid(a) + ad.relu(a + 5.0) + ad.absolute(a + 5.0)).sum(),
        (8,),
        shift=1.0,
    )


def test_maximum_minimum_clip():
    check_op(
        lambda a, b: (ad.maximum(a, b) + ad.minimum(a, 2.0 * b) + ad.clip(a, -0.5, 0.5)).sum(),
        (9,),
        (9,),
        seed=3,
    )


def test_where():
    cond = np.array([True, False, True, True, False])
    check_op(lambda a, b: ad.where(cond, a * a, b + 1.0).sum(), (5,), (5,))


def test_sum_axes_keepdims():
    check_op(lambda a: (ad.sum(a, axis=1, keepdims=True) * ad.sum(a, axis=0)).sum(), (3, 4))


def test_mean():
    check_op(lambda a: (ad.mean(a, axis=0) * ad.mean(a)).sum(), (4, 3))


def test_matmul_2d():
    check_op(lambda a, b: (a @ b).sum(), (3, 4), (4, 2))


def test_matmul_batched():
    check_op(lambda a, b: ad.sum(a @ b), (5, 2, 3), (5, 3, 2))


def test_reshape_transpose_swapaxes():
    check_op(
        lambda a: ad.sum(ad.transpose(a.reshape(2, 6), (1, 0)) * 1.5)
        + ad.sum(ad.swapaxes(a, 0, 1) ** 2),
        (3, 4),
    )


def test_concatenate_stack():
    check_op(
        lambda a, b: ad.sum(ad.concatenate([a, b], axis=1) ** 2)
        + ad.sum(ad.stack([a, 2.0 * a], axis=-1)),
        (2, 3),
        (2, 2),
    )


def test_getitem_slice():
    check_op(lambda a: ad.sum(a[1:, :2] * 3.0), (4, 3))


def test_take_with_repeats():
    idx = np.array([0, 2, 2, 1, 0])
    check_op(lambda a: ad.sum(ad.take(a, idx) ** 2), (3, 4))


def test_segment_sum():
    seg = np.array([0, 2, 2, 1, 0, 2])
    check_op(lambda a: ad.sum(ad.segment_sum(a, seg, 4) ** 2), (6, 3))


def test_take_segment_sum_adjoint():
    """<take(x, idx), y> == <x, segment_sum(y, idx, n)> for all x, y."""
    rng = np.random.default_rng(7)
    x = rng.standard_normal((5, 3))
    idx = rng.integers(0, 5, size=11)
    y = rng.standard_normal((11, 3))
    lhs = np.sum(np.asarray(x)[idx] * y)
    rhs = np.sum(x * ad.segment_sum(y, idx, 5))
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12)


def test_softmax_rows_sum_to_one_and_grads():
    check_op(lambda a: ad.sum(ad.softmax(a, axis=-1) * np.arange(4.0)), (3, 4))
    p = ad.softmax(np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]), axis=-1)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0)


def test_numpy_dispatch_matches_tensor_path():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((4, 4))
    for fn in [ad.exp, ad.sigmoid, ad.relu, ad.absolute, lambda x: ad.softmax(x, axis=0)]:
        np.testing.assert_array_equal(ad.data_of(fn(ad.Tensor(a))), ad.data_of(fn(a)))


def test_grad_accumulates_across_uses():
    x = ad.Tensor(np.array([2.0]), requires_grad=True)
    y = x * x + 3.0 * x  # dy/dx = 2x + 3 = 7
    y.backward()
    np.testing.assert_allclose(x.grad, [7.0])


def test_no_grad_builds_no_graph():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.exp(x) * 2.0
    assert not y.requires_grad and y._parents == ()


def test_custom_vjp_roundtrip():
    x = ad.Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    y = ad.custom(x.data * 2.0, (x,), lambda g: (g * 2.0,))
    ad.sum(y * y).backward()
    np.testing.assert_allclose(x.grad, 8.0 * x.data)


def test_unbroadcast_against_fd():
    check_op(lambda a, b: ad.sum((a + b) ** 2), (3, 1, 2), (4, 2), seed=5)


def test_matmul_requires_2d():
    with pytest.raises(ValueError):
        ad.matmul(ad.Tensor(np.ones(3)), ad.Tensor(np.ones((3, 2))))
