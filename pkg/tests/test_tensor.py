import numpy as np
import pytest

from longsiam import tensor as T


def test_zeros_shapes():
    assert T.zeros([2, 2]).tolist() == [[0, 0], [0, 0]]
    assert T.zeros([1]).tolist() == [0]
    z = T.zeros([102, 108, 75])
    assert z.size == 826200 and not z.any()


def test_zeros_rejects_bad_shapes():
    with pytest.raises(T.ShapeError):
        T.zeros([2, 0])
    with pytest.raises(OverflowError):
        T.element_count([2**40, 2**40])


def test_elementwise_examples():
    x = np.random.default_rng(0).normal(size=(3, 4))
    assert not T.elementwise("sub", x, x).any()
    assert T.elementwise("add", [1, 2], [3, 4]).tolist() == [4, 6]


def test_mul_matches_loop():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    out = T.elementwise("mul", a, b)
    for i in range(3):
        for j in range(3):
            assert out[i, j] == a[i, j] * b[i, j]


def test_elementwise_shape_mismatch():
    with pytest.raises(T.ShapeError):
        T.elementwise("add", np.zeros(3), np.zeros((3, 1)))
    with pytest.raises(ValueError):
        T.elementwise("div", np.zeros(3), np.zeros(3))


def test_elementwise_rejects_nonfinite():
    with pytest.raises(FloatingPointError):
        T.elementwise("mul", np.array([1e308]), np.array([1e308]))


def test_sub_antisymmetric_and_commutes_with_reshape():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    assert np.array_equal(T.elementwise("sub", a, b), -T.elementwise("sub", b, a))
    lhs = T.reshape(T.elementwise("mul", a, b), [24])
    rhs = T.elementwise("mul", T.reshape(a, [24]), T.reshape(b, [24]))
    assert np.array_equal(lhs, rhs)


def test_matmul_examples():
    m = np.arange(12.0).reshape(3, 4)
    assert np.array_equal(T.matmul(np.eye(3), m), m)
    assert T.matmul([[1, 2]], [[1], [1]]).tolist() == [[3]]
    with pytest.raises(T.ShapeError):
        T.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(7, 5)), rng.normal(size=(5, 4))
    ref = np.zeros((7, 4))
    for i in range(7):
        for j in range(4):
            for k in range(5):
                ref[i, j] += a[i, k] * b[k, j]
    assert np.max(np.abs(T.matmul(a, b) - ref)) < 1e-12


def test_matmul_associative_in_single():
    rng = np.random.default_rng(4)
    a, b, c = (rng.normal(size=(8, 8)).astype(np.float32) for _ in range(3))
    left = T.matmul(T.matmul(a, b), c)
    right = T.matmul(a, T.matmul(b, c))
    assert np.max(np.abs(left - right)) / np.max(np.abs(left)) < 1e-6


def test_reduce_examples():
    assert T.reduce("mean", np.array([2.0, 4.0])) == 3.0
    assert T.reduce("argmax", np.array([0.1, 0.9])) == 1
    x = np.random.default_rng(5).normal(size=(4, 3))
    ref = [sum(x[i, j] for i in range(4)) for j in range(3)]
    assert np.allclose(T.reduce("sum", x, [0]), ref, rtol=0, atol=1e-12)


def test_reduce_argmax_ties_and_shift_invariance():
    assert T.reduce("argmax", np.array([3, 1, 3])) == 0
    x = np.random.default_rng(6).normal(size=(5, 7))
    assert np.array_equal(T.reduce("argmax", x, [1]), T.reduce("argmax", x + 3.5, [1]))
    # multi-axis argmax is a row-major flat index over the reduced axes
    y = np.zeros((2, 3, 4))
    y[1, 2, 1] = 5
    assert T.reduce("argmax", y, [1, 2]).tolist() == [0, 2 * 4 + 1]


def test_reduce_bad_axes():
    with pytest.raises(T.ShapeError):
        T.reduce("sum", np.zeros((2, 2)), [2])
    with pytest.raises(T.ShapeError):
        T.reduce("sum", np.zeros((2, 2)), [0, -2])


def test_reshape():
    x = np.arange(6).reshape(2, 3)
    assert T.reshape(x, [6]).tolist() == [0, 1, 2, 3, 4, 5]
    assert T.reshape(np.zeros((12, 13, 9, 16)), [22464]).shape == (22464,)
    assert np.array_equal(T.reshape(T.reshape(x, [3, 2]), [2, 3]), x)
    with pytest.raises(T.ShapeError):
        T.reshape(x, [4])
