import numpy as np
import pytest

from dpflows.errors import ShapeError
from dpflows.tensor import Tensor, frob_norm_sq, matmul, per_sample_grad


def test_matmul_known_product():
    a = Tensor.from_nested([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor.from_nested([[5.0, 6.0], [7.0, 8.0]])
    assert matmul(a, b).array.tolist() == [[19.0, 22.0], [43.0, 50.0]]


def test_matmul_shape_error_names_both_shapes():
    a = Tensor((2, 3))
    b = Tensor((2, 2))
    with pytest.raises(ShapeError) as err:
        matmul(a, b)
    assert "(2, 3)" in str(err.value) and "(2, 2)" in str(err.value)


def test_matmul_rejects_non_matrices():
    with pytest.raises(ShapeError):
        matmul(Tensor((2, 2, 2)), Tensor((2, 2)))


def test_matmul_matches_naive_triple_loop():
    rng = np.random.default_rng(42)
    for _ in range(50):
        n, k, m = rng.integers(1, 7, size=3)
        a = rng.standard_normal((n, k))
        b = rng.standard_normal((k, m))
        got = matmul(Tensor(a.shape, a.ravel()), Tensor(b.shape, b.ravel())).array
        want = np.zeros((n, m))
        for i in range(n):
            for j in range(m):
                acc = 0.0
                for kk in range(k):
                    acc += a[i, kk] * b[kk, j]
                want[i, j] = acc
        assert np.abs(got - want).max() <= 1e-12


def test_per_sample_grad_worked_values():
    # X1=[[1,2]], dY1=[[3]] and X2=[[2,2]], dY2=[[5]]
    g1 = per_sample_grad(Tensor.from_nested([[3.0]]), Tensor.from_nested([[1.0, 2.0]]))
    g2 = per_sample_grad(Tensor.from_nested([[5.0]]), Tensor.from_nested([[2.0, 2.0]]))
    assert g1.array.tolist() == [[3.0, 6.0]]
    assert g2.array.tolist() == [[10.0, 10.0]]
    assert frob_norm_sq(g1) == 45.0
    assert frob_norm_sq(g2) == 200.0


def test_per_sample_grad_equals_transposed_matmul_bitwise():
    rng = np.random.default_rng(7)
    for _ in range(20):
        t, d, p = rng.integers(1, 6, size=3)
        dy = Tensor((t, d), rng.standard_normal(t * d))
        x = Tensor((t, p), rng.standard_normal(t * p))
        direct = per_sample_grad(dy, x)
        via_matmul = matmul(Tensor((d, t), dy.array.T.copy().ravel()), x)
        assert np.array_equal(direct.data, via_matmul.data)


def test_per_sample_grad_time_mismatch():
    with pytest.raises(ShapeError):
        per_sample_grad(Tensor((3, 2)), Tensor((4, 2)))


def test_tensor_validates_extents_and_data_length():
    with pytest.raises(ShapeError):
        Tensor((0, 2))
    with pytest.raises(ShapeError):
        Tensor((2, 2), [1.0, 2.0, 3.0])
    t = Tensor((2, 3))
    assert t.element_count == 6
    assert t.data.tolist() == [0.0] * 6


def test_tensor_array_is_view_copy_is_not():
    t = Tensor((2, 2), [1.0, 2.0, 3.0, 4.0])
    t.array[0, 0] = 9.0
    assert t.data[0] == 9.0
    c = t.copy()
    c.data[0] = 0.0
    assert t.data[0] == 9.0
