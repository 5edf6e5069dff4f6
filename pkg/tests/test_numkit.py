import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bilevel_smooth import numkit
from bilevel_smooth.errors import NonFiniteEvaluation, ShapeMismatch, SingularMatrix


def test_solve_identity_returns_rhs(rng):
    B = rng.standard_normal((3, 2))
    assert np.array_equal(numkit.solve_dense(np.eye(3), B), B)


def test_solve_diagonal():
    X = numkit.solve_dense([[2.0, 0.0], [0.0, 4.0]], [[2.0], [8.0]])
    np.testing.assert_allclose(X, [[1.0], [2.0]])


def test_solve_recovers_known_solution(rng):
    Q, _ = np.linalg.qr(rng.standard_normal((8, 8)))
    A = Q @ np.diag(rng.uniform(1.0, 3.0, 8)) @ Q.T
    X_true = rng.standard_normal((8, 3))
    np.testing.assert_allclose(numkit.solve_dense(A, A @ X_true), X_true, atol=1e-9)


def test_solve_vector_rhs_keeps_shape():
    x = numkit.solve_dense(np.diag([1.0, 2.0]), np.array([3.0, 4.0]))
    assert x.shape == (2,)
    np.testing.assert_allclose(x, [3.0, 2.0])


def test_solve_singular_raises():
    with pytest.raises(SingularMatrix):
        numkit.solve_dense([[1.0, 2.0], [2.0, 4.0]], [1.0, 1.0])


def test_solve_zero_matrix_raises():
    with pytest.raises(SingularMatrix):
        numkit.solve_dense(np.zeros((2, 2)), np.ones(2))


def test_solve_shape_errors():
    with pytest.raises(ShapeMismatch):
        numkit.solve_dense(np.ones((2, 3)), np.ones(2))
    with pytest.raises(ShapeMismatch):
        numkit.solve_dense(np.eye(2), np.ones(3))


def test_solve_empty_system():
    assert numkit.solve_dense(np.zeros((0, 0)), np.zeros((0, 2))).shape == (0, 2)


def test_solve_residual_many_systems():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        n = int(rng.integers(1, 21))
        A = rng.standard_normal((n, n)) + n * np.eye(n)
        B = rng.standard_normal((n, int(rng.integers(1, 4))))
        X = numkit.solve_dense(A, B)
        bound = 1e-10 * (1 + numkit.inf_norm(A) * numkit.inf_norm(X))
        assert numkit.inf_norm(A @ X - B) <= bound


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2 ** 32 - 1))
def test_solve_property_small(n, seed):
    r = np.random.default_rng(seed)
    A = r.standard_normal((n, n)) + 2 * n * np.eye(n)
    X = r.standard_normal((n, 2))
    assert numkit.inf_norm(numkit.solve_dense(A, A @ X) - X) <= 1e-9 * (1 + numkit.inf_norm(X))


def test_jacobian_identity():
    J = numkit.central_diff_jacobian(lambda v: v, np.array([0.3, -2.0, 5.0]))
    np.testing.assert_allclose(J, np.eye(3), atol=1e-9)


def test_jacobian_quadratic_map():
    J = numkit.central_diff_jacobian(lambda v: np.array([v[0] ** 2, v[0] * v[1]]),
                                     np.array([1.0, 2.0]), 1e-6)
    np.testing.assert_allclose(J, [[2.0, 0.0], [2.0, 1.0]], atol=1e-6)


def test_jacobian_constant_is_zero():
    J = numkit.central_diff_jacobian(lambda v: np.array([4.0, 1.0]), np.array([1.0, 2.0, 3.0]))
    assert J.shape == (2, 3)
    assert np.all(J == 0.0)


def test_jacobian_nonfinite_probe():
    with pytest.raises(NonFiniteEvaluation):
        numkit.central_diff_jacobian(lambda v: np.array([1.0 / v[0] if v[0] > 0 else np.nan]),
                                     np.array([0.0]))


def test_jacobian_rejects_bad_step():
    with pytest.raises(ValueError):
        numkit.central_diff_jacobian(lambda v: v, np.ones(2), step=0.0)


def test_jacobian_degree_two_polynomials(rng):
    for _ in range(20):
        Q = rng.standard_normal((3, 3))
        c = rng.standard_normal(3)
        at = rng.uniform(-3, 3, 3)
        fn = lambda v: np.array([v @ Q @ v + c @ v])  # noqa: E731
        exact = (Q + Q.T) @ at + c
        J = numkit.central_diff_jacobian(fn, at, 1e-6)
        np.testing.assert_allclose(J[0], exact, atol=1e-6 * (1 + np.abs(exact).max()))


def test_default_steps_scale():
    np.testing.assert_allclose(numkit.default_steps([0.0, 10.0, -1e3]), [1e-6, 1e-5, 1e-3])


@pytest.mark.parametrize("v, expected", [([0, 0, 0], 0.0), ([-3, 1], 3.0), ([], 0.0)])
def test_inf_norm(v, expected):
    assert numkit.inf_norm(v) == expected


def test_rel_error_floor():
    assert numkit.rel_error([0.1], [0.6]) == pytest.approx(0.5)
    assert numkit.rel_error([10.0], [20.0]) == pytest.approx(0.5)
