import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from clbench.linalg import DimensionError, dot, gram_schmidt_extend, kron_quad_form, matmul


def test_dot_matches_minimal_example_products():
    assert dot([-1, 1], [-1, 0]) == 1
    assert dot([-1, 1], [-1, 3]) == 4
    assert dot([0.3, -2.0, 5.0], [0, 0, 0]) == 0


def test_dot_length_mismatch():
    with pytest.raises(DimensionError):
        dot([1, 2], [1, 2, 3])


finite = st.floats(-1e3, 1e3, allow_nan=False)


@given(arrays(np.float64, 5, elements=finite), arrays(np.float64, 5, elements=finite),
       arrays(np.float64, 5, elements=finite), finite)
def test_dot_symmetric_bilinear(a, b, c, s):
    assert dot(a, b) == dot(b, a)
    assert np.isclose(dot(a + s * c, b), dot(a, b) + s * dot(c, b), rtol=1e-9, atol=1e-6)


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def test_matmul(rng):
    m = rng.standard_normal((3, 4))
    assert np.array_equal(matmul(np.eye(3), m), m)
    a, b = rng.standard_normal((1, 2)), rng.standard_normal((2, 1))
    assert matmul(a, b)[0, 0] == pytest.approx(dot(a[0], b[:, 0]), abs=1e-15)
    b = rng.standard_normal((4, 2))
    assert np.max(np.abs(matmul(m, b) - naive_matmul(m, b))) < 1e-12
    with pytest.raises(DimensionError):
        matmul(m, m)


def test_gram_schmidt_examples():
    np.testing.assert_allclose(gram_schmidt_extend([], [3.0, 0.0]), [1.0, 0.0])
    e1, e2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    np.testing.assert_allclose(gram_schmidt_extend([e1], e1 + e2), e2, atol=1e-15)
    assert gram_schmidt_extend([e1], 2 * e1) is None


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 30))
def test_gram_schmidt_orthonormal(seed, k):
    rng = np.random.default_rng(seed)
    basis = []
    for _ in range(k):
        v = gram_schmidt_extend(basis, rng.standard_normal(40))
        assert v is not None
        basis.append(v)
    r = gram_schmidt_extend(basis, rng.standard_normal(40))
    assert abs(np.linalg.norm(r) - 1) < 1e-10
    assert max(abs(np.dot(r, b)) for b in basis) < 1e-10
    # span preserved: the input is recovered from basis + result
    v = rng.standard_normal(40)
    u = gram_schmidt_extend(basis, v)
    full = np.array(basis + [u])
    assert np.linalg.norm(full.T @ (full @ v) - v) < 1e-9 * np.linalg.norm(v)


def explicit_kron_form(G, D, A):
    vec = D.flatten(order="F")  # column stacking
    return float(vec @ np.kron(A, G) @ vec)


def test_kron_quad_form_examples(rng):
    D = rng.standard_normal((3, 2))
    assert kron_quad_form(np.eye(3), D, np.eye(2)) == pytest.approx(np.sum(D ** 2), rel=1e-14)
    assert kron_quad_form(np.eye(3), np.zeros((3, 2)), np.eye(2)) == 0
    G = rng.standard_normal((3, 3))
    A = rng.standard_normal((2, 2))
    G, A = G.T @ G, A.T @ A
    assert kron_quad_form(G, D, A) == pytest.approx(explicit_kron_form(G, D, A), rel=1e-10)
    with pytest.raises(DimensionError):
        kron_quad_form(np.eye(2), D, np.eye(2))


def test_kron_quad_form_exhaustive_small_shapes(rng):
    for out, inp in itertools.product(range(1, 5), repeat=2):
        for _ in range(3):
            mg = rng.standard_normal((out, out))
            ma = rng.standard_normal((inp, inp))
            G, A = mg.T @ mg, ma.T @ ma
            D = rng.standard_normal((out, inp))
            val = kron_quad_form(G, D, A)
            assert val >= 0
            assert val == pytest.approx(explicit_kron_form(G, D, A), rel=1e-10)
