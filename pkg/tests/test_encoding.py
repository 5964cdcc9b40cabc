import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from inr_change.encoding import Encoding, RffMatrix, encode, encode_jacobian


def _fixed(B):
    B = np.asarray(B, dtype=float)
    return Encoding(B.shape[1], RffMatrix(B, 1.0, 0))


def test_zero_matrix_gives_ones_then_zeros(rng):
    enc = _fixed(np.zeros((4, 3)))
    np.testing.assert_array_equal(encode(enc, rng.normal(size=3)), [1] * 4 + [0] * 4)


def test_zero_input_gives_ones_then_zeros():
    enc = Encoding.fourier(3, 5, 10.0, seed=1)
    np.testing.assert_array_equal(encode(enc, np.zeros(3)), [1] * 5 + [0] * 5)


def test_scalar_evaluation():
    out = encode(_fixed([[0.5, 0, 0]]), np.array([1.0, 0, 0]))
    np.testing.assert_allclose(out, [-1, 0], atol=1e-15)


def test_identity_passthrough_and_jacobian():
    enc = Encoding.identity(2)
    v = np.array([0.3, -0.7])
    np.testing.assert_array_equal(encode(enc, v), v)
    np.testing.assert_array_equal(encode_jacobian(enc, v), np.eye(2))
    assert enc.output_dim == 2


def test_zero_matrix_jacobian_is_zero():
    np.testing.assert_array_equal(encode_jacobian(_fixed(np.zeros((3, 2))), np.ones(2)), 0)


def test_jacobian_scalar_case():
    J = encode_jacobian(_fixed([[0.25, 0, 0]]), np.zeros(3))
    np.testing.assert_allclose(J, [[0, 0, 0], [np.pi / 2, 0, 0]], atol=1e-15)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        encode(Encoding.fourier(3, 4), np.zeros(2))
    with pytest.raises(ValueError):
        encode_jacobian(Encoding.identity(2), np.zeros(3))


def test_same_seed_bit_identical():
    a, b = RffMatrix.draw(64, 3, 10.0, 7), RffMatrix.draw(64, 3, 10.0, 7)
    assert np.array_equal(a.B, b.B)
    assert not np.array_equal(a.B, RffMatrix.draw(64, 3, 10.0, 8).B)


def test_sigma_is_standard_deviation():
    B = RffMatrix.draw(20000, 2, 3.0, 0).B
    assert abs(B.std() - 3.0) < 0.05


@given(st.integers(1, 16), st.integers(2, 3), st.floats(0.1, 20.0), st.integers(0, 10 ** 6),
       st.lists(st.floats(-1.05, 1.05), min_size=3, max_size=3))
def test_jacobian_matches_central_differences(m, d, sigma, seed, v):
    enc = Encoding.fourier(d, m, sigma, seed)
    v = np.array(v[:d])
    J = encode_jacobian(enc, v)
    h = 1e-5
    fd = np.stack([(encode(enc, v + h * e) - encode(enc, v - h * e)) / (2 * h) for e in np.eye(d)], axis=1)
    scale = max(np.abs(J).max(), 1e-12)
    assert np.abs(fd - J).max() / scale < 1e-5


@given(st.integers(1, 32), st.floats(0.1, 50.0), st.integers(0, 10 ** 6))
def test_feature_norm_equals_m_and_bounded(m, sigma, seed):
    enc = Encoding.fourier(3, m, sigma, seed)
    g = encode(enc, np.random.default_rng(seed).uniform(-1, 1, (5, 3)))
    assert np.all(np.abs(g) <= 1)
    np.testing.assert_allclose((g ** 2).sum(axis=1), m, rtol=1e-12)
