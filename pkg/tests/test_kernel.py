import numpy as np
import pytest

from sodgp import autodiff as ad
from sodgp.errors import DimensionMismatch
from sodgp.kernel import SqExpParams, cross, diag, gram
from sodgp.numerics import cholesky


def _brute(variance, ls, x1, x2):
    out = np.empty((len(x1), len(x2)))
    for a in range(len(x1)):
        for b in range(len(x2)):
            out[a, b] = variance * np.exp(-0.5 * np.sum((x1[a] - x2[b]) ** 2 / ls ** 2))
    return out


def test_gram_examples(rng):
    x = rng.standard_normal((5, 3))
    p = SqExpParams.from_values(0.7, 1.3)
    k = gram(p, x)
    np.testing.assert_array_equal(np.diag(k), np.full(5, 0.7))
    k1 = gram(SqExpParams.from_values(1.0, 1.0), np.array([[0.0], [np.sqrt(2.0)]]))
    assert k1[0, 1] == pytest.approx(0.36788, abs=1e-5)
    k2 = gram(SqExpParams.from_values(0.5, 0.5), np.array([[0.0], [0.5]]))
    assert k2[0, 1] == pytest.approx(0.30327, abs=1e-5)


def test_gram_matches_brute_force_ard(rng):
    x = rng.standard_normal((6, 3))
    ls = np.array([0.5, 1.0, 2.0])
    p = SqExpParams.from_values(1.7, ls)
    np.testing.assert_allclose(gram(p, x), _brute(1.7, ls, x, x), rtol=1e-13)
    np.testing.assert_array_equal(gram(p, x), gram(p, x).T)


def test_cross_examples(rng):
    p = SqExpParams.from_values(0.9, 0.8)
    x = rng.standard_normal((4, 2))
    np.testing.assert_allclose(cross(p, x, x), gram(p, x), rtol=1e-14, atol=1e-15)
    single = cross(p, np.array([[0.0, 0.0]]), np.array([[0.3, 0.4]]))
    assert single.shape == (1, 1)
    assert single[0, 0] == pytest.approx(0.9 * np.exp(-0.5 * 0.25 / 0.64), rel=1e-14)
    x1, x2 = rng.standard_normal((3, 2)), rng.standard_normal((4, 2))
    k = cross(p, x1, x2)
    np.testing.assert_allclose(k, _brute(0.9, np.array([0.8]), x1, x2), rtol=1e-13)
    assert np.all((k > 0) & (k <= 0.9))


def test_dimension_mismatch(rng):
    p = SqExpParams.from_values(1.0, [1.0, 2.0])
    with pytest.raises(DimensionMismatch):
        gram(p, rng.standard_normal((3, 3)))
    with pytest.raises(DimensionMismatch):
        cross(SqExpParams.from_values(1.0, 1.0), np.ones((2, 2)), np.ones((2, 3)))


def test_gram_is_psd(rng):
    for n in (5, 20, 40):
        x = rng.standard_normal((n, 2))
        cholesky(gram(SqExpParams.from_values(1.0, 0.7), x))


def test_off_diagonal_below_variance_unless_rows_coincide(rng):
    x = rng.standard_normal((5, 2))
    x[3] = x[1]
    k = gram(SqExpParams.from_values(2.0, 1.0), x)
    off = ~np.eye(5, dtype=bool)
    same = np.zeros((5, 5), dtype=bool)
    same[1, 3] = same[3, 1] = True
    assert np.all(k[off & ~same] < 2.0)
    assert np.all(k[same] == 2.0)


def test_long_lengthscale_limit(rng):
    x = rng.standard_normal((6, 2))
    k = gram(SqExpParams.from_values(0.8, 1e6), x)
    np.testing.assert_allclose(k, np.full((6, 6), 0.8), atol=1e-6)


def test_diag(rng):
    x = rng.standard_normal((2, 4, 3))
    np.testing.assert_array_equal(diag(SqExpParams.from_values(1.5, 1.0), x), np.full((2, 4), 1.5))


def test_batched_inputs(rng):
    x = rng.standard_normal((3, 5, 2))
    p = SqExpParams.from_values(1.1, 0.6)
    k = gram(p, x)
    for t in range(3):
        np.testing.assert_allclose(k[t], gram(p, x[t]), rtol=1e-14)


@pytest.mark.parametrize("n_ls", [1, 2])
def test_fused_kernel_gradients(rng, n_ls):
    x1 = rng.standard_normal((2, 5, 2))
    x2 = rng.standard_normal((4, 2))
    w = rng.standard_normal((2, 5, 4))

    def f(lv, ll, a, b):
        k = cross(SqExpParams(lv, ll), a, b)
        return ad.sum(ad.multiply(k, w))

    err = ad.check_gradients(f, [np.array(0.3), rng.normal(size=n_ls) * 0.3, x1, x2])
    assert err < 1e-6


def test_gram_logdet_gradient(rng):
    x = rng.standard_normal((8, 2))

    def f(lv, ll):
        k = ad.add(gram(SqExpParams(lv, ll), x), 1e-3 * np.eye(8))
        return ad.scalar_multiply(ad.sum(ad.log(ad.diagonal(ad.cholesky(k)))), 2.0)

    assert ad.check_gradients(f, [np.array(0.2), np.array([0.1])]) < 1e-5
    assert ad.check_gradients(f, [np.array(-0.4), np.array([0.3, -0.2])]) < 1e-5
