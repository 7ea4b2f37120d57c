import itertools

import numpy as np
import pytest
from scipy.integrate import trapezoid

from sdflow.encoder import (LOGVAR_BOUND, GaussianCode, StaticEncoder, aggregate, aggregate_time,
                            check_permutation, encode_frame, random_permutations, reparameterize,
                            shuffle_codes)
from sdflow.numcore import grad_check, ops

from conftest import params_grad_error


def code(mean, var):
    return GaussianCode(np.atleast_1d(np.asarray(mean, float)), np.log(np.atleast_1d(np.asarray(var, float))))


def test_zero_network_gives_standard_code():
    enc = StaticEncoder(4, 2)
    P = {k: np.zeros_like(v) for k, v in enc.init_params(np.random.default_rng(0)).items()}
    c = encode_frame(enc, P, np.ones(4)[None]).numpy()
    np.testing.assert_array_equal(c.mean, 0.0)
    np.testing.assert_array_equal(c.logvar, 0.0)


def test_output_shapes(rng):
    enc = StaticEncoder(4, 3)
    P = enc.init_params(rng)
    c = enc(P, rng.standard_normal((5, 7, 4)))
    assert c.mean.shape == c.logvar.shape == (5, 7, 3)
    assert P["encoder.l2.W"].shape[1] == 2 * 3


def test_dimension_mismatch(rng):
    enc = StaticEncoder(4, 2)
    with pytest.raises(ValueError):
        enc(enc.init_params(rng), np.zeros((3, 5)))


def test_logvar_is_clamped():
    enc = StaticEncoder(1, 1, hidden=(2,))
    P = enc.init_params(np.random.default_rng(0))
    P["encoder.l1.b"] = np.array([0.0, 50.0])
    c = enc(P, np.zeros((2, 1))).numpy()
    np.testing.assert_array_equal(c.logvar, LOGVAR_BOUND)


def test_encoder_param_gradients(rng):
    enc = StaticEncoder(3, 2, hidden=(4, 4))
    P = enc.init_params(rng)
    x = rng.standard_normal((6, 3))
    w = rng.standard_normal((6, 2))

    def loss(Q):
        c = enc(Q, x)
        return ops.sum(ops.add(ops.mul(c.mean, w), ops.square(c.logvar)))
    assert params_grad_error(loss, P) < 1e-4


def test_single_code_unchanged():
    c = code([0.3, -1.0], [2.0, 0.1])
    assert aggregate([c]) is c


def test_empty_aggregate_raises():
    with pytest.raises(ValueError):
        aggregate([])


@pytest.mark.parametrize("m1, m2, mean", [(0.0, 0.0, 0.0), (1.0, 3.0, 2.0)])
def test_product_of_unit_gaussians(m1, m2, mean):
    out = aggregate([code(m1, 1.0), code(m2, 1.0)])
    np.testing.assert_allclose(out.mean, [mean], atol=1e-15)
    np.testing.assert_allclose(np.exp(out.logvar), [0.5], rtol=1e-14)


def test_product_matches_density_product_numerically():
    a, b = code(0.4, 0.7), code(-1.1, 2.5)
    grid = np.linspace(-12, 12, 200_001)
    dens = lambda c: np.exp(-0.5 * (grid - c.mean[0]) ** 2 / c.var[0])
    prod = dens(a) * dens(b)
    prod /= trapezoid(prod, grid)
    m = trapezoid(grid * prod, grid)
    v = trapezoid((grid - m) ** 2 * prod, grid)
    out = aggregate([a, b])
    np.testing.assert_allclose([out.mean[0], out.var[0]], [m, v], rtol=1e-6)


def test_aggregate_permutation_bit_identical(rng):
    codes = [GaussianCode(rng.standard_normal(3), rng.standard_normal(3)) for _ in range(5)]
    ref = aggregate(codes)
    for perm in itertools.permutations(range(5)):
        out = aggregate([codes[i] for i in perm])
        assert out.mean.tobytes() == ref.mean.tobytes()
        assert out.logvar.tobytes() == ref.logvar.tobytes()


def test_aggregate_variance_below_min(rng):
    for _ in range(50):
        codes = [GaussianCode(rng.standard_normal(4), 3 * rng.standard_normal(4)) for _ in range(4)]
        out = aggregate(codes)
        assert (out.var <= np.min([c.var for c in codes], axis=0)).all()


def test_aggregate_time_matches_list_version(rng):
    mean, logvar = rng.standard_normal((3, 6, 2)), rng.standard_normal((3, 6, 2))
    batched = aggregate_time(GaussianCode(mean, logvar)).numpy()
    for b in range(3):
        single = aggregate([GaussianCode(mean[b, t], logvar[b, t]) for t in range(6)])
        np.testing.assert_allclose(batched.mean[b], single.mean, rtol=1e-12)
        np.testing.assert_allclose(batched.logvar[b], single.logvar, rtol=1e-12, atol=1e-14)


def test_aggregate_differentiable(rng):
    m, lv = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))

    def f(mean, logvar):
        out = aggregate([GaussianCode(mean[i], logvar[i]) for i in range(4)])
        return ops.sum(ops.add(out.mean, ops.square(out.logvar)))
    assert grad_check(f, [m, lv]) < 1e-4


def test_reparameterize_zero_noise_is_mean():
    c = code([1.5, -2.0], [0.3, 4.0])
    np.testing.assert_array_equal(reparameterize(c, np.zeros(2)).data, c.mean)


def test_reparameterize_monte_carlo(rng):
    c = code([1.5, -2.0], [0.3, 4.0])
    f = reparameterize(c, rng.standard_normal((100_000, 2))).data
    np.testing.assert_allclose(f.mean(axis=0), c.mean, rtol=0.02)
    np.testing.assert_allclose(f.var(axis=0), c.var, rtol=0.02)


def test_reparameterize_gradient(rng):
    mean, logvar, eta = rng.standard_normal(3), rng.standard_normal(3), rng.standard_normal(3)
    f = lambda m, lv: ops.sum(ops.square(reparameterize(GaussianCode(m, lv), eta)))
    assert grad_check(f, [mean, logvar]) < 1e-4


def test_reparameterize_dimension_mismatch():
    with pytest.raises(ValueError):
        reparameterize(code([0.0, 0.0], [1.0, 1.0]), np.zeros(3))


def test_shuffle_identity_and_reversal():
    x = np.array([[1.0, 1.5], [2.0, 2.5], [3.0, 3.5]])
    np.testing.assert_array_equal(shuffle_codes(x, [0, 1, 2]).data, x)
    np.testing.assert_array_equal(shuffle_codes(x, [2, 1, 0]).data, x[::-1])


def test_shuffle_preserves_multiset_and_input(rng):
    x = rng.standard_normal((4, 9, 2))
    before = x.copy()
    perms = random_permutations(rng, 4, 9)
    out = shuffle_codes(x, perms).data
    np.testing.assert_array_equal(x, before)
    for b in range(4):
        np.testing.assert_array_equal(np.sort(out[b], axis=0), np.sort(x[b], axis=0))
        np.testing.assert_array_equal(out[b], x[b, perms[b]])


def test_shuffle_gradient_is_inverse_permutation(rng):
    x = rng.standard_normal((5, 2))
    w = rng.standard_normal((5, 2))
    assert grad_check(lambda v: ops.sum(ops.mul(shuffle_codes(v, [3, 0, 4, 1, 2]), w)), [x]) < 1e-8


@pytest.mark.parametrize("perm", [[0, 0, 1], [0, 1, 3], [1, 2]])
def test_invalid_permutations(perm):
    with pytest.raises(ValueError):
        shuffle_codes(np.zeros((3, 1)), perm)


def test_random_permutations_valid_and_uniform():
    perms = random_permutations(np.random.default_rng(0), 60_000, 3)
    check_permutation(perms)
    _, counts = np.unique(perms @ np.array([9, 3, 1]), return_counts=True)
    assert len(counts) == 6
    np.testing.assert_allclose(counts / 60_000, 1 / 6, rtol=0.05)
