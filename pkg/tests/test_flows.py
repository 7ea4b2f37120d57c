import numpy as np
import pytest
from scipy.integrate import trapezoid

from sdflow.flows import (CouplingLayer, PriorFlow, SequenceFlow, coupling_forward, coupling_inverse,
                          prior_log_density, prior_sample, sequence_generate, sequence_log_likelihood,
                          sequence_transform)
from sdflow.numcore import ops

from conftest import numerical_jacobian, params_grad_error

LN_2PI = np.log(2 * np.pi)


def small_flow(n, n_f=2, seed=0, zero_last=False, layers=4):
    flow = SequenceFlow(n, n_f, n_layers=layers, hidden=(8, 8), rnn_width=6, ctx_dim=5)
    return flow, flow.init_params(np.random.default_rng(seed), zero_last=zero_last)


def test_zero_init_coupling_is_identity(rng):
    layer = CouplingLayer(4, 3, 0)
    P = layer.init_params(rng)
    v, ctx = rng.standard_normal((10, 4)), rng.standard_normal((10, 3))
    w, ld = coupling_forward(layer, P, v, ctx)
    np.testing.assert_array_equal(w.data, v)
    np.testing.assert_array_equal(ld.data, 0.0)
    np.testing.assert_array_equal(coupling_inverse(layer, P, v, ctx).data, v)


def test_constant_log_scale_doubles_transformed_part(rng):
    layer = CouplingLayer(4, 0, 0, hidden=(3,))
    P = layer.init_params(rng)
    c = layer.scale_bound
    P["coupling.out.b"] = np.array([c * np.arctanh(np.log(2) / c)] * 2 + [0.0, 0.0])
    v = rng.standard_normal((3, 4))
    w, ld = layer.forward(P, v)
    expect = v.copy()
    expect[:, layer.idx_b] *= 2
    np.testing.assert_allclose(w.data, expect, rtol=1e-14)
    np.testing.assert_allclose(ld.data, 1.386294, atol=1e-6)


def test_split_patterns_complement():
    a, b = CouplingLayer(5, 0, 0), CouplingLayer(5, 0, 1)
    assert sorted(a.idx_a + a.idx_b) == list(range(5))
    assert a.idx_b == b.idx_a and a.idx_a == b.idx_b


def test_log_scale_is_bounded(rng):
    layer = CouplingLayer(2, 0, 0, hidden=(3,), scale_bound=5.0)
    P = layer.init_params(rng)
    P["coupling.out.b"] = np.array([1e6, 0.0])
    _, ld = layer.forward(P, rng.standard_normal((2, 2)))
    assert np.all(np.abs(ld.data) <= 5.0)


def test_coupling_dimension_mismatch(rng):
    layer = CouplingLayer(4, 2, 0)
    P = layer.init_params(rng)
    with pytest.raises(ValueError):
        layer.forward(P, np.zeros((2, 3)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        layer.forward(P, np.zeros((2, 4)), np.zeros((2, 1)))


@pytest.mark.parametrize("n, ctx_dim", [(4, 3), (3, 0), (1, 2), (1, 0)])
def test_coupling_logdet_matches_jacobian(n, ctx_dim, rng):
    layer = CouplingLayer(n, ctx_dim, 1, hidden=(6, 6))
    P = layer.init_params(rng, zero_last=False)
    ctx = rng.standard_normal((1, ctx_dim)) if ctx_dim else None
    v = rng.standard_normal(n)
    J = numerical_jacobian(lambda z: layer.forward(P, z[None], ctx)[0].data, v)
    _, ref = np.linalg.slogdet(J)
    got = layer.forward(P, v[None], ctx)[1].data[0]
    assert abs(got - ref) <= 1e-3 * max(abs(ref), 1e-3)


def test_coupling_round_trip(rng):
    layer = CouplingLayer(4, 3, 0)
    P = layer.init_params(rng, zero_last=False)
    v, ctx = 3 * rng.standard_normal((1000, 4)), rng.standard_normal((1000, 3))
    back = layer.inverse(P, layer.forward(P, v, ctx)[0], ctx).data
    assert np.abs(back - v).max() < 1e-9


def test_stack_round_trip(rng):
    layers = [CouplingLayer(4, 3, k % 2, prefix=f"c{k}") for k in range(4)]
    P = {}
    for layer in layers:
        P.update(layer.init_params(rng, zero_last=False))
    v, ctx = rng.standard_normal((500, 4)), rng.standard_normal((500, 3))
    w = v
    for layer in layers:
        w = layer.forward(P, w, ctx)[0]
    for layer in reversed(layers):
        w = layer.inverse(P, w, ctx)
    assert np.abs(w.data - v).max() < 1e-8


def test_zero_init_sequence_flow_is_identity(rng):
    flow, P = small_flow(3, zero_last=True)
    x, cond = rng.standard_normal((4, 5, 3)), rng.standard_normal((4, 5, 2))
    lam, ld = sequence_transform(flow, P, x, cond)
    np.testing.assert_array_equal(lam.data, x)
    np.testing.assert_array_equal(ld.data, 0.0)
    np.testing.assert_array_equal(sequence_generate(flow, P, cond, lam=x), x)


def test_sequence_shape_errors(rng):
    flow, P = small_flow(3)
    with pytest.raises(ValueError):
        flow.transform(P, np.zeros((2, 4, 3)), np.zeros((2, 5, 2)))
    with pytest.raises(ValueError):
        flow.transform(P, np.zeros((2, 4, 2)), np.zeros((2, 4, 2)))


@pytest.mark.parametrize("n, T", [(n, T) for n in range(1, 5) for T in range(1, 9) if n * T <= 8])
def test_sequence_logdet_matches_full_jacobian(n, T):
    flow, P = small_flow(n, seed=n * 10 + T)
    rng = np.random.default_rng(T)
    cond = rng.standard_normal((1, T, 2))
    x = rng.standard_normal(n * T)
    fwd = lambda z: flow.transform(P, z.reshape(1, T, n), cond)[0].data.ravel()
    _, ref = np.linalg.slogdet(numerical_jacobian(fwd, x))
    got = flow.transform(P, x.reshape(1, T, n), cond)[1].data[0]
    assert abs(got - ref) <= 1e-3 * max(abs(ref), 1e-3)


def test_generate_then_transform_recovers_lambda(rng):
    flow, P = small_flow(3, seed=3)
    cond = rng.standard_normal((100, 6, 2))
    lam = rng.standard_normal((100, 6, 3))
    x = sequence_generate(flow, P, cond, lam=lam)
    assert np.abs(flow.transform(P, x, cond)[0].data - lam).max() < 1e-7
    assert np.abs(sequence_generate(flow, P, cond, lam=flow.transform(P, x, cond)[0].data) - x).max() < 1e-7


def test_generate_from_rng_requires_rng():
    flow, P = small_flow(2)
    with pytest.raises(ValueError):
        flow.generate(P, np.zeros((1, 2, 2)))


@pytest.mark.parametrize("T, expect", [(1, -LN_2PI), (2, -2 * LN_2PI)])
def test_identity_log_likelihood_at_origin(T, expect):
    flow, P = small_flow(2, zero_last=True)
    ll = sequence_log_likelihood(flow, P, np.zeros((1, T, 2)), np.zeros((1, T, 2))).data
    np.testing.assert_allclose(ll, [expect], rtol=1e-14)
    assert abs(-LN_2PI - (-1.837877)) < 1e-6


def test_likelihood_integrates_to_one():
    flow, P = small_flow(2, seed=7)
    g = np.linspace(-8, 8, 400)
    X, Y = np.meshgrid(g, g, indexing="ij")
    x = np.stack([X.ravel(), Y.ravel()], axis=1)[:, None, :]
    cond = np.broadcast_to(np.array([0.4, -0.9]), (x.shape[0], 1, 2))
    dens = np.exp(flow.log_likelihood(P, x, cond).data).reshape(400, 400)
    assert abs(trapezoid(trapezoid(dens, g, axis=1), g) - 1.0) < 1e-2
    # the flow is genuinely non-trivial
    assert np.abs(dens - np.exp(-0.5 * (X ** 2 + Y ** 2)) / (2 * np.pi)).max() > 1e-3


def test_causality(rng):
    flow, P = small_flow(3, seed=4)
    x, cond = rng.standard_normal((1, 6, 3)), rng.standard_normal((1, 6, 2))
    base = flow.transform(P, x, cond)[0].data
    for tp in range(6):
        x2 = x.copy()
        x2[0, tp] += 0.5
        lam = flow.transform(P, x2, cond)[0].data
        np.testing.assert_array_equal(lam[0, :tp], base[0, :tp])
        assert np.abs(lam[0, tp] - base[0, tp]).max() > 1e-6


def test_conditioning_changes_likelihood(rng):
    flow, P = small_flow(3, seed=5)
    x = rng.standard_normal((4, 5, 3))
    c1, c2 = rng.standard_normal((4, 5, 2)), rng.standard_normal((4, 5, 2))
    l1, l2 = flow.log_likelihood(P, x, c1).data, flow.log_likelihood(P, x, c2).data
    assert np.abs(l1 - l2).min() > 1e-6


def test_zero_init_generation_is_standard_normal():
    flow, P = small_flow(2, zero_last=True)
    x = flow.generate(P, np.zeros((1000, 10, 2)), rng=np.random.default_rng(0)).reshape(-1, 2)
    assert np.abs(x.mean(axis=0)).max() < 0.03
    np.testing.assert_allclose(x.var(axis=0), 1.0, rtol=0.03)


def test_sequence_flow_param_gradients(rng):
    flow = SequenceFlow(2, 1, n_layers=2, hidden=(3,), rnn_width=2, ctx_dim=2)
    P = flow.init_params(rng, zero_last=False)
    x, cond = rng.standard_normal((2, 3, 2)), rng.standard_normal((2, 3, 1))
    assert params_grad_error(lambda Q: ops.sum(flow.log_likelihood(Q, x, cond)), P) < 1e-4


def test_zero_init_prior_density():
    prior = PriorFlow(2)
    P = prior.init_params(np.random.default_rng(0))
    np.testing.assert_allclose(prior_log_density(prior, P, np.zeros((1, 2))).data, [-LN_2PI], rtol=1e-14)


def test_prior_sample_round_trip(rng):
    prior = PriorFlow(3, hidden=(8,))
    P = prior.init_params(rng, zero_last=False)
    f = prior_sample(prior, P, rng, count=200)
    z, _ = prior.to_base(P, f)
    again = prior.sample(P, z=z.data)
    np.testing.assert_allclose(again, f, atol=1e-12)
    assert np.abs(prior.log_density(P, again).data - prior.log_density(P, f).data).max() < 1e-9


def test_prior_one_dim_normalizes(rng):
    prior = PriorFlow(1)
    P = prior.init_params(rng, zero_last=False)
    g = np.linspace(-15, 15, 30001)
    dens = np.exp(prior.log_density(P, g[:, None]).data)
    assert abs(trapezoid(dens, g) - 1.0) < 1e-3


def test_prior_shape_error():
    prior = PriorFlow(2)
    with pytest.raises(ValueError):
        prior.log_density(prior.init_params(np.random.default_rng(0)), np.zeros((3, 3)))
