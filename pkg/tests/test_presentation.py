import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kflow.core import StateSpace, identity_kernel, kernel_compose, measure_distance
from kflow.models import local_smoothing_model
from kflow.presentation import (
    CoverageError, DenseGrid, approx_index, calibrate_eps_schedule, compose_presented, evaluate_e,
    identity_grid_function, interpolate_i, limit_select, present_p, van_der_corput, vdc_enumeration,
)

from conftest import SEED


def half_grid(m=17):
    return DenseGrid(StateSpace.grid(m), range(0, m, 2))


def test_van_der_corput():
    assert [van_der_corput(k) for k in range(1, 6)] == [0.5, 0.25, 0.75, 0.125, 0.625]
    order = vdc_enumeration(StateSpace.grid(5))
    assert order == [0, 4, 2, 1, 3]
    assert vdc_enumeration(StateSpace.discrete(3), [2, 0]) == [0, 2]


def test_grid_validation():
    space = StateSpace.grid(9)
    DenseGrid(space, [0, 8])
    with pytest.raises(CoverageError):
        DenseGrid(space, [0, 8], eps=[0.8, 0.4])
    with pytest.raises(ValueError):
        DenseGrid(space, None, eps=[0.1, 0.2])
    with pytest.raises(CoverageError):
        DenseGrid(space, range(0, 9, 2), eps=[2.0, 1.0, 0.5, 0.2])
    g = half_grid()
    assert g.minsep == 0.125 and g.covering_radius == 0.0625
    assert g.eps[-1] == 0.25 and np.all(np.diff(g.eps) < 0)


def test_approx_index_examples():
    g = half_grid()
    for k, z in enumerate(g.Z):
        assert approx_index(g, int(z), g.J_max) == k
    # x = 1/16 sits between z = 0 (enumerated first) and z = 1/8
    assert g.Z[approx_index(g, 1, g.J_max)] == 0
    assert approx_index(g, 5, 1) == 0
    with pytest.raises(ValueError):
        approx_index(g, 0, 0)


def test_limit_select_examples():
    a, b = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    mu, ok = limit_select([a, a, a])
    assert ok and mu is not None and np.array_equal(mu, a)
    seq = [np.array([1 - 2.0 ** -j, 2.0 ** -j]) for j in range(1, 8)]
    mu, ok = limit_select(seq, tol=0.3)
    # seq[0] is 1/2 away from the tail, seq[1] within 1/4 of every successor
    assert ok and np.array_equal(mu, seq[1])
    mu, ok = limit_select([a, b, a, b], tol=0.1)
    assert not ok and np.array_equal(mu, b)
    with pytest.raises(ValueError):
        limit_select([])


def test_interpolate_examples(rng):
    g = half_grid()
    mu = rng.dirichlet(np.ones(17), size=g.size)
    K = interpolate_i(g, mu)
    np.testing.assert_array_equal(K[g.Z], mu)
    const = np.broadcast_to(mu[0], mu.shape)
    np.testing.assert_array_equal(interpolate_i(g, const), np.broadcast_to(mu[0], (17, 17)))
    I = interpolate_i(g, identity_grid_function(g))
    for x in range(17):
        e = np.zeros(17)
        e[x] = 1
        assert measure_distance(I[x], e, "w1", g.space) <= g.eps[-1] / 2
    np.testing.assert_array_equal(interpolate_i(g, mu, x=3), K[3])


def test_e_and_p_examples():
    g = half_grid()
    assert np.array_equal(evaluate_e(g, identity_kernel(17)), identity_grid_function(g))
    full = DenseGrid(StateSpace.grid(9))
    assert np.array_equal(present_p(full, identity_kernel(9)), identity_kernel(9))
    K = np.random.default_rng(SEED).dirichlet(np.ones(9), size=9)
    assert np.array_equal(present_p(full, K), K)


def test_compose_presented_examples(rng):
    full = DenseGrid(StateSpace.grid(9))
    K1, K2 = rng.dirichlet(np.ones(9), size=(2, 9))
    mus = [evaluate_e(full, K1), evaluate_e(full, K2)]
    np.testing.assert_allclose(compose_presented(full, mus), kernel_compose(K1, K2), atol=1e-15)
    g = half_grid()
    mu0 = identity_grid_function(g)
    np.testing.assert_array_equal(compose_presented(g, [mu0]), interpolate_i(g, mu0))
    P = compose_presented(g, [mu0, mu0, mu0])
    np.testing.assert_array_equal(P, interpolate_i(g, mu0))
    with pytest.raises(ValueError):
        compose_presented(g, [])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_presentation_laws(seed):
    g = half_grid()
    rng = np.random.default_rng(seed)
    mu = rng.dirichlet(np.ones(17), size=g.size)
    assert np.array_equal(evaluate_e(g, interpolate_i(g, mu)), mu)
    K = rng.dirichlet(np.ones(17), size=17)
    p = present_p(g, K)
    assert np.array_equal(present_p(g, p), p)
    a = np.zeros(17)
    a[int(rng.integers(17))] = 1.0
    D = np.broadcast_to(a, (17, 17))
    assert np.array_equal(present_p(g, D), D)


def test_nonzero_tolerance_selects_earlier_rows():
    g = half_grid().with_eps(half_grid().eps, tol=2.0)
    mu = np.random.default_rng(SEED).dirichlet(np.ones(17), size=g.size)
    out, flags = interpolate_i(g, mu, return_flags=True)
    assert not flags.any()
    np.testing.assert_array_equal(out[5], mu[approx_index(g, 5, 1)])


def test_calibrate_eps_schedule():
    space = StateSpace.grid(9)
    model = local_smoothing_model(9)
    eps = calibrate_eps_schedule(model, space, 2, range(0, 9, 2), 2000, SEED, horizon=0.05)
    base = DenseGrid(space, range(0, 9, 2), J_max=2).eps
    assert eps.shape == (2,) and np.all(np.diff(eps) < 0) and np.all(eps <= base)
    DenseGrid(space, range(0, 9, 2), eps)
    # adjacent rows of any kernel near the identity are 1/8 apart, so level 4 cannot cover
    with pytest.raises(CoverageError):
        calibrate_eps_schedule(model, space, 4, range(0, 9, 2), 500, SEED, horizon=0.25)


def test_calibrated_schedule_monotone_approximation():
    from kflow.core import row_distances
    from kflow.stats import substream

    space = StateSpace.grid(33)
    model = local_smoothing_model(33)
    Z = range(0, 33, 2)
    eps = calibrate_eps_schedule(model, space, 3, Z, 2000, SEED, horizon=0.1)
    g = DenseGrid(space, Z, eps)
    K = model.sample_batch(0.1, 4000, substream(SEED, 77))
    for j in range(g.J_max - 1):
        a = g.Z[g.idx[:, j]]
        b = g.Z[g.idx[:, j + 1]]
        d = row_distances(K[:, a, :], K[:, b, :], "w1", space)
        freq = (d >= 2.0 ** -(j + 1)).mean(axis=0)
        se = np.sqrt(freq * (1 - freq) / K.shape[0])
        assert np.all(freq <= 2.0 ** -(j + 1) + 3 * se)
