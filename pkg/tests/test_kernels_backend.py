import numpy as np
import pytest

from kflow import BACKEND, kernels
from kflow import _pykernels as py

cy = kernels.compiled_backend
needs_compiled = pytest.mark.skipif(cy is None, reason="compiled backend not built")


def test_backend_name():
    assert BACKEND in ("cython", "python")


@needs_compiled
def test_chain_product_agrees(rng):
    mats = rng.dirichlet(np.ones(5), size=(7, 5))
    np.testing.assert_allclose(cy.chain_product(mats), py.chain_product(mats), atol=1e-14)
    np.testing.assert_allclose(py.chain_product(mats),
                               np.linalg.multi_dot(list(mats)), atol=1e-14)
    assert np.array_equal(py.chain_product(np.zeros((0, 3, 3))), np.eye(3))


@needs_compiled
def test_poisson_products_agrees(rng):
    jumps = rng.dirichlet(np.ones(3), size=(2, 3))
    counts = rng.poisson(2.0, size=50)
    choices = rng.integers(0, 2, size=counts.sum())
    a = cy.poisson_products(counts, choices, jumps)
    b = py.poisson_products(counts, choices, jumps)
    np.testing.assert_allclose(a, b, atol=1e-14)
    off = np.concatenate([[0], np.cumsum(counts)[:-1]])
    s = int(np.argmax(counts))
    ref = np.eye(3)
    for c in choices[off[s]:off[s] + counts[s]]:
        ref = ref @ jumps[c]
    np.testing.assert_allclose(b[s], ref, atol=1e-14)


@needs_compiled
@pytest.mark.parametrize("n", [1, 2, 3])
def test_tensor_moments_agrees(rng, n):
    K = rng.dirichlet(np.ones(3), size=(20, 3))
    s1, q1 = cy.tensor_moments(K, n)
    s2, q2 = py.tensor_moments(K, n)
    np.testing.assert_allclose(s1, s2, atol=1e-12)
    np.testing.assert_allclose(q1, q2, atol=1e-12)
    ref = K[0]
    for _ in range(n - 1):
        ref = np.kron(ref, K[0])
    s0, _ = py.tensor_moments(K[:1], n)
    np.testing.assert_allclose(s0, ref, atol=1e-15)


@needs_compiled
@pytest.mark.parametrize("kind", [py.TV, py.W1])
@pytest.mark.parametrize("tol", [0.0, 0.05, 0.3])
def test_select_rows_agrees(rng, kind, tol):
    mu = rng.dirichlet(np.ones(6), size=(9, 4))
    idx = rng.integers(0, 4, size=(6, 5))
    coords = np.linspace(0, 1, 6)
    o1, f1 = cy.select_rows(mu, idx, coords, tol, kind)
    o2, f2 = py.select_rows(mu, idx, coords, tol, kind)
    np.testing.assert_allclose(o1, o2, atol=1e-15)
    assert np.array_equal(np.asarray(f1), np.asarray(f2))


@needs_compiled
def test_compose_site_maps_agrees(rng):
    counts = rng.integers(0, 6, size=40)
    coins = rng.choice([-1, 1], size=(counts.sum(), 5))
    a = cy.compose_site_maps(counts, coins, 5)
    b = py.compose_site_maps(counts, coins, 5)
    assert np.array_equal(np.asarray(a), b)


def test_readonly_inputs_accepted():
    K = np.eye(3)[None].repeat(2, axis=0)
    K.setflags(write=False)
    out = kernels.chain_product(K)
    assert np.array_equal(out, np.eye(3))



def test_fallback_selected_by_environment():
    import os
    import subprocess
    import sys

    env = dict(os.environ, KFL_BACKEND="python")
    out = subprocess.run([sys.executable, "-c", "import kflow; print(kflow.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
