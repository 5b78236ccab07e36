import itertools
import math

import numpy as np
import pytest

from kflow.core import (
    CapacityError, StateSpace, TransitionTensor, delta_kernel, identity_kernel, tensor_of_kernel,
)
from kflow.consistency import (
    CheckReport, MissingTensorError, TensorFamily, build_tensor_from_sampler, check_chapman_kolmogorov,
    check_consistency, check_feller_small_time, check_feller_space,
)
from kflow.models import (
    CoalescingMapModel, KernelLaw, coalescence_probability, heat_model, poisson_p2,
)

from conftest import SEED


def coalescing_exact(m, n, steps):
    """Average of tensor_of_kernel over every coin path of the cycle model."""
    maps = [[(y + c) % m for y, c in enumerate(coins)] for coins in itertools.product([-1, 1], repeat=m)]
    total = np.zeros((m ** n, m ** n))
    for seq in itertools.product(maps, repeat=steps):
        pos = list(range(m))
        for mp in seq:
            pos = [mp[p] for p in pos]
        total += tensor_of_kernel(delta_kernel(pos), n).entries
    return total / len(maps) ** steps


def test_check_report_pass_rule():
    assert CheckReport("a", 0.5, 0.5).passed
    assert not CheckReport("a", 0.51, 0.5).passed
    assert CheckReport("a", 0.0, 1e-9).to_dict()["kind"] == "check"


def test_sampler_on_delta_laws():
    K0 = np.array([[0.2, 0.8], [0.6, 0.4]])
    emp = build_tensor_from_sampler(KernelLaw.delta(identity_kernel(2)), 2, samples=50, seed=SEED)
    assert np.array_equal(emp.entries, np.eye(4))
    emp = build_tensor_from_sampler(KernelLaw.delta(K0), 2, samples=50, seed=SEED)
    np.testing.assert_allclose(emp.entries, tensor_of_kernel(K0, 2).entries, atol=1e-15)
    assert np.all(emp.std_error < 1e-15)
    with pytest.raises(CapacityError):
        build_tensor_from_sampler(KernelLaw.delta(np.eye(4)), 7, samples=2)


def test_sampler_is_reproducible():
    model = poisson_p2()
    a = build_tensor_from_sampler(model, 1, math.log(2), 2000, SEED)
    b = build_tensor_from_sampler(model, 1, math.log(2), 2000, SEED)
    assert np.array_equal(a.entries, b.entries)


def test_sampler_p2_entry():
    emp = build_tensor_from_sampler(poisson_p2(), 1, math.log(2), 20000, SEED)
    assert abs(emp.entries[0, 0] - 0.75) < 3 * emp.std_error[0, 0]
    np.testing.assert_allclose(emp.entries.sum(axis=1), 1.0, atol=1e-10)


def test_family_identity_at_zero():
    with pytest.raises(ValueError):
        TensorFamily(2, 1, [0.0], {(1, 0.0): TransitionTensor(2, 1, [[0.5, 0.5], [0.5, 0.5]])})
    fam = TensorFamily.from_oracle(poisson_p2(), 2, [0.0, 0.5])
    with pytest.raises(MissingTensorError):
        fam.get(3, 0.5)


def test_consistency_exact_families():
    K0 = np.array([[0.2, 0.8], [0.6, 0.4]])
    law = KernelLaw.delta(K0)
    fam = TensorFamily(2, 4, [1.0], {(n, 1.0): law.exact_moment_tensor(n) for n in range(1, 5)})
    assert check_consistency(fam).max_abs_error < 1e-12
    fam = TensorFamily.from_oracle(poisson_p2(), 3, [0.25, 0.5, 1.0])
    rep = check_consistency(fam)
    assert rep.passed and rep.max_abs_error < 1e-10


def test_consistency_detects_decorrelated_coalescing_family():
    m = 4
    tens = {(n, 1.0): TransitionTensor(m, n, coalescing_exact(m, n, 1)) for n in (1, 2, 3)}
    fam = TensorFamily(m, 3, [1.0], tens)
    assert check_consistency(fam).max_abs_error < 1e-12
    rep = check_consistency(fam.decorrelated(2))
    assert not rep.passed
    # start (0, 0): the true pair sits on one site of {1, 3} with prob 1/2 each,
    # the product puts 1/4 on each of four pairs
    assert abs(rep.max_abs_error - 0.25) < 1e-12
    model = CoalescingMapModel(m)
    p = coalescence_probability(model, 0, 2, 1, mode="brute", event="coalesced").value
    assert rep.max_abs_error >= p / 2


def test_chapman_kolmogorov():
    fam = TensorFamily.from_oracle(poisson_p2(), 2, [0.0, 0.25, 0.5])
    assert check_chapman_kolmogorov(fam, 2, 0.25, 0.25).max_abs_error < 1e-10
    assert check_chapman_kolmogorov(fam, 2, 0.5, 0.0).max_abs_error < 1e-15
    heat = heat_model(5)
    fam = TensorFamily.from_oracle(heat, 1, [0.5, 1.0])
    assert check_chapman_kolmogorov(fam, 1, 0.5, 0.5).max_abs_error < 1e-10


def test_chapman_kolmogorov_detects_wrong_rate():
    fam = TensorFamily.from_oracle(poisson_p2(), 2, [0.25, 0.5])
    fake = fam.replace(2, 0.5, poisson_p2(2.0).exact_moment_tensor(2, 0.5))
    assert not check_chapman_kolmogorov(fake, 2, 0.25, 0.25).passed


def test_feller_small_time():
    ident = KernelLaw.delta(identity_kernel(3))
    rep = check_feller_small_time(lambda t: ident, [1.0, 0.0, 0.0], 0.1, [0.5, 0.25, 0.1], 500, SEED)
    assert rep.max_abs_error == 0.0 and rep.passed
    model = poisson_p2()
    times = [1.0, 0.5, 0.1, 0.01]
    rep = check_feller_small_time(model, [1.0, 0.0], 0.5, times, 20000, SEED)
    for row in rep.details:
        ref = (1 - math.exp(-row["t"])) / 2
        assert abs(row["estimate"] - ref) < 4 * max(row["std_error"], 1e-3)
    assert rep.passed
    with pytest.raises(ValueError):
        check_feller_small_time(model, [1.0, 0.0], 0.5, [0.1, 0.5])


def test_feller_space():
    rep = check_feller_space(poisson_p2(), [1.0, 0.0], 0.5, 0.1, 100, SEED)
    assert rep.skipped and rep.passed
    ident = KernelLaw.delta(identity_kernel(11), StateSpace.grid(11))
    f = np.linspace(0, 1, 11)
    assert check_feller_space(ident, f, None, 0.2, 100, SEED).max_abs_error == 0.0
    coarse = check_feller_space(heat_model(5), np.linspace(0, 1, 5) ** 2, 0.05, 0.1, 50, SEED)
    fine = check_feller_space(heat_model(17), np.linspace(0, 1, 17) ** 2, 0.05, 0.1, 50, SEED)
    assert fine.max_abs_error <= coarse.max_abs_error
    assert fine.max_abs_error == 0.0
