"""Acceptance suite: one test per criterion, each printing a pass/fail line."""
import math
import time

import numpy as np
import pytest

from kflow.core import StateSpace, encode, identity_kernel
from kflow.consistency import (
    TensorFamily, build_tensor_from_sampler, check_chapman_kolmogorov, check_consistency,
)
from kflow.dyadic_flow import (
    TowerEnsemble, calibrate_schedule, check_evolution, check_increment_independence,
    check_projection_consistency, check_projection_law, check_stationarity, convergence_exceedance,
    flow_kernel,
)
from kflow.models import (
    CoalescingMapModel, TanakaModel, coalescence_probability, poisson_p2, tanaka_mass_statistic,
)
from kflow.pi_functionals import check_diagonal_property
from kflow.presentation import DenseGrid, evaluate_e, interpolate_i, present_p
from kflow.stats import substream, zscores

from conftest import SEED

LN2 = math.log(2)


@pytest.fixture
def report(capsys):
    def emit(k, ok, elapsed, limit, detail):
        ok = bool(ok) and elapsed < limit
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {k}: {detail} ({elapsed:.1f}s / {limit:.0f}s)")
        assert ok, detail
    return emit


@pytest.fixture(scope="module")
def schedule():
    return calibrate_schedule(poisson_p2(), 6, 10, 0, 1.0, seed=SEED)


def test_criterion_01_consistency(report):
    t0 = time.time()
    fam = TensorFamily.from_oracle(poisson_p2(), 3, [0.25, 0.5, 1.0])
    rep = check_consistency(fam, tol=1e-9)
    report(1, rep.max_abs_error < 1e-9, time.time() - t0, 5, f"max error {rep.max_abs_error:.2e}")


def test_criterion_02_chapman_kolmogorov(report):
    t0 = time.time()
    fam = TensorFamily.from_oracle(poisson_p2(), 2, [0.25, 0.5, 0.75, 1.0])
    err = max(check_chapman_kolmogorov(fam, n, t, s).max_abs_error
              for n in (1, 2) for t in (0.25, 0.5) for s in (0.25, 0.5))
    report(2, err < 1e-9, time.time() - t0, 5, f"max error {err:.2e}")


def test_criterion_03_sampler_oracle(report):
    t0 = time.time()
    model = poisson_p2()
    ok, parts = True, []
    for n in (1, 2):
        emp = build_tensor_from_sampler(model, n, LN2, 100_000, SEED)
        exact = model.exact_moment_tensor(n, LN2).entries
        z = np.abs(zscores(emp.entries - exact, emp.std_error))
        frac = float(np.mean(z <= 4))
        ok &= frac >= 0.99
        parts.append(f"n={n} within 4SE {frac:.3f}")
        if n == 1:
            spot = emp.entries[0, 0]
            ok &= abs(spot - 0.75) <= 3 * emp.std_error[0, 0]
            parts.append(f"E[K(0,0)]={spot:.4f}")
        else:
            r, c = encode((0, 1), 2), encode((0, 0), 2)
            spot = emp.entries[r, c]
            ok &= abs(spot - 0.25) <= 3 * emp.std_error[r, c]
            parts.append(f"E[K(0,0)K(1,0)]={spot:.4f}")
    report(3, ok, time.time() - t0, 60, ", ".join(parts))


def test_criterion_04_presentation_laws(report):
    t0 = time.time()
    space = StateSpace.grid(17)
    grid = DenseGrid(space, range(0, 17, 2))
    rng = substream(SEED, 4)
    K = rng.dirichlet(np.ones(17), size=(10_000, 17))
    mu = evaluate_e(grid, K)
    ei = np.array_equal(evaluate_e(grid, interpolate_i(grid, mu)), mu)
    P = present_p(grid, K)
    pp = np.array_equal(present_p(grid, P), P)
    deltas = all(np.array_equal(present_p(grid, np.tile(np.eye(17)[a], (17, 1))), np.tile(np.eye(17)[a], (17, 1)))
                 for a in range(17))
    full = DenseGrid(space)
    ident = np.array_equal(present_p(full, identity_kernel(17)), identity_kernel(17))
    Pi = present_p(grid, identity_kernel(17))
    ident_half = np.array_equal(present_p(grid, Pi), Pi)
    ok = ei and pp and deltas and ident and ident_half
    report(4, ok, time.time() - t0, 10,
           f"e.i=id {ei}, p.p=p {pp}, delta kernels fixed {deltas}, identity fixed {ident}")


def test_criterion_05_tower_structure(report):
    t0 = time.time()
    ens = TowerEnsemble(poisson_p2(), (0.0, 1.0), 4, SEED)
    exact = all(check_projection_consistency(ens.tower(r)).passed for r in range(100))
    rep = check_projection_law(ens, 3, 10_000, band=3.0)
    report(5, exact and rep.passed, time.time() - t0, 120,
           f"projection bit-exact {exact}, projection law max|z| {rep.max_abs_error:.2f}")


def test_criterion_06_evolution(report, schedule):
    t0 = time.time()
    ens = TowerEnsemble(poisson_p2(), (0.0, 1.0), 10, SEED)
    towers = [ens.tower(r) for r in range(10)]
    rng = substream(SEED, 6)
    dy = 0.0
    for k in range(1000):
        r, s, t = np.sort(rng.integers(0, 1025, size=3)) / 1024
        dy = max(dy, check_evolution(towers[k % 10], r, s, t).max_abs_error)
    within, fallbacks = 0, 0
    for k in range(1000):
        r, s, t = np.sort(rng.random(3))
        x = int(rng.integers(2))
        tw = towers[k % 10]
        within += check_evolution(tw, r, s, t, xs=[x], schedule=schedule).passed
        fallbacks += flow_kernel(tw, r, t, schedule, return_info=True)[1]["fallbacks"]
    ok = dy < 1e-12 and within >= 950 and fallbacks == 0
    report(6, ok, time.time() - t0, 120,
           f"dyadic max dev {dy:.1e}, real-time within budget {within}/1000, "
           f"schedule {schedule.n}, fallbacks {fallbacks}")


def test_criterion_07_increments(report):
    t0 = time.time()
    ens = TowerEnsemble(poisson_p2(), (0.0, 1.0), 4, SEED)
    ind = check_increment_independence(ens, [(0.0, 0.5), (0.5, 1.0)], 10_000)
    ovl = check_increment_independence(ens, [(0.0, 0.75), (0.5, 1.0)], 10_000, allow_overlap=True)
    sta = check_stationarity(ens, 0.25, [0.0, 0.25, 0.5, 0.75], 10_000)
    ok = ind.passed and not ovl.passed and sta.passed
    report(7, ok, time.time() - t0, 120,
           f"disjoint z {ind.max_abs_error:.2f}, overlap z {ovl.max_abs_error:.1f}, "
           f"stationarity z {sta.max_abs_error:.2f}")


def test_criterion_08_convergence(report, schedule):
    t0 = time.time()
    ens = TowerEnsemble(poisson_p2(), (0.0, 1.0), 10, SEED)
    rep = convergence_exceedance(ens, 0.3, 0.7, 0, schedule, 1000, band=3.0)
    freqs = ", ".join(f"{r['frequency']:.3f}" for r in rep.details)
    report(8, rep.passed and len(rep.details) == 5, time.time() - t0, 120,
           f"exceedance per j [{freqs}] for schedule {schedule.n}")


def test_criterion_09_tanaka(report):
    t0 = time.time()
    ok, parts = True, []
    for law in ("half", "coin", "uniform"):
        res = tanaka_mass_statistic(TanakaModel(10, law), 9, 100_000, seed=SEED)
        if res.std_error > 0:
            hit = abs(res.mean - 0.5) <= 3 * res.std_error
        else:
            hit = res.mean == 0.5
        ok &= hit
        parts.append(f"{law} {res.mean:.4f}")
        if law == "coin":
            maps = bool(np.all((res.samples == 0) | (res.samples == 1)))
            ok &= maps
            parts.append(f"map regime in {{0,1}} {maps}")
    one = tanaka_mass_statistic(TanakaModel(10, "half"), 1, 1000, seed=SEED)
    exact_half = bool(np.all(one.samples == 0.5))
    ok &= exact_half
    parts.append(f"t=1 all 1/2 {exact_half}")
    report(9, ok, time.time() - t0, 60, ", ".join(parts))


def test_criterion_10_coalescing(report):
    t0 = time.time()
    model = CoalescingMapModel(4)
    ok, worst = True, 0.0
    for y in (1, 2, 3):
        for steps in range(1, 5):
            exact = coalescence_probability(model, 0, y, steps, mode="brute").value
            mc = coalescence_probability(model, 0, y, steps, replicas=100_000, seed=SEED)
            dev = abs(mc.value - exact)
            ok &= dev <= 3 * mc.std_error + 1e-12
            worst = max(worst, dev / mc.std_error if mc.std_error > 0 else 0.0)
    off_diag = 0.0
    for t in (1, 2, 3):
        T = build_tensor_from_sampler(model, 2, t, 20_000, SEED + t).entries
        for x in range(4):
            row = T[encode((x, x), 4)].reshape(4, 4)
            off_diag = max(off_diag, float(np.abs(row - np.diag(np.diag(row))).max()))
    ok &= off_diag == 0.0
    report(10, ok, time.time() - t0, 60, f"max |MC - brute| / SE {worst:.2f}, off-diagonal mass {off_diag}")


def test_criterion_11_negative_controls(report):
    t0 = time.time()
    wrong = TowerEnsemble(poisson_p2(2.0), (0.0, 1.0), 4, SEED)
    rate = check_projection_law(wrong, 3, 10_000, band=3.0, reference=poisson_p2())
    fam = TensorFamily.from_oracle(poisson_p2(), 3, [0.5])
    diag = check_diagonal_property(fam.decorrelated(2), 0, 0.5)
    ens = TowerEnsemble(poisson_p2(), (0.0, 1.0), 4, SEED)
    ovl = check_increment_independence(ens, [(0.0, 0.75), (0.5, 1.0)], 10_000, allow_overlap=True)
    ok = not rate.passed and not diag.passed and not ovl.passed
    report(11, ok, time.time() - t0, 120,
           f"wrong rate z {rate.max_abs_error:.1f}, decorrelated dev {diag.max_abs_error:.3f}, "
           f"overlap z {ovl.max_abs_error:.1f}")
