import json
import math

import numpy as np
from hypothesis import given, settings, strategies as st

from kflow.stats import (
    TestResult, frequency_with_se, independence_probe, indicator_probes, mean_with_se,
    moment_match, parallel_map, substream, two_sample_moment_test, welch_z, zscores,
)

from conftest import SEED


def test_substreams_are_reproducible_and_distinct():
    a = substream(SEED, 1, 2).random(5)
    b = substream(SEED, 1, 2).random(5)
    c = substream(SEED, 1, 3).random(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_parallel_map_order(monkeypatch):
    monkeypatch.setenv("KFL_THREADS", "3")
    assert parallel_map(lambda x: x * x, range(10)) == [x * x for x in range(10)]
    assert parallel_map(lambda x: x, [], workers=2) == []


def test_zscores_handles_zero_se():
    z = zscores([0.0, 1e-15, 0.1, 0.2], [0.0, 0.0, 0.0, 0.1])
    assert z[0] == 0 and z[1] == 0 and np.isinf(z[2]) and z[3] == 2.0


def test_moment_match_exact_and_shifted(rng):
    exact = np.array([[0.75, 0.25], [0.25, 0.75]])
    se = np.full((2, 2), 0.01)
    ok = moment_match(exact + 0.01, se, exact, band=4)
    assert ok.passed and abs(ok.z_score - 1.0) < 1e-9
    bad = moment_match(exact + 0.1, se, exact, band=4)
    assert not bad.passed and bad.z_score > 4


def test_welch_and_two_sample(rng):
    a = rng.normal(0, 1, 4000)
    b = rng.normal(0, 1, 4000)
    _, se, z = welch_z(a, b)
    assert abs(se - math.sqrt(2 / 4000)) < 2e-3
    assert abs(z) < 4
    r = two_sample_moment_test(np.c_[a, a ** 2], np.c_[b + 0.5, b ** 2])
    assert not r.passed and r.details["worst_probe"] == 0


def test_independence_probe(rng):
    a = rng.normal(size=2000)
    assert independence_probe(a, rng.normal(size=2000), band=4).passed
    assert not independence_probe(a, a + 0.5 * rng.normal(size=2000)).passed
    assert independence_probe(np.ones(10), a[:10]).passed


def test_mean_and_frequency_se():
    m, se = mean_with_se([1.0, 2.0, 3.0, 4.0])
    assert m == 2.5 and abs(se - np.std([1, 2, 3, 4], ddof=1) / 2) < 1e-15
    p, sp = frequency_with_se([1, 0, 0, 0])
    assert p == 0.25 and abs(sp - math.sqrt(0.25 * 0.75 / 4)) < 1e-15


def test_result_serializes():
    r = TestResult("x", float("nan"), 0.0, float("inf"), False, 3, SEED)
    d = json.loads(json.dumps(r.to_dict()))
    assert d["kind"] == "test" and d["seed"] == SEED


def test_indicator_probes_cover_points():
    ps = indicator_probes(2, max_order=2, max_points=1)
    # two one-point bases with N = 1, 2: (y) and (y1, y2) up to permutation
    assert len(ps) == 2 * (2 + 3)
    K = np.array([[[0.5, 0.5], [0.0, 1.0]]])
    vals = ps.evaluate(K)
    assert vals.shape == (1, len(ps))
    assert np.all((vals >= 0) & (vals <= 1))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=50))
def test_mean_with_se_nonnegative(values):
    _, se = mean_with_se(values)
    assert se >= 0
