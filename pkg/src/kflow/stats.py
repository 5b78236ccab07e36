"""Moment matching, two-sample and independence tests, seeded ensembles.

Random streams
--------------
Every random draw comes from ``substream(seed, *key)``: a PCG64 generator
seeded by ``SeedSequence(seed, spawn_key=key)``.  Keys are tuples of
non-negative integers naming where the stream is used (a purpose tag, a
replica index, a block index, ...).  Tasks never share a stream, so
results do not depend on how tasks are distributed over workers.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_BAND = 3.0
DEFAULT_MAX_BAND = 4.0

# purpose tags for stream keys
TAG_TENSOR = 1
TAG_PI = 2
TAG_TOWER = 3
TAG_DIRECT = 4
TAG_CALIBRATE = 5
TAG_FELLER = 6
TAG_MODEL = 7
TAG_TANAKA = 8
TAG_COALESCE = 9
TAG_SEMIGROUP = 10


def substream(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def worker_count() -> int:
    raw = os.environ.get("KFL_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        n = 1
    return max(1, n)


def parallel_map(fn: Callable, items: Iterable, workers: int | None = None) -> list:
    """Ordered map over ``items``; ``KFL_THREADS`` sets the default pool size."""
    items = list(items)
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


@dataclass
class TestResult:
    """Outcome of one statistical check.

    ``statistic`` is the quantity whose deviation is tested and ``z_score``
    its standardised size (``statistic / std_error`` when ``std_error > 0``).
    """

    __test__ = False  # keep pytest from collecting this class

    name: str
    statistic: float
    std_error: float
    z_score: float
    passed: bool
    n_samples: int
    seed: int | None = None
    band: float = DEFAULT_BAND
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("statistic", "std_error", "z_score"):
            d[k] = _jsonable_float(d[k])
        d["details"] = _jsonable(d["details"])
        d["kind"] = "test"
        return d


def _jsonable_float(v):
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return _jsonable_float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def zscores(diff, se, exact_tol: float = 1e-12) -> np.ndarray:
    """Elementwise ``diff / se``; zero-SE entries must match to ``exact_tol``."""
    diff = np.asarray(diff, dtype=np.float64)
    se = np.asarray(se, dtype=np.float64)
    z = np.zeros(np.broadcast(diff, se).shape)
    pos = se > 0
    z[pos] = diff[pos] / se[pos]
    degenerate = ~pos & (np.abs(diff) > exact_tol)
    z[degenerate] = np.inf * np.sign(diff[degenerate])
    return z


def moment_match(mean, std_error, exact, band: float = DEFAULT_MAX_BAND,
                 n_samples: int = 0, seed: int | None = None,
                 name: str = "moment_match") -> TestResult:
    """Max |z| of an empirical tensor (with per-entry SEs) against an exact one."""
    mean = np.asarray(mean, dtype=np.float64)
    se = np.asarray(std_error, dtype=np.float64)
    exact = np.asarray(getattr(exact, "entries", exact), dtype=np.float64)
    if mean.shape != exact.shape or se.shape != mean.shape:
        raise ValueError(f"shape mismatch: {mean.shape}, {se.shape}, {exact.shape}")
    z = zscores(mean - exact, se)
    absz = np.abs(z)
    worst = np.unravel_index(np.argmax(absz), absz.shape) if absz.size else ()
    zmax = float(absz.max()) if absz.size else 0.0
    return TestResult(
        name=name,
        statistic=float(np.abs(mean - exact).max()) if mean.size else 0.0,
        std_error=float(se[worst]) if absz.size else 0.0,
        z_score=zmax,
        passed=zmax <= band,
        n_samples=n_samples,
        seed=seed,
        band=band,
        details={
            "worst_index": [int(i) for i in worst],
            "fraction_within_band": float(np.mean(absz <= band)) if absz.size else 1.0,
            "multiplicity_note": "max over entries; band is not Bonferroni-adjusted",
        },
    )


def welch_z(a, b) -> tuple[float, float, float]:
    """Difference of means, its standard error and z for two independent samples."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = float(a.mean() - b.mean())
    se = math.sqrt(a.var(ddof=1) / a.size + b.var(ddof=1) / b.size) if min(a.size, b.size) > 1 else 0.0
    z = float(zscores(diff, se))
    return diff, se, z


def two_sample_moment_test(values_a, values_b, labels: Sequence[str] | None = None,
                           band: float = DEFAULT_MAX_BAND, seed: int | None = None,
                           name: str = "two_sample_moment_test") -> TestResult:
    """Per-probe Welch z-scores between two independent sample sets.

    ``values_a`` and ``values_b`` are (samples, probes) arrays of probe
    statistics; see ``MomentProbeSet.evaluate``.
    """
    A = np.atleast_2d(np.asarray(values_a, dtype=np.float64))
    B = np.atleast_2d(np.asarray(values_b, dtype=np.float64))
    if A.shape[1] != B.shape[1]:
        raise ValueError("probe counts differ")
    diffs, ses, zs = [], [], []
    for p in range(A.shape[1]):
        d, s, z = welch_z(A[:, p], B[:, p])
        diffs.append(d), ses.append(s), zs.append(z)
    zs = np.asarray(zs)
    k = int(np.argmax(np.abs(zs))) if zs.size else 0
    zmax = float(np.abs(zs).max()) if zs.size else 0.0
    return TestResult(
        name=name,
        statistic=float(diffs[k]) if zs.size else 0.0,
        std_error=float(ses[k]) if zs.size else 0.0,
        z_score=zmax,
        passed=zmax <= band,
        n_samples=int(min(A.shape[0], B.shape[0])),
        seed=seed,
        band=band,
        details={
            "worst_probe": (labels[k] if labels is not None else k) if zs.size else None,
            "z_per_probe": zs.tolist(),
        },
    )


def independence_probe(a, b, band: float = DEFAULT_BAND, seed: int | None = None,
                       name: str = "independence_probe") -> TestResult:
    """Pearson correlation of paired observations with a Fisher-z standard error."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = a.size
    if a.shape != b.shape or n < 4:
        raise ValueError("need at least 4 paired observations of equal length")
    sa, sb = a.std(), b.std()
    if sa < 1e-14 or sb < 1e-14:
        return TestResult(name, 0.0, 0.0, 0.0, True, n, seed, band,
                          details={"note": "degenerate variance; independence holds trivially"})
    r = float(np.corrcoef(a, b)[0, 1])
    r = min(max(r, -1.0), 1.0)
    se = 1.0 / math.sqrt(n - 3)
    z = math.atanh(r) / se if abs(r) < 1.0 else math.copysign(math.inf, r)
    return TestResult(name, r, se, abs(z), abs(z) <= band, n, seed, band,
                      details={"correlation": r})


def frequency_with_se(hits) -> tuple[float, float]:
    hits = np.asarray(hits, dtype=np.float64)
    p = float(hits.mean())
    return p, math.sqrt(max(p * (1 - p), 0.0) / hits.size)


def mean_with_se(values, axis=0):
    v = np.asarray(values, dtype=np.float64)
    n = v.shape[axis]
    mean = v.mean(axis=axis)
    se = v.std(axis=axis, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(mean)
    return mean, se


class MomentProbeSet:
    """Labelled polynomial probes ``K -> g(K(x_1), ..., K(x_n))``.

    Each probe is a pair ``(functional, x)`` of a ``TestFunctional`` and
    a point of ``M^n``; evaluating it on a kernel returns a real number
    whose mean under ``nu_t`` is determined by the transition tensors.
    """

    def __init__(self, probes, labels=None, max_order: int | None = None):
        self.probes = list(probes)
        self.labels = list(labels) if labels is not None else [str(i) for i in range(len(self.probes))]
        self.max_order = max_order if max_order is not None else max(
            (g.N for g, _ in self.probes), default=0)

    def __len__(self):
        return len(self.probes)

    def evaluate(self, kernels) -> np.ndarray:
        """(S, probes) matrix of probe values over a batch of kernels."""
        from .pi_functionals import eval_functional_batch

        kernels = np.asarray(kernels, dtype=np.float64)
        out = np.empty((kernels.shape[0], len(self.probes)))
        for p, (g, x) in enumerate(self.probes):
            rows = [kernels[:, xi, :] for xi in x]
            out[:, p] = eval_functional_batch(g, rows)
        return out

    def exact(self, family, t) -> np.ndarray:
        from .pi_functionals import eval_pi_exact

        return np.array([eval_pi_exact(family, x, t, g).value for g, x in self.probes])


def indicator_probes(m: int, max_order: int = 2, max_points: int = 2,
                     points=None) -> MomentProbeSet:
    """Indicator probes on single points of ``M^N`` for ``N <= max_order``.

    Probes that reduce to the same tensor entry are listed once.  The
    default covers every point of ``M^n`` for ``n <= max_points``.
    """
    from itertools import product

    from .pi_functionals import TestFunctional

    probes, labels, seen = [], [], set()
    pts = points
    if pts is None:
        pts = [p for n in range(1, max_points + 1) for p in product(range(m), repeat=n)]
    for x in pts:
        n = len(x)
        for N in range(1, max_order + 1):
            for ind in product(range(1, n + 1), repeat=N):
                base = tuple(x[i - 1] for i in ind)
                for y in product(range(m), repeat=N):
                    # functionals equal up to a permutation of slots share an entry
                    canon = tuple(sorted(zip(base, y)))
                    if canon in seen:
                        continue
                    seen.add(canon)
                    f = np.zeros((m,) * N)
                    f[y] = 1.0
                    probes.append((TestFunctional(n, f, ind), tuple(x)))
                    labels.append(f"x={x} i={ind} y={y}")
    return MomentProbeSet(probes, labels, max_order)
