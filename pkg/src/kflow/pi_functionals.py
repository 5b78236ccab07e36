"""Moment functionals on tuples of measures.

A ``TestFunctional`` is ``g(mu_1, ..., mu_n) = sum_y f(y) mu_{i_1}(y_1) ... mu_{i_N}(y_N)``.
Its expectation at ``x in M^n`` under the kernel law is read off the
order-``N`` tensor at ``(x_{i_1}, ..., x_{i_N})`` (``eval_pi_exact``) or
estimated by averaging ``g`` over sampled kernel rows (``eval_pi_empirical``).
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .core import DimensionError, Injection, check_capacity, default_distance, encode, \
    pushforward_matrix, row_distances
from .consistency import CheckReport, TensorFamily, as_law, sample_chunks
from .models import KernelModel
from .stats import TAG_PI, mean_with_se


@dataclass(frozen=True)
class TestFunctional:
    """``n`` measure arguments, coefficient array ``f`` over ``M^N``, 1-based ``indices``."""

    __test__ = False

    n: int
    f: np.ndarray
    indices: tuple

    def __post_init__(self):
        f = np.array(self.f, dtype=np.float64)
        ind = tuple(int(i) for i in self.indices)
        if f.ndim != len(ind) or len(ind) == 0:
            raise DimensionError(f"f has {f.ndim} axes but {len(ind)} indices were given")
        if len(set(f.shape)) > 1:
            raise DimensionError("f must have equal axis lengths")
        if min(ind) < 1 or max(ind) > self.n:
            raise ValueError(f"indices {ind} outside 1..{self.n}")
        if not np.all(np.isfinite(f)):
            raise ValueError("f must be finite")
        f.setflags(write=False)
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "indices", ind)

    @property
    def N(self) -> int:
        return len(self.indices)

    @property
    def m(self) -> int:
        return self.f.shape[0]

    @classmethod
    def constant(cls, m: int, n: int = 1, value: float = 1.0) -> "TestFunctional":
        return cls(n, np.full((m,), value), (1,))

    @classmethod
    def indicator(cls, m: int, y, indices, n: int | None = None) -> "TestFunctional":
        y = tuple(y)
        f = np.zeros((m,) * len(y))
        f[y] = 1.0
        return cls(n or max(indices), f, tuple(indices))


@dataclass
class PiEvaluation:
    value: float
    source: str
    std_error: float | None = None
    n_samples: int = 0


def eval_functional(g: TestFunctional, mus) -> float:
    """``g(mu_1, ..., mu_n)`` by successive contraction of ``f``."""
    mus = [np.asarray(mu, dtype=np.float64) for mu in mus]
    if len(mus) != g.n or any(mu.shape != (g.m,) for mu in mus):
        raise DimensionError(f"expected {g.n} measures on {g.m} points")
    check_capacity(g.m, g.N)
    out = g.f
    for i in g.indices:
        out = np.tensordot(mus[i - 1], out, axes=(0, 0))
    return float(out)


def eval_functional_batch(g: TestFunctional, rows) -> np.ndarray:
    """``g`` over a batch: ``rows[i]`` is an (S, m) array of ``mu_{i+1}`` values."""
    rows = [np.asarray(r, dtype=np.float64) for r in rows]
    if len(rows) != g.n:
        raise DimensionError(f"expected {g.n} row batches, got {len(rows)}")
    check_capacity(g.m, g.N)
    first = rows[g.indices[0] - 1]
    out = np.tensordot(first, g.f, axes=(1, 0))
    for i in g.indices[1:]:
        out = np.einsum("sa...,sa->s...", out, rows[i - 1])
    return out.reshape(first.shape[0])


def _base_point(g: TestFunctional, x) -> tuple:
    x = tuple(int(v) for v in x)
    if len(x) != g.n:
        raise DimensionError(f"point has {len(x)} coordinates, functional takes {g.n}")
    return tuple(x[i - 1] for i in g.indices)


def eval_pi_exact(fam: TensorFamily, x, t: float, g: TestFunctional) -> PiEvaluation:
    row = fam.get(g.N, t).row(_base_point(g, x))
    return PiEvaluation(float(row @ g.f.ravel()), "exact-tensor")


def eval_pi_empirical(law, x, t: float | None, g: TestFunctional, samples: int = 10_000,
                      seed: int = 0) -> PiEvaluation:
    """Mean and standard error of ``g(K(x_1), ..., K(x_n))`` over ``K ~ nu_t``."""
    law = as_law(law, t)
    x = tuple(int(v) for v in x)
    _base_point(g, x)
    vals = np.concatenate([
        eval_functional_batch(g, [K[:, xi, :] for xi in x])
        for K in sample_chunks(law, samples, seed, (TAG_PI,) + x)
    ])
    mean, se = mean_with_se(vals)
    return PiEvaluation(float(mean), "empirical", float(se), samples)


def check_diagonal_property(fam: TensorFamily, x: int, t: float, probe_count: int | None = None,
                            tol: float = 1e-10) -> CheckReport:
    """Compare ``int g1(mu_1) g2(mu_2) Pi^(2)_t((x, x))`` with ``int g1 g2 dPi^(1)_t(x)``.

    Probes are point indicators ``g_r = 1{y_r}`` on ``M^N``.  The left
    side is read from the order-``2N`` tensor at ``(x, ..., x)``; the right
    side from the family's highest-order tensor pushed onto its first
    ``2N`` coordinates, so a family whose order-``2N`` member forgets the
    common origin of the two blocks is caught.
    """
    m, top = fam.m, fam.max_order
    if top < 2:
        raise ValueError("diagonal property needs an order-2 tensor")
    worst, count = [], 0
    for N in range(1, top // 2 + 1):
        n2 = 2 * N
        lhs = fam.get(n2, t).row((x,) * n2)
        hi = fam.get(top, t)
        rhs = pushforward_matrix(hi, Injection(top, tuple(range(1, n2 + 1))))[encode((x,) * top, m)]
        for a in product(range(m), repeat=N):
            for b in product(range(m), repeat=N):
                if probe_count is not None and count >= probe_count:
                    break
                col = encode(a + b, m)
                worst.append((abs(float(lhs[col] - rhs[col])), {"N": N, "y1": list(a), "y2": list(b)}))
                count += 1
    worst.sort(key=lambda w: -w[0])
    return CheckReport(f"diagonal_property(x={x},t={t:g})", worst[0][0] if worst else 0.0, tol,
                       [dict(d, error=e) for e, d in worst[:5]])


def two_point_modulus(law, t_max: float, eps: float, pairs, samples: int = 10_000, seed: int = 0,
                      times=None) -> list[dict]:
    """Estimates of ``nu_t{d(K(x), K(y)) >= eps}`` per pair and time.

    ``law`` is a model (evaluated at ``times``, default ``t_max / 4, t_max / 2,
    t_max``) or a fixed ``KernelLaw`` (one row per pair at ``t_max``).
    """
    if isinstance(law, KernelModel):
        times = list(times) if times is not None else [t_max / 4, t_max / 2, t_max]
        laws = [(t, law.law(t)) for t in times]
    else:
        laws = [(t_max, as_law(law, t_max))]
    pairs = [(int(a), int(b)) for a, b in pairs]
    out = []
    for ti, (t, lw) in enumerate(laws):
        kind = default_distance(lw.space)
        hits = np.zeros(len(pairs))
        if any(a != b for a, b in pairs):
            xs = np.array([a for a, _ in pairs])
            ys = np.array([b for _, b in pairs])
            for K in sample_chunks(lw, samples, seed, (TAG_PI, 999, ti)):
                d = row_distances(K[:, xs, :], K[:, ys, :], kind, lw.space)
                hits += (d >= eps).sum(axis=0)
        for (a, b), h in zip(pairs, hits):
            p = 0.0 if a == b else h / samples
            out.append({"t": t, "x": a, "y": b, "eps": eps, "estimate": float(p),
                        "std_error": float(np.sqrt(p * (1 - p) / samples))})
    return out
