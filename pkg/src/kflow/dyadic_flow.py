"""Dyadic towers of kernel draws and the flow kernels built from them.

Level ``N`` of a tower holds i.i.d. draws from ``nu_{2^-N}`` (stored as
grid functions, i.e. rows on the enumerated set ``Z``); every coarser cell
is ``e(i(w_{2l}) i(w_{2l+1}))``.  Dyadic-interval kernels are products of
interpolated cells at one level, and real-time flow kernels are obtained
from the dyadic approximations ``s_j = floor(s 2^{n_j}) / 2^{n_j}`` by a
row-wise limit selector followed by the presentation map.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import kernels as _k
from .consistency import CheckReport, as_law, sample_chunks
from .core import KflowError, StateSpace, default_distance, distance_code, identity_kernel, \
    row_distances
from .models import KernelLaw
from .presentation import DenseGrid, evaluate_e, interpolate_i, present_p
from .stats import (
    TAG_CALIBRATE, TAG_DIRECT, TAG_TOWER, _jsonable, independence_probe, parallel_map,
    substream, two_sample_moment_test,
)

CELL_BLOCK = 16
FALLBACK_STATE = 0
NORMALIZATION_TOL = 1e-9
MAX_DYADIC_LEVEL = 40


class WindowError(KflowError, ValueError):
    pass


def dyadic_level(t, max_level: int = MAX_DYADIC_LEVEL) -> int:
    """Smallest ``n >= 0`` with ``t`` in ``2^-n Z``; raises for non-dyadic ``t``.

    Every binary float is dyadic, so a decimal such as 0.3 would come out
    at level 54; levels beyond ``max_level`` are rejected as well.
    """
    f = Fraction(t)
    if f.denominator & (f.denominator - 1):
        raise WindowError(f"{t!r} is not a dyadic rational")
    n = f.denominator.bit_length() - 1
    if n > max_level:
        raise WindowError(f"{t!r} is not a dyadic rational of level <= {max_level}")
    return n


def _index(t: float, n: int) -> int:
    v = t * (1 << n)
    if v != math.floor(v):
        raise WindowError(f"{t!r} is not in D_{n}")
    return int(v)


@dataclass(frozen=True)
class ApproxSchedule:
    """Strictly increasing levels ``n_1 < n_2 < ... < n_J`` and the selector tolerance."""

    n: tuple
    tol: float = 0.0

    def __post_init__(self):
        n = tuple(int(v) for v in self.n)
        if not n or n[0] < 0 or any(b <= a for a, b in zip(n, n[1:])):
            raise ValueError(f"schedule {n} must be a nonempty strictly increasing sequence")
        object.__setattr__(self, "n", n)

    @property
    def J_max(self) -> int:
        return len(self.n)

    @property
    def budget(self) -> float:
        """Row-distance tolerance for real-time checks: ``2^(1 - J)``."""
        return 2.0 ** (1 - self.J_max)

    def approximations(self, t: float) -> list[float]:
        return [math.floor(t * (1 << nj)) / (1 << nj) for nj in self.n]

    def to_dict(self):
        return {"n": list(self.n), "tol": self.tol}


@dataclass
class DyadicTower:
    """Levels ``n0..N`` of cells over the window ``[T0, T1]``.

    ``levels[n]`` is an array of shape ``(cells, |Z|, m)``; cell ``k`` of
    level ``n`` covers ``[T0 + k 2^-n, T0 + (k + 1) 2^-n)``.
    """

    window: tuple
    N: int
    levels: dict
    grid: DenseGrid
    seed: int
    replica: int = 0
    model_id: dict = field(default_factory=dict)
    _kernels: dict = field(default_factory=dict, repr=False)
    _dk_cache: dict = field(default_factory=dict, repr=False)

    @property
    def n0(self) -> int:
        return min(self.levels)

    @property
    def m(self) -> int:
        return self.grid.space.m

    def cells(self, n: int) -> np.ndarray:
        return self.levels[n]

    def cell_kernels(self, n: int) -> np.ndarray:
        """``i(w^n_l)`` for every cell of level ``n`` (cached)."""
        if n not in self._kernels:
            self._kernels[n] = interpolate_i(self.grid, self.levels[n])
        return self._kernels[n]

    def offset(self, n: int) -> int:
        return _index(self.window[0], n)

    def check_window(self, *ts):
        T0, T1 = self.window
        for t in ts:
            if not T0 <= t <= T1:
                raise WindowError(f"time {t} outside window [{T0}, {T1}]")

    def to_json(self) -> str:
        return json.dumps({
            "schema": "kflow.tower/1", "window": list(self.window), "N": self.N,
            "seed": self.seed, "replica": self.replica, "model": _jsonable(self.model_id),
            "grid": self.grid.to_dict(),
            "levels": {str(n): v.tolist() for n, v in sorted(self.levels.items())},
        })

    @classmethod
    def from_json(cls, text: str) -> "DyadicTower":
        d = json.loads(text)
        g = d["grid"]
        space = StateSpace.grid(g["space"]["m"]) if g["space"]["grid"] else StateSpace.discrete(g["space"]["m"])
        grid = DenseGrid(space, g["Z"], g["eps"], tol=g["tol"])
        levels = {int(n): np.asarray(v, dtype=np.float64) for n, v in d["levels"].items()}
        return cls(tuple(d["window"]), d["N"], levels, grid, d["seed"], d["replica"], d["model"])

    def save_npz(self, path):
        header = json.loads(self.to_json())
        del header["levels"]
        np.savez_compressed(path, header=json.dumps(header),
                            **{f"level_{n}": v for n, v in self.levels.items()})

    @classmethod
    def load_npz(cls, path) -> "DyadicTower":
        with np.load(path) as z:
            header = json.loads(str(z["header"]))
            header["levels"] = {k.split("_", 1)[1]: z[k].tolist() for k in z.files if k.startswith("level_")}
        return cls.from_json(json.dumps(header))


def project_level(grid: DenseGrid, cells: np.ndarray) -> np.ndarray:
    """Pairwise projection ``w -> (e(i(w_{2l}) i(w_{2l+1})))_l``."""
    K = interpolate_i(grid, cells)
    return evaluate_e(grid, np.matmul(K[0::2], K[1::2]))


def _cell_law(law_family, N: int) -> KernelLaw:
    if isinstance(law_family, KernelLaw):
        return law_family
    return as_law(law_family, 2.0 ** -N)


def sample_tower(law_family, window=(0.0, 1.0), N: int = 8, seed: int = 0,
                 grid: DenseGrid | None = None, replica: int = 0) -> DyadicTower:
    """Sample level ``N`` and derive the coarser levels by projection.

    ``law_family`` is a model (cells use ``nu_{2^-N}``) or a fixed
    ``KernelLaw`` used as the finest-cell law.  Cells are drawn in blocks
    of ``CELL_BLOCK`` consecutive cells, each block from its own substream
    ``(seed, TAG_TOWER, replica, block)``.
    """
    T0, T1 = (float(w) for w in window)
    if not T0 < T1:
        raise WindowError("window must have T0 < T1")
    n0 = max(dyadic_level(T0), dyadic_level(T1))
    if n0 > N:
        raise WindowError(f"window endpoints are not in D_{N}")
    law = _cell_law(law_family, N)
    grid = grid or DenseGrid(law.space)
    count = _index(T1, N) - _index(T0, N)
    blocks = range(0, count, CELL_BLOCK)
    parts = parallel_map(
        lambda b: law.sample(min(CELL_BLOCK, count - b),
                             substream(seed, TAG_TOWER, replica, b // CELL_BLOCK)),
        blocks)
    levels = {N: evaluate_e(grid, np.concatenate(parts))}
    for n in range(N, n0, -1):
        levels[n - 1] = project_level(grid, levels[n])
    model_id = getattr(law_family, "to_dict", lambda: {"label": getattr(law_family, "label", "law")})()
    return DyadicTower((T0, T1), N, levels, grid, seed, replica, model_id)


def check_projection_consistency(tower: DyadicTower) -> CheckReport:
    """Bit-level comparison of every stored coarse level with the projection of the finer one."""
    bad = []
    for n in range(tower.N, tower.n0, -1):
        proj = project_level(tower.grid, tower.levels[n])
        if not np.array_equal(proj, tower.levels[n - 1]):
            bad.append({"level": n - 1, "max_dev": float(np.abs(proj - tower.levels[n - 1]).max())})
    return CheckReport("projection_consistency", float(len(bad)), 0.0, bad)


def dyadic_kernel(tower: DyadicTower, s: float, t: float, n: int) -> np.ndarray:
    """``i(w^n_{s 2^n}) ... i(w^n_{t 2^n - 1})``; the identity when ``s = t``."""
    if n < tower.n0 or n > tower.N:
        raise WindowError(f"level {n} outside {tower.n0}..{tower.N}")
    tower.check_window(s, t)
    if t < s:
        raise ValueError("need s <= t")
    a, b = _index(s, n) - tower.offset(n), _index(t, n) - tower.offset(n)
    if a == b:
        return identity_kernel(tower.m)
    return _k.chain_product(tower.cell_kernels(n)[a:b])


def dyadic_flow_kernel(tower: DyadicTower, s: float, t: float) -> np.ndarray:
    """``p`` applied to the dyadic kernel at the coarsest level containing ``s`` and ``t``."""
    key = (s, t)
    hit = tower._dk_cache.get(key)
    if hit is None:
        if s == t:
            hit = identity_kernel(tower.m)
        else:
            n = max(dyadic_level(s), dyadic_level(t), tower.n0)
            hit = present_p(tower.grid, dyadic_kernel(tower, s, t, n))
        tower._dk_cache[key] = hit
    return hit


def _approx_sequence(tower, s, t, schedule):
    if schedule.n[-1] > tower.N:
        raise ValueError(f"schedule level {schedule.n[-1]} exceeds tower depth {tower.N}")
    if schedule.n[0] < tower.n0:
        raise ValueError(f"schedule level {schedule.n[0]} is coarser than the window allows")
    return [dyadic_flow_kernel(tower, a, b)
            for a, b in zip(schedule.approximations(s), schedule.approximations(t))]


def flow_kernel(tower: DyadicTower, s: float, t: float, schedule: ApproxSchedule,
                return_info: bool = False):
    """``K_{s,t} = p(Phi((D K_{s_j, t_j})_j))``.

    The selector runs row by row over the approximation sequence; a
    selected row that is not a probability vector is replaced by
    ``delta_{FALLBACK_STATE}`` and counted.
    """
    tower.check_window(s, t)
    if t < s:
        raise ValueError("need s <= t")
    info = {"fallbacks": 0, "unconverged_rows": 0}
    if s == t:
        K = identity_kernel(tower.m)
        return (K, info) if return_info else K
    seq = np.stack(_approx_sequence(tower, s, t, schedule), axis=1)  # (m, J, m)
    J = seq.shape[1]
    if schedule.tol == 0.0:
        rows = seq[:, -1, :].copy()
        flags = np.any(seq[:, -2, :] != rows, axis=1) if J > 1 else np.zeros(tower.m, bool)
    else:
        space = tower.grid.space
        coords = space.coords if space.is_grid else np.zeros(space.m)
        out, fl = _k.select_rows(seq, np.arange(J, dtype=np.int64)[None, :], coords,
                                 float(schedule.tol), distance_code(default_distance(space)))
        rows, flags = out[:, 0, :], fl[:, 0].astype(bool)
    broken = (np.abs(rows.sum(axis=1) - 1.0) > NORMALIZATION_TOL) | (rows.min(axis=1) < -NORMALIZATION_TOL)
    if broken.any():
        rows[broken] = 0.0
        rows[broken, FALLBACK_STATE] = 1.0
    info["fallbacks"] = int(broken.sum())
    info["unconverged_rows"] = int(flags.sum())
    K = present_p(tower.grid, rows)
    return (K, info) if return_info else K


def check_evolution(tower: DyadicTower, r: float, s: float, t: float, xs=None, tol: float | None = None,
                    schedule: ApproxSchedule | None = None, n: int | None = None) -> CheckReport:
    """``K_{r,s} K_{s,t} = K_{r,t}`` on rows ``xs``.

    Without a schedule the times must be dyadic and the identity is
    checked for raw dyadic kernels at level ``n`` (default: the coarsest
    common level), entrywise to ``tol = 1e-12``.  With a schedule the
    real-time flow kernels are compared by row distance against
    ``schedule.budget``.
    """
    if not r <= s <= t:
        raise ValueError("need r <= s <= t")
    xs = np.arange(tower.m) if xs is None else np.asarray(xs, dtype=np.int64)
    if schedule is None:
        level = n if n is not None else max(dyadic_level(r), dyadic_level(s), dyadic_level(t), tower.n0)
        lhs = dyadic_kernel(tower, r, s, level) @ dyadic_kernel(tower, s, t, level)
        rhs = dyadic_kernel(tower, r, t, level)
        dev = np.abs(lhs[xs] - rhs[xs])
        tol = 1e-12 if tol is None else tol
        return CheckReport("evolution(dyadic)", float(dev.max()), tol,
                           [{"r": r, "s": s, "t": t, "level": level}])
    lhs = flow_kernel(tower, r, s, schedule) @ flow_kernel(tower, s, t, schedule)
    rhs = flow_kernel(tower, r, t, schedule)
    space = tower.grid.space
    d = row_distances(lhs[xs], rhs[xs], default_distance(space), space)
    tol = schedule.budget if tol is None else tol
    return CheckReport("evolution(real)", float(d.max()), tol,
                       [{"r": r, "s": s, "t": t, "worst_x": int(xs[np.argmax(d)])}])


@dataclass
class TowerEnsemble:
    """Independent towers from one master seed: replica ``r`` uses streams ``(seed, TAG_TOWER, r, ...)``."""

    law_family: object
    window: tuple = (0.0, 1.0)
    N: int = 8
    seed: int = 0
    grid: DenseGrid | None = None

    def tower(self, replica: int) -> DyadicTower:
        return sample_tower(self.law_family, self.window, self.N, self.seed, self.grid, replica)

    def towers(self, count: int, start: int = 0):
        for r in range(start, start + count):
            yield self.tower(r)


def entry_probes(m: int, points=None, order: int = 2) -> list[tuple]:
    """Products of at most ``order`` kernel entries ``K(x, y)``, ``y < m - 1``.

    The last column is dropped since rows sum to one.  Returns a list of
    tuples of ``(x, y)`` pairs.
    """
    from itertools import combinations_with_replacement

    ys = range(max(m - 1, 1))
    xs = range(m) if points is None else points
    entries = [(x, y) for x in xs for y in ys]
    out = []
    for k in range(1, order + 1):
        out.extend(combinations_with_replacement(entries, k))
    return out


def probe_values(kernels: np.ndarray, probes) -> np.ndarray:
    """(S, probes) matrix of the entry-product probes."""
    kernels = np.asarray(kernels)
    out = np.ones((kernels.shape[0], len(probes)))
    for p, prod in enumerate(probes):
        for x, y in prod:
            out[:, p] *= kernels[:, x, y]
    return out


def _probe_labels(probes):
    return ["*".join(f"K({x},{y})" for x, y in p) for p in probes]


def check_projection_law(ensemble: TowerEnsemble, n: int, replicas: int, probes=None,
                         band: float = 3.0, reference=None, cell: int = 0) -> CheckReport:
    """Law of projected level-``n - 1`` cells against direct ``nu_{2^-(n-1)}`` draws.

    ``reference`` is the model giving the direct draws (default: the
    ensemble's law family); the direct kernels pass through ``p`` so both
    samples live on presented kernels.
    """
    if not ensemble.N >= n >= 1:
        raise ValueError(f"level {n} outside 1..{ensemble.N}")
    towers = list(ensemble.towers(replicas))
    grid = towers[0].grid
    m = grid.space.m
    probes = entry_probes(m) if probes is None else probes
    projected = np.stack([t.cell_kernels(n - 1)[cell] for t in towers])
    ref = ensemble.law_family if reference is None else reference
    law = as_law(ref, 2.0 ** -(n - 1))
    direct = present_p(grid, np.concatenate(sample_chunks(law, replicas, ensemble.seed, (TAG_DIRECT, n))))
    res = two_sample_moment_test(probe_values(projected, probes), probe_values(direct, probes),
                                 _probe_labels(probes), band=band, seed=ensemble.seed,
                                 name="projection_law")
    return CheckReport("projection_law", res.z_score, band,
                       [{"level": n - 1, "replicas": replicas, **res.details}])


def _overlap(a, b):
    return max(a[0], b[0]) < min(a[1], b[1])


def interval_statistics(ensemble: TowerEnsemble, intervals, replicas: int, probes) -> np.ndarray:
    """(replicas, intervals, probes) array of probe values of ``D K_{a,b}`` per tower."""
    out = np.empty((replicas, len(intervals), len(probes)))
    for r, tower in enumerate(ensemble.towers(replicas)):
        K = np.stack([dyadic_flow_kernel(tower, a, b) for a, b in intervals])
        out[r] = probe_values(K, probes)
    return out


def check_increment_independence(ensemble: TowerEnsemble, intervals, replicas: int = 10_000,
                                 probes=None, band: float = 3.0,
                                 allow_overlap: bool = False) -> CheckReport:
    """Correlations of first-order probes ``K(x, y)`` across pairs of intervals.

    Overlapping intervals are rejected unless ``allow_overlap`` is set
    (used for negative controls).
    """
    intervals = [(float(a), float(b)) for a, b in intervals]
    if not allow_overlap:
        for i in range(len(intervals)):
            for j in range(i + 1, len(intervals)):
                if _overlap(intervals[i], intervals[j]):
                    raise ValueError(f"intervals {intervals[i]} and {intervals[j]} overlap")
    m = ensemble.grid.space.m if ensemble.grid else _cell_law(ensemble.law_family, ensemble.N).space.m
    probes = entry_probes(m, order=1) if probes is None else probes
    stats = interval_statistics(ensemble, intervals, replicas, probes)
    worst, rows = 0.0, []
    for i in range(len(intervals)):
        for j in range(i + 1, len(intervals)):
            for p in range(len(probes)):
                for q in range(len(probes)):
                    res = independence_probe(stats[:, i, p], stats[:, j, q], band)
                    rows.append({"intervals": [intervals[i], intervals[j]], "probe_a": p, "probe_b": q,
                                 "correlation": res.statistic, "z": res.z_score})
                    worst = max(worst, res.z_score)
    rows.sort(key=lambda d: -d["z"])
    return CheckReport("increment_independence", worst, band, rows[:8])


def check_stationarity(ensemble: TowerEnsemble, tau: float, starts, replicas: int = 10_000,
                       probes=None, band: float = 3.0) -> CheckReport:
    """Law of ``D K_{s, s + tau}`` compared across start times (disjoint intervals)."""
    intervals = [(float(s), float(s) + tau) for s in starts]
    for i in range(len(intervals) - 1):
        if _overlap(intervals[i], intervals[i + 1]):
            raise ValueError("stationarity windows must be disjoint so samples are independent")
    m = ensemble.grid.space.m if ensemble.grid else _cell_law(ensemble.law_family, ensemble.N).space.m
    probes = entry_probes(m) if probes is None else probes
    stats = interval_statistics(ensemble, intervals, replicas, probes)
    worst, rows = 0.0, []
    for i in range(1, len(intervals)):
        res = two_sample_moment_test(stats[:, 0], stats[:, i], _probe_labels(probes), band=band)
        rows.append({"s0": intervals[0][0], "s": intervals[i][0], "z": res.z_score,
                     "worst_probe": res.details["worst_probe"]})
        worst = max(worst, res.z_score)
    return CheckReport("stationarity", worst, band, rows)


def convergence_diagnostic(tower: DyadicTower, s: float, t: float, x: int,
                           schedule: ApproxSchedule) -> list[dict]:
    """Per ``j``: ``d(D K_{s_j,t_j}(x), D K_{s_{j+1},t_{j+1}}(x))``."""
    seq = _approx_sequence(tower, s, t, schedule)
    space = tower.grid.space
    kind = default_distance(space)
    return [{"j": j + 1, "n_j": schedule.n[j],
             "distance": float(row_distances(seq[j][x], seq[j + 1][x], kind, space))}
            for j in range(len(seq) - 1)]


def convergence_exceedance(ensemble: TowerEnsemble, s: float, t: float, x: int,
                           schedule: ApproxSchedule, replicas: int = 1000,
                           band: float = 3.0) -> CheckReport:
    """Ensemble frequency of ``d_j >= 2^-j`` against ``2^-j + band SE`` per ``j``."""
    J = schedule.J_max - 1
    hits = np.zeros(J)
    for tower in ensemble.towers(replicas):
        d = np.array([r["distance"] for r in convergence_diagnostic(tower, s, t, x, schedule)])
        hits += d >= 2.0 ** -np.arange(1, J + 1)
    freq = hits / replicas
    se = np.sqrt(freq * (1 - freq) / replicas)
    limit = 2.0 ** -np.arange(1, J + 1) + band * se
    rows = [{"j": j + 1, "frequency": float(freq[j]), "std_error": float(se[j]),
             "bound": float(2.0 ** -(j + 1)), "limit": float(limit[j])} for j in range(J)]
    # error is the largest excess over the limit, so the check passes iff there is none
    excess = max(0.0, float(np.max(freq - limit))) if J else 0.0
    return CheckReport("convergence_exceedance", excess, 0.0, rows)


def approximation_exceedance(law_family, n: int, tau: float, level: float, samples: int, seed: int,
                             pattern: str) -> float:
    """Max over states of the frequency of ``d >= level`` for a coupling pattern.

    With ``M ~ nu_tau`` and ``A, B ~ nu_delta``, ``delta = 2^-n``:
    ``"expand"`` compares ``M(x)`` with ``(AMB)(x)`` and ``"shift"``
    compares ``(AM)(x)`` with ``(MB)(x)``.
    """
    delta = 2.0 ** -n
    lm, ld = as_law(law_family, tau), as_law(law_family, delta)
    space = lm.space
    kind = default_distance(space)
    key = (TAG_CALIBRATE, 1, n, 0 if pattern == "expand" else 1)
    M = np.concatenate(sample_chunks(lm, samples, seed, key + (0,)))
    A = np.concatenate(sample_chunks(ld, samples, seed, key + (1,)))
    B = np.concatenate(sample_chunks(ld, samples, seed, key + (2,)))
    if pattern == "expand":
        P, Q = M, np.matmul(np.matmul(A, M), B)
    elif pattern == "shift":
        P, Q = np.matmul(A, M), np.matmul(M, B)
    else:
        raise ValueError(f"unknown pattern {pattern!r}")
    d = row_distances(P, Q, kind, space)
    return float((d >= level).mean(axis=0).max())


def calibrate_schedule(law_family, J_max: int = 6, n_max: int = 12, n_min: int = 0, tau: float = 1.0,
                       samples: int = 4000, seed: int = 0, safety: float = 0.5) -> ApproxSchedule:
    """Greedy ``n_j``: smallest ``n > n_{j-1}`` whose exceedance of ``2^-j`` is at most ``safety 2^-j``.

    Raises ``ValueError`` when no level up to ``n_max`` qualifies.
    """
    levels, prev = [], n_min - 1
    for j in range(1, J_max + 1):
        target = safety * 2.0 ** -j
        for n in range(max(prev + 1, n_min), n_max + 1):
            worst = max(approximation_exceedance(law_family, n, tau, 2.0 ** -j, samples, seed, p)
                        for p in ("expand", "shift"))
            if worst <= target:
                levels.append(n)
                prev = n
                break
        else:
            raise ValueError(f"no level <= {n_max} meets the level-{j} bound")
    return ApproxSchedule(tuple(levels))
