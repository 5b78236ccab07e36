"""Restriction to a dense subset and interpolation back.

``e`` restricts a kernel to its rows on an enumerated subset ``Z``; ``i``
rebuilds a kernel on the whole space from values on ``Z`` by following,
for each point ``x``, the sequence of enumerated points within
``eps_j / 2`` of ``x`` and taking the limit of the corresponding values
with a finite limit selector.  ``p = i o e`` is idempotent.

A grid function is an ``(|Z|, m)`` array of measures indexed by
enumeration position; batches are ``(S, |Z|, m)``.
"""
from __future__ import annotations

import numpy as np

from . import kernels as _k
from .core import KflowError, StateSpace, default_distance, distance_code, measure_distance, \
    row_distances

DEFAULT_JMAX = 6


class CoverageError(KflowError, ValueError):
    pass


def van_der_corput(k: int) -> float:
    """Base-2 radical inverse of ``k``."""
    x, denom = 0.0, 1.0
    while k:
        denom *= 2.0
        x += (k & 1) / denom
        k >>= 1
    return x


def vdc_enumeration(space: StateSpace, subset=None) -> list[int]:
    """Points of ``subset`` in van der Corput order.

    Candidates ``0, 1, vdc(1), vdc(2), ...`` are each sent to the nearest
    point not yet listed (ties to the lower coordinate).  Discrete spaces
    keep index order.
    """
    pts = sorted(set(range(space.m) if subset is None else (int(z) for z in subset)))
    if not pts or pts[0] < 0 or pts[-1] >= space.m:
        raise ValueError("subset must be a nonempty set of ambient points")
    if not space.is_grid:
        return pts
    coords = space.coords
    left = list(pts)
    order = []
    k = 0
    while left:
        c = 0.0 if k == 0 else 1.0 if k == 1 else van_der_corput(k - 1)
        k += 1
        best = min(left, key=lambda z: (abs(coords[z] - c), coords[z]))
        order.append(best)
        left.remove(best)
    return order


class DenseGrid:
    """An enumerated subset ``Z`` of a finite space with a strictly decreasing ``eps`` schedule.

    The default schedule is ``eps_J = 2 * minsep(Z)`` and
    ``eps_j = eps_J 2^(J - j)``.  Every schedule must cover the space at
    the finest level (``covering radius < eps_J / 2``) and satisfy
    ``eps_J / 2 <= minsep(Z)``, which makes the finest approximating point
    of each ``z_m`` equal to ``z_m`` itself.
    """

    def __init__(self, space: StateSpace, Z=None, eps=None, J_max: int = DEFAULT_JMAX,
                 tol: float = 0.0):
        self.space = space
        self.Z = np.array(vdc_enumeration(space, Z), dtype=np.int64)
        self.Z.setflags(write=False)
        rho = space.metric
        dz = rho[np.ix_(self.Z, self.Z)]
        self.minsep = float(dz[~np.eye(len(self.Z), dtype=bool)].min()) if len(self.Z) > 1 else 1.0
        self.covering_radius = float(rho[:, self.Z].min(axis=1).max())
        if eps is None:
            eps = 2.0 * self.minsep * 2.0 ** np.arange(J_max - 1, -1, -1)
        eps = np.array(eps, dtype=np.float64)
        if eps.ndim != 1 or eps.size < 1 or eps.min() <= 0:
            raise ValueError("eps schedule must be a nonempty positive sequence")
        if np.any(np.diff(eps) >= 0):
            raise ValueError("eps schedule must be strictly decreasing")
        if not self.covering_radius < eps[-1] / 2:
            raise CoverageError(
                f"covering radius {self.covering_radius:.4g} is not below eps_J/2 = {eps[-1] / 2:.4g}")
        if eps[-1] / 2 > self.minsep * (1 + 1e-12):
            raise CoverageError(
                f"eps_J/2 = {eps[-1] / 2:.4g} exceeds the separation {self.minsep:.4g} of Z")
        eps.setflags(write=False)
        self.eps = eps
        self.tol = float(tol)
        self.kind = default_distance(space)
        # idx[x, j]: enumeration position of the approximating point of x at level j + 1
        d = rho[:, self.Z]
        within = d[:, None, :] < eps[None, :, None] / 2
        self.idx = np.argmax(within, axis=2).astype(np.int64)
        self.idx.setflags(write=False)
        self._position = {int(z): k for k, z in enumerate(self.Z)}

    @property
    def J_max(self) -> int:
        return self.eps.size

    @property
    def size(self) -> int:
        return self.Z.size

    @property
    def is_full(self) -> bool:
        return self.size == self.space.m

    def position(self, z: int) -> int:
        """Enumeration position of an ambient point of ``Z``."""
        return self._position[int(z)]

    def with_eps(self, eps, tol: float | None = None) -> "DenseGrid":
        return DenseGrid(self.space, self.Z, eps, tol=self.tol if tol is None else tol)

    def to_dict(self) -> dict:
        return {"space": self.space.to_dict(), "Z": self.Z.tolist(), "eps": self.eps.tolist(),
                "tol": self.tol}


def approx_index(grid: DenseGrid, x: int, j: int) -> int:
    """Smallest enumeration position ``k`` with ``rho(x, z_k) < eps_j / 2`` (``j`` is 1-based)."""
    if not 1 <= j <= grid.J_max:
        raise ValueError(f"level {j} outside 1..{grid.J_max}")
    return int(grid.idx[x, j - 1])


def limit_select(seq, tol: float = 0.0, kind: str = "tv", space: StateSpace | None = None):
    """Earliest element whose every successor lies within ``tol``.

    Returns ``(measure, converged)``; without such an element the final
    measure is returned with ``converged=False``.
    """
    seq = [np.asarray(mu, dtype=np.float64) for mu in seq]
    if not seq:
        raise ValueError("empty sequence")
    for j in range(len(seq) - 1):
        if all(measure_distance(seq[j], seq[k], kind, space) <= tol for k in range(j + 1, len(seq))):
            return seq[j], True
    return seq[-1], len(seq) == 1


def _check_gf(grid: DenseGrid, mu) -> np.ndarray:
    mu = np.asarray(mu, dtype=np.float64)
    if mu.shape[-2:] != (grid.size, grid.space.m):
        raise ValueError(f"grid function must have trailing shape ({grid.size}, {grid.space.m}), got {mu.shape}")
    return mu


def interpolate_i(grid: DenseGrid, mu, x=None, tol: float | None = None, return_flags: bool = False):
    """``i(mu)``: the kernel (or its row at ``x``) rebuilt from a grid function.

    Accepts one grid function or a batch.  With ``tol = 0`` the selected
    value always equals the value at the finest approximating point, so
    that case is a gather.
    """
    mu = _check_gf(grid, mu)
    tol = grid.tol if tol is None else tol
    single = mu.ndim == 2
    batch = mu[None] if single else mu
    idx = grid.idx if x is None else grid.idx[[int(x)]]
    if tol == 0.0:
        out = batch[:, idx[:, -1], :]
        flags = None
        if return_flags:
            if idx.shape[1] > 1:
                flags = np.any(batch[:, idx[:, -2], :] != out, axis=2)
            else:
                flags = np.zeros(out.shape[:2], dtype=bool)
    else:
        coords = grid.space.coords if grid.space.is_grid else np.zeros(grid.space.m)
        out, flags = _k.select_rows(batch, idx, coords, float(tol), distance_code(grid.kind))
        flags = flags.astype(bool)
    if x is not None:
        out = out[:, 0]
        flags = None if flags is None else flags[:, 0]
    if single:
        out = out[0]
        flags = None if flags is None else flags[0]
    return (out, flags) if return_flags else out


def evaluate_e(grid: DenseGrid, K) -> np.ndarray:
    """``e(K)``: rows of ``K`` (or of a batch) at the enumerated points."""
    K = np.asarray(K, dtype=np.float64)
    return K[..., grid.Z, :]


def present_p(grid: DenseGrid, K, tol: float | None = None) -> np.ndarray:
    """``p(K) = i(e(K))``."""
    return interpolate_i(grid, evaluate_e(grid, K), tol=tol)


def identity_grid_function(grid: DenseGrid) -> np.ndarray:
    """``mu_0 = (delta_{z_m})``."""
    out = np.zeros((grid.size, grid.space.m))
    out[np.arange(grid.size), grid.Z] = 1.0
    return out


def compose_presented(grid: DenseGrid, mus, tol: float | None = None) -> np.ndarray:
    """``i(mu^1) i(mu^2) ... i(mu^n)``, left to right."""
    mus = list(mus)
    if not mus:
        raise ValueError("need at least one grid function")
    return _k.chain_product(np.stack([interpolate_i(grid, mu, tol=tol) for mu in mus]))


def calibrate_eps_schedule(law, space: StateSpace, J_max: int = DEFAULT_JMAX, Z=None,
                           samples: int = 4000, seed: int = 0, safety: float = 0.5,
                           horizon: float | None = None) -> np.ndarray:
    """A schedule with ``nu{d(K(x), K(y)) >= 2^-j} <= safety 2^-j`` whenever ``rho(x, y) < eps_j / 2``.

    The two-point modulus is estimated by Monte Carlo for every pair at
    every grid separation; ``eps_j`` is the largest admissible value,
    capped by the default schedule of the grid (so coverage and exactness
    hold) and made strictly decreasing.  Raises ``CoverageError`` when
    the calibrated finest level no longer covers the space.
    """
    from .consistency import as_law, sample_chunks
    from .stats import TAG_CALIBRATE

    law = as_law(law, horizon)
    base = DenseGrid(space, Z, J_max=J_max)
    rho = space.metric
    seps = np.unique(rho[np.triu_indices(space.m, 1)])
    kind = default_distance(space)
    levels = 2.0 ** -np.arange(1, J_max + 1)
    # worst[s, j]: max over pairs at separation seps[s] of the exceedance frequency at level j
    worst = np.zeros((seps.size, J_max))
    xs, ys = np.triu_indices(space.m, 1)
    sep_of_pair = np.searchsorted(seps, rho[xs, ys])
    hits = np.zeros((xs.size, J_max))
    for K in sample_chunks(law, samples, seed, (TAG_CALIBRATE, 0)):
        d = row_distances(K[:, xs, :], K[:, ys, :], kind, space)
        hits += (d[:, :, None] >= levels[None, None, :]).sum(axis=0)
    freq = hits / samples
    np.maximum.at(worst, sep_of_pair, freq)
    eps = np.empty(J_max)
    for j in range(J_max):
        ok = worst[:, j] <= safety * levels[j]
        bad = np.flatnonzero(~ok)
        # strict ``<`` in the approximating rule: eps/2 must not exceed the first bad separation
        limit = 2.0 * seps[bad[0]] if bad.size else np.inf
        eps[j] = min(limit, base.eps[j])
        if j:
            eps[j] = min(eps[j], eps[j - 1] * (1 - 1e-6))
    if not base.covering_radius < eps[-1] / 2:
        raise CoverageError(
            f"calibrated eps_{J_max}/2 = {eps[-1] / 2:.4g} does not exceed the covering radius "
            f"{base.covering_radius:.4g}; refine the grid or lower J_max")
    return eps
