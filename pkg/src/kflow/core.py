"""Finite state spaces, kernels, n-point lifting and measure distances.

Conventions
-----------
A kernel on a space with ``m`` points is a row-stochastic ``(m, m)``
float array; row ``x`` is the measure ``K(x, .)``.  Points of ``M^n`` are
encoded lexicographically with the first coordinate most significant, so
``(x_1, ..., x_n) -> sum_i x_i * m**(n - i)``.  Injections are tuples of
1-based coordinate labels, ``sigma = (sigma(1), ..., sigma(k))``.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels as _k

MEASURE_TOL = 1e-12
TENSOR_ROW_TOL = 1e-10
CLAMP_TOL = 1e-14
COMPOSE_DRIFT_TOL = 1e-9
DEFAULT_CAPACITY = 4096


class KflowError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(KflowError, ValueError):
    pass


class CapacityError(KflowError):
    """Raised when ``m**n`` exceeds the configured capacity."""


class NumericError(KflowError, ArithmeticError):
    """Row sums or signs drifted beyond floating-point noise."""


_capacity = DEFAULT_CAPACITY


def set_capacity(cap: int) -> int:
    """Set the global ``m**n`` cap for lifted objects; returns the old value."""
    global _capacity
    old, _capacity = _capacity, int(cap)
    return old


def get_capacity() -> int:
    return _capacity


def check_capacity(m: int, n: int, cap: int | None = None) -> int:
    cap = _capacity if cap is None else cap
    size = m ** n
    if size > cap:
        raise CapacityError(f"m**n = {m}**{n} = {size} exceeds capacity {cap}")
    return size


@dataclass(frozen=True)
class StateSpace:
    """A finite metric space ``{0, ..., m-1}``.

    ``coords`` is set for grid spaces on [0, 1] (point ``k`` sits at
    ``k / (m - 1)``) and the metric is then ``|x - y|``; otherwise the
    metric is discrete.
    """

    m: int
    coords: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("state space needs at least one point")
        if self.coords is not None:
            c = np.asarray(self.coords, dtype=np.float64)
            if c.shape != (self.m,) or np.any(np.diff(c) <= 0):
                raise ValueError("coords must be strictly increasing with length m")
            c.setflags(write=False)
            object.__setattr__(self, "coords", c)

    @classmethod
    def discrete(cls, m: int) -> "StateSpace":
        return cls(m)

    @classmethod
    def grid(cls, m: int) -> "StateSpace":
        if m == 1:
            return cls(1, np.zeros(1))
        return cls(m, np.linspace(0.0, 1.0, m))

    @property
    def is_grid(self) -> bool:
        return self.coords is not None

    @property
    def metric(self) -> np.ndarray:
        if self.coords is not None:
            return np.abs(self.coords[:, None] - self.coords[None, :])
        return 1.0 - np.eye(self.m)

    def distance(self, x: int, y: int) -> float:
        if self.coords is not None:
            return float(abs(self.coords[x] - self.coords[y]))
        return 0.0 if x == y else 1.0

    def __eq__(self, other):
        if not isinstance(other, StateSpace) or other.m != self.m:
            return False
        if (self.coords is None) != (other.coords is None):
            return False
        return self.coords is None or bool(np.array_equal(self.coords, other.coords))

    def __hash__(self):
        return hash((self.m, self.coords is None))

    def to_dict(self) -> dict:
        return {"m": self.m, "grid": self.is_grid}


# ---------------------------------------------------------------------------
# validation

def _clamp(a: np.ndarray, what: str) -> np.ndarray:
    lo = a.min() if a.size else 0.0
    if lo < -CLAMP_TOL:
        raise NumericError(f"{what} has negative entry {lo:.3e}")
    if lo < 0:
        a = np.where(a < 0, 0.0, a)
    return a


def as_measure(weights, m: int | None = None) -> np.ndarray:
    mu = np.array(weights, dtype=np.float64)
    if mu.ndim != 1 or (m is not None and mu.shape[0] != m):
        raise DimensionError(f"expected a probability vector of length {m}, got shape {mu.shape}")
    mu = _clamp(mu, "measure")
    if abs(mu.sum() - 1.0) > MEASURE_TOL:
        raise NumericError(f"measure sums to {mu.sum():.15g}")
    return mu


def as_kernel(rows, m: int | None = None, tol: float = MEASURE_TOL) -> np.ndarray:
    K = np.array(rows, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] != K.shape[1] or (m is not None and K.shape[0] != m):
        raise DimensionError(f"expected an ({m}, {m}) kernel, got shape {K.shape}")
    K = _clamp(K, "kernel")
    drift = np.abs(K.sum(axis=1) - 1.0).max()
    if drift > tol:
        raise NumericError(f"kernel row sums drift by {drift:.3e}")
    return K


def is_kernel(K, tol: float = MEASURE_TOL) -> bool:
    try:
        as_kernel(K, tol=tol)
    except KflowError:
        return False
    return True


def identity_kernel(m: int) -> np.ndarray:
    return np.eye(m)


def delta_kernel(phi: Sequence[int], m: int | None = None) -> np.ndarray:
    """Kernel ``x -> delta_{phi(x)}`` of a map given as an index array."""
    phi = np.asarray(phi, dtype=np.int64)
    m = phi.shape[0] if m is None else m
    K = np.zeros((phi.shape[0], m))
    K[np.arange(phi.shape[0]), phi] = 1.0
    return K


# ---------------------------------------------------------------------------
# kernels and measures

def kernel_compose(K1, K2) -> np.ndarray:
    """Kernel product ``(K1 K2)(x) = sum_y K1(x, y) K2(y, .)``."""
    K1 = np.asarray(K1, dtype=np.float64)
    K2 = np.asarray(K2, dtype=np.float64)
    if K1.ndim != 2 or K1.shape != K2.shape or K1.shape[0] != K1.shape[1]:
        raise DimensionError(f"cannot compose kernels of shapes {K1.shape} and {K2.shape}")
    out = K1 @ K2
    drift = np.abs(out.sum(axis=1) - 1.0).max()
    if drift > COMPOSE_DRIFT_TOL:
        raise NumericError(f"composed kernel row sums drift by {drift:.3e}")
    return _clamp(out, "composed kernel")


def measure_push(mu, K) -> np.ndarray:
    """``(mu K)(B) = sum_x mu(x) K(x, B)``."""
    mu = np.asarray(mu, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 2 or mu.shape != (K.shape[0],):
        raise DimensionError(f"measure of shape {mu.shape} does not match kernel {K.shape}")
    return mu @ K


def apply_function(K, f) -> np.ndarray:
    """``Kf(x) = sum_y K(x, y) f(y)``."""
    return np.asarray(K, dtype=np.float64) @ np.asarray(f, dtype=np.float64)


def kron_power(A, n: int) -> np.ndarray:
    out = np.asarray(A, dtype=np.float64)
    for _ in range(n - 1):
        out = np.kron(out, A)
    return out


@dataclass(frozen=True)
class TransitionTensor:
    """An n-point transition operator stored as an ``(m**n, m**n)`` matrix."""

    m: int
    order: int
    entries: np.ndarray = field(compare=False, repr=False)

    def __post_init__(self):
        size = self.m ** self.order
        e = np.array(self.entries, dtype=np.float64)
        if e.shape != (size, size):
            raise DimensionError(f"order-{self.order} tensor on m={self.m} needs shape ({size}, {size})")
        e = _clamp(e, "tensor")
        drift = np.abs(e.sum(axis=1) - 1.0).max()
        if drift > TENSOR_ROW_TOL:
            raise NumericError(f"tensor rows drift by {drift:.3e}")
        e.setflags(write=False)
        object.__setattr__(self, "entries", e)

    @property
    def size(self) -> int:
        return self.m ** self.order

    def row(self, x) -> np.ndarray:
        return self.entries[encode(x, self.m)]

    def to_json(self) -> str:
        return json.dumps({"m": self.m, "order": self.order,
                           "entries": self.entries.ravel().tolist()})

    @classmethod
    def from_json(cls, text: str) -> "TransitionTensor":
        d = json.loads(text)
        size = d["m"] ** d["order"]
        return cls(d["m"], d["order"], np.asarray(d["entries"], dtype=np.float64).reshape(size, size))

    def to_csv(self) -> str:
        return matrix_to_csv(self.entries)


def identity_tensor(m: int, n: int) -> TransitionTensor:
    return TransitionTensor(m, n, np.eye(check_capacity(m, n)))


def encode(x, m: int) -> int:
    """Lexicographic index of a point of ``M^n`` (first coordinate most significant)."""
    idx = 0
    for xi in x:
        xi = int(xi)
        if not 0 <= xi < m:
            raise DimensionError(f"coordinate {xi} out of range for m={m}")
        idx = idx * m + xi
    return idx


def decode(index: int, m: int, n: int) -> tuple:
    out = []
    for _ in range(n):
        index, r = divmod(index, m)
        out.append(r)
    return tuple(reversed(out))


def all_points(m: int, n: int):
    return itertools.product(range(m), repeat=n)


def tensor_of_kernel(K, n: int, cap: int | None = None) -> TransitionTensor:
    """``(x, y) -> prod_i K(x_i, y_i)``: the n-fold Kronecker power of ``K``."""
    K = as_kernel(K)
    m = K.shape[0]
    if n < 1:
        raise ValueError("order must be >= 1")
    check_capacity(m, n, cap)
    return TransitionTensor(m, n, kron_power(K, n))


# ---------------------------------------------------------------------------
# injections

@dataclass(frozen=True)
class Injection:
    """An injection ``{1..k} -> {1..n}`` stored as ``(sigma(1), ..., sigma(k))``."""

    n: int
    values: tuple

    def __post_init__(self):
        vals = tuple(int(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        if not 1 <= len(vals) <= self.n:
            raise ValueError(f"need 1 <= k <= n, got k={len(vals)}, n={self.n}")
        if len(set(vals)) != len(vals):
            raise ValueError(f"{vals} is not injective")
        if min(vals) < 1 or max(vals) > self.n:
            raise ValueError(f"{vals} has values outside 1..{self.n}")

    @property
    def k(self) -> int:
        return len(self.values)

    @classmethod
    def identity(cls, n: int) -> "Injection":
        return cls(n, tuple(range(1, n + 1)))


def all_injections(k: int, n: int):
    for vals in itertools.permutations(range(1, n + 1), k):
        yield Injection(n, vals)


def injection_apply(sigma: Injection, x) -> tuple:
    """``pi_sigma x = (x_{sigma(1)}, ..., x_{sigma(k)})``."""
    x = tuple(x)
    if len(x) != sigma.n:
        raise DimensionError(f"point has {len(x)} coordinates, injection expects {sigma.n}")
    return tuple(x[v - 1] for v in sigma.values)


def pushforward_matrix(T: TransitionTensor, sigma: Injection) -> np.ndarray:
    """All rows of ``T`` pushed forward by ``pi_sigma`` at once, shape (m**n, m**k)."""
    if sigma.n != T.order:
        raise DimensionError(f"injection into {sigma.n} coordinates, tensor has order {T.order}")
    m, n = T.m, T.order
    full = T.entries.reshape((T.size,) + (m,) * n)
    axes = [v for v in sigma.values]  # axis v of `full` is coordinate v
    dropped = tuple(a for a in range(1, n + 1) if a not in axes)
    marg = full.sum(axis=dropped) if dropped else full
    # remaining axes keep ascending coordinate order; reorder to sigma's order
    remaining = sorted(axes)
    perm = [0] + [1 + remaining.index(v) for v in sigma.values]
    return np.transpose(marg, perm).reshape(T.size, m ** sigma.k)


def tensor_pushforward(T: TransitionTensor, x, sigma: Injection) -> np.ndarray:
    """``P^(n)(x) o pi_sigma^{-1}``: row ``x`` marginalised onto ``sigma``'s coordinates."""
    if len(tuple(x)) != T.order:
        raise DimensionError(f"point has {len(tuple(x))} coordinates, tensor has order {T.order}")
    return pushforward_matrix(T, sigma)[encode(x, T.m)]


# ---------------------------------------------------------------------------
# distances

def measure_distance(mu, nu, kind: str = "tv", space: StateSpace | None = None) -> float:
    """Total variation or 1-Wasserstein distance between two measures.

    ``w1`` integrates ``|F_mu - F_nu|`` over the coordinate embedding of
    ``space`` and is undefined on discrete spaces.
    """
    mu = np.asarray(mu, dtype=np.float64)
    nu = np.asarray(nu, dtype=np.float64)
    if mu.shape != nu.shape or mu.ndim != 1:
        raise DimensionError(f"measures of shapes {mu.shape} and {nu.shape}")
    if kind == "tv":
        return float(0.5 * np.abs(mu - nu).sum())
    if kind == "w1":
        if space is None or not space.is_grid:
            raise ValueError("w1 needs a state space with coordinates")
        return float(np.sum(np.abs(np.cumsum(mu - nu)[:-1]) * np.diff(space.coords)))
    raise ValueError(f"unknown distance kind {kind!r}")


def row_distances(A, B, kind: str = "tv", space: StateSpace | None = None) -> np.ndarray:
    """Distances between corresponding rows of two (..., m) arrays."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if kind == "tv":
        return 0.5 * np.abs(A - B).sum(axis=-1)
    if kind == "w1":
        if space is None or not space.is_grid:
            raise ValueError("w1 needs a state space with coordinates")
        return (np.abs(np.cumsum(A - B, axis=-1)[..., :-1]) * np.diff(space.coords)).sum(axis=-1)
    raise ValueError(f"unknown distance kind {kind!r}")


def default_distance(space: StateSpace) -> str:
    return "w1" if space.is_grid else "tv"


def distance_code(kind: str) -> int:
    return {"tv": _k.TV, "w1": _k.W1}[kind]


# ---------------------------------------------------------------------------
# serialization

def kernel_to_json(K) -> str:
    K = np.asarray(K, dtype=np.float64)
    return json.dumps({"m": K.shape[0], "order": 1, "entries": K.ravel().tolist()})


def kernel_from_json(text: str) -> np.ndarray:
    d = json.loads(text)
    if d.get("order", 1) != 1:
        raise ValueError("not a kernel (order != 1)")
    return as_kernel(np.asarray(d["entries"], dtype=np.float64).reshape(d["m"], d["m"]))


def matrix_to_csv(A) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in np.asarray(A):
        w.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def matrix_from_csv(text: str) -> np.ndarray:
    rows = [list(map(float, r)) for r in csv.reader(io.StringIO(text)) if r]
    return np.asarray(rows, dtype=np.float64)
