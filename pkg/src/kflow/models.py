"""Concrete convolution semigroups of kernel laws.

Every model samples i.i.d. batches from ``nu_t`` with ``sample_batch``;
the Poisson and deterministic models also provide exact n-point moment
tensors.  Products follow the flow convention ``K_{r,t} = K_{r,s} K_{s,t}``:
earlier factors sit on the left.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import linalg

from . import kernels as _k
from .core import (
    StateSpace, TransitionTensor, as_kernel, check_capacity, kron_power,
)
from .stats import TAG_COALESCE, TAG_TANAKA, mean_with_se, substream

SERIES_TAIL = 1e-17
ORACLE_AGREEMENT = 1e-11


class KernelLaw:
    """A probability law on kernels: batch sampler plus optional moment oracle."""

    def __init__(self, space: StateSpace, sampler: Callable, oracle: Callable | None = None,
                 label: str = "law"):
        self.space = space
        self._sampler = sampler
        self._oracle = oracle
        self.label = label

    def sample(self, size: int, rng: np.random.Generator) -> np.ndarray:
        return self._sampler(int(size), rng)

    def sample_kernel(self, rng: np.random.Generator) -> np.ndarray:
        return self.sample(1, rng)[0]

    @property
    def has_oracle(self) -> bool:
        return self._oracle is not None

    def exact_moment_tensor(self, n: int) -> TransitionTensor:
        if self._oracle is None:
            raise NotImplementedError(f"{self.label} has no exact moment oracle")
        return self._oracle(n)

    @classmethod
    def delta(cls, K, space: StateSpace | None = None, label: str = "delta") -> "KernelLaw":
        """The point mass at a fixed kernel."""
        K = as_kernel(K)
        space = space or StateSpace.discrete(K.shape[0])

        def sampler(size, rng):
            return np.broadcast_to(K, (size,) + K.shape).copy()

        def oracle(n):
            check_capacity(K.shape[0], n)
            return TransitionTensor(K.shape[0], n, kron_power(K, n))

        return cls(space, sampler, oracle, label)


class KernelModel:
    """Base class: a family ``t -> nu_t`` with a batch sampler."""

    kind = "model"
    discrete_time = False

    space: StateSpace

    @property
    def m(self) -> int:
        return self.space.m

    def sample_batch(self, t: float, size: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def sample_kernel(self, t: float, rng: np.random.Generator) -> np.ndarray:
        return self.sample_batch(t, 1, rng)[0]

    @property
    def has_oracle(self) -> bool:
        return False

    def exact_moment_tensor(self, n: int, t: float, method: str = "expm") -> TransitionTensor:
        raise NotImplementedError(f"{self.kind} has no exact moment oracle")

    def law(self, t: float) -> KernelLaw:
        oracle = (lambda n: self.exact_moment_tensor(n, t)) if self.has_oracle else None
        return KernelLaw(self.space, lambda size, rng: self.sample_batch(t, size, rng),
                         oracle, f"{self.kind}(t={t:g})")

    def _check_time(self, t):
        if t < 0:
            raise ValueError(f"negative duration {t}")

    def to_dict(self) -> dict:
        return {"kind": self.kind}


def _poisson_series(A: np.ndarray, mean: float) -> np.ndarray:
    """``sum_k Poisson(k; mean) A^k`` truncated once the tail mass is negligible."""
    size = A.shape[0]
    out = np.zeros((size, size))
    term = np.eye(size)
    k = 0
    while True:
        w = math.exp(k * math.log(mean) - mean - math.lgamma(k + 1)) if mean > 0 else float(k == 0)
        out += w * term
        if k > mean and w < SERIES_TAIL:
            return out
        term = term @ A
        k += 1


class DeterministicModel(KernelModel):
    """``nu_t = delta_{exp(tQ)}`` for a Markov generator ``Q``."""

    kind = "deterministic"

    def __init__(self, Q, space: StateSpace | None = None):
        Q = np.array(Q, dtype=np.float64)
        if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
            raise ValueError("generator must be square")
        off = Q - np.diag(np.diag(Q))
        if off.min() < 0 or np.abs(Q.sum(axis=1)).max() > 1e-12:
            raise ValueError("generator needs zero row sums and nonnegative off-diagonal entries")
        self.Q = Q
        self.space = space or StateSpace.discrete(Q.shape[0])

    def semigroup(self, t: float) -> np.ndarray:
        self._check_time(t)
        P = linalg.expm(t * self.Q)
        return np.clip(P, 0.0, None)

    def semigroup_series(self, t: float) -> np.ndarray:
        """``exp(tQ)`` by uniformisation: Poisson-weighted powers of ``I + Q/q``."""
        q = max(float(-np.diag(self.Q).min()), 1e-300)
        return _poisson_series(np.eye(self.m) + self.Q / q, q * t)

    def sample_batch(self, t, size, rng):
        P = self.semigroup(t)
        return np.broadcast_to(P, (size,) + P.shape).copy()

    @property
    def has_oracle(self):
        return True

    def exact_moment_tensor(self, n, t, method="expm"):
        check_capacity(self.m, n)
        P = self.semigroup(t) if method == "expm" else self.semigroup_series(t)
        return TransitionTensor(self.m, n, kron_power(P, n))

    def to_dict(self):
        return {"kind": self.kind, "Q": self.Q.tolist(), "grid": self.space.is_grid}


class PoissonProductModel(KernelModel):
    """Products of i.i.d. jump kernels at the times of a rate-``rate`` Poisson process."""

    kind = "poisson"

    def __init__(self, rate: float, jumps, probs=None, space: StateSpace | None = None):
        if rate <= 0:
            raise ValueError("rate must be positive")
        jumps = np.array(jumps, dtype=np.float64)
        if jumps.ndim != 3:
            raise ValueError("jumps must have shape (k, m, m)")
        for J in jumps:
            as_kernel(J)
        probs = np.full(len(jumps), 1.0 / len(jumps)) if probs is None else np.array(probs, dtype=np.float64)
        if probs.min() < 0 or abs(probs.sum() - 1.0) > 1e-12 or probs.shape != (len(jumps),):
            raise ValueError("jump probabilities must be a probability vector")
        self.rate = float(rate)
        self.jumps = jumps
        self.probs = probs
        self.space = space or StateSpace.discrete(jumps.shape[1])

    def sample_batch(self, t, size, rng):
        self._check_time(t)
        counts = rng.poisson(self.rate * t, size=size)
        choices = rng.choice(len(self.jumps), size=int(counts.sum()), p=self.probs)
        return _k.poisson_products(counts, choices, self.jumps)

    @property
    def has_oracle(self):
        return True

    def mean_jump_tensor(self, n: int) -> np.ndarray:
        """``E_n = sum_i p_i J_i^{(x)n}``."""
        check_capacity(self.m, n)
        return sum(p * kron_power(J, n) for p, J in zip(self.probs, self.jumps))

    def exact_moment_tensor(self, n, t, method="expm"):
        """``exp(t * rate * (E_n - I))`` by Pade scaling-and-squaring or Poisson series."""
        self._check_time(t)
        E = self.mean_jump_tensor(n)
        if method == "expm":
            P = linalg.expm(t * self.rate * (E - np.eye(E.shape[0])))
        elif method == "series":
            P = _poisson_series(E, self.rate * t)
        else:
            raise ValueError(f"unknown method {method!r}")
        return TransitionTensor(self.m, n, np.clip(P, 0.0, None))

    def to_dict(self):
        return {"kind": self.kind, "rate": self.rate, "jumps": self.jumps.tolist(),
                "probs": self.probs.tolist(), "grid": self.space.is_grid}


def poisson_p2(rate: float = 1.0) -> PoissonProductModel:
    """Two states; each jump sends every point to 0 or to 1 with probability 1/2."""
    J0 = np.array([[1.0, 0.0], [1.0, 0.0]])
    J1 = np.array([[0.0, 1.0], [0.0, 1.0]])
    return PoissonProductModel(rate, [J0, J1], [0.5, 0.5])


def heat_generator(m: int, diffusivity: float = 1.0) -> np.ndarray:
    """Nearest-neighbour generator on the uniform grid of [0, 1], reflecting ends."""
    h = 1.0 / (m - 1)
    Q = np.zeros((m, m))
    for x in range(m):
        for y in (x - 1, x + 1):
            if 0 <= y < m:
                Q[x, y] = diffusivity / (2 * h * h)
        Q[x, x] = -Q[x].sum()
    return Q


def heat_model(m: int, diffusivity: float = 1.0) -> DeterministicModel:
    return DeterministicModel(heat_generator(m, diffusivity), StateSpace.grid(m))


def local_smoothing_model(m: int, rate: float = 4.0) -> PoissonProductModel:
    """Random local averaging on a grid: a jump at site k spreads the three
    sites around k uniformly over that neighbourhood."""
    space = StateSpace.grid(m)
    jumps = []
    for k in range(m):
        J = np.eye(m)
        nb = [y for y in (k - 1, k, k + 1) if 0 <= y < m]
        for x in nb:
            J[x] = 0.0
            J[x, nb] = 1.0 / len(nb)
        jumps.append(J)
    return PoissonProductModel(rate, jumps, None, space)


class CoalescingMapModel(KernelModel):
    """Random maps on the cycle ``Z_m`` built from per-site fair coins.

    One step sends site ``y`` to ``y + c(y) mod m`` with independent coins
    ``c(y) = +-1``; points sharing a site share its coin, so trajectories
    that meet stay together.  With ``rate=None`` time counts steps
    (integer durations only); otherwise steps occur at Poisson times.
    """

    kind = "coalescing"

    def __init__(self, m: int, rate: float | None = None):
        if m < 3:
            raise ValueError("cycle needs at least 3 sites")
        self.space = StateSpace.discrete(m)
        self.rate = None if rate is None else float(rate)
        self.discrete_time = rate is None

    def step_coins(self, size, rng) -> np.ndarray:
        return 2 * rng.integers(0, 2, size=(size, self.m), dtype=np.int64) - 1

    def step_counts(self, t, size, rng) -> np.ndarray:
        self._check_time(t)
        if self.rate is None:
            if abs(t - round(t)) > 1e-12:
                raise ValueError("discrete-time coalescing model needs integer durations")
            return np.full(size, int(round(t)), dtype=np.int64)
        return rng.poisson(self.rate * t, size=size).astype(np.int64)

    def sample_maps(self, t, size, rng) -> np.ndarray:
        counts = self.step_counts(t, size, rng)
        coins = self.step_coins(int(counts.sum()), rng)
        return _k.compose_site_maps(counts, coins, self.m)

    def sample_batch(self, t, size, rng):
        maps = self.sample_maps(t, size, rng)
        K = np.zeros((size, self.m, self.m))
        np.put_along_axis(K, maps[:, :, None], 1.0, axis=2)
        return K

    def to_dict(self):
        return {"kind": self.kind, "m": self.m, "rate": self.rate}


@dataclass
class Estimate:
    value: float
    std_error: float
    n: int


def _coalescence_brute(m, x, y, steps, event):
    """Enumerate every coin path of the pair; exact probability of the event."""
    def go(a, b, k, met):
        if k == steps:
            hit = met if event == "met" else a == b
            return 1.0 if hit else 0.0
        if a == b:
            return 0.5 * sum(go((a + c) % m, (a + c) % m, k + 1, True) for c in (-1, 1))
        total = 0.0
        for ca in (-1, 1):
            for cb in (-1, 1):
                a2, b2 = (a + ca) % m, (b + cb) % m
                hit = met or a2 == b2 or (a2 == b and b2 == a)
                total += 0.25 * go(a2, b2, k + 1, hit)
        return total

    return go(x, y, 0, x == y)


def coalescence_probability(model: CoalescingMapModel, x: int, y: int, t, mode: str = "mc",
                            event: str = "met", replicas: int = 100_000, seed: int = 0,
                            max_brute_steps: int = 6) -> Estimate:
    """Probability that the trajectories from ``x`` and ``y`` interact by time ``t``.

    ``event="met"``: they occupied one site or swapped across an edge at
    some step.  ``event="coalesced"``: they sit on the same site at time
    ``t`` (absorbing).  ``mode="brute"`` enumerates all coin paths and
    needs the discrete-time model with at most ``max_brute_steps`` steps.
    """
    if event not in ("met", "coalesced"):
        raise ValueError(f"unknown event {event!r}")
    m = model.m
    if x == y:
        return Estimate(1.0, 0.0, 0 if mode == "brute" else replicas)
    if mode == "brute":
        if not model.discrete_time:
            raise ValueError("brute mode needs the discrete-time model")
        steps = int(round(t))
        if steps > max_brute_steps:
            raise ValueError(f"brute mode limited to {max_brute_steps} steps, got {steps}")
        return Estimate(_coalescence_brute(m, x, y, steps, event), 0.0, 0)
    if mode != "mc":
        raise ValueError(f"unknown mode {mode!r}")
    rng = substream(seed, TAG_COALESCE, x, y)
    counts = model.step_counts(t, replicas, rng)
    a = np.full(replicas, x, dtype=np.int64)
    b = np.full(replicas, y, dtype=np.int64)
    met = np.zeros(replicas, dtype=bool)
    rows = np.arange(replicas)
    for k in range(int(counts.max()) if replicas else 0):
        coins = model.step_coins(replicas, rng)
        live = counts > k
        a2 = np.where(live, (a + coins[rows, a]) % m, a)
        b2 = np.where(live, (b + coins[rows, b]) % m, b)
        met |= live & ((a2 == b2) | ((a2 == b) & (b2 == a)))
        a, b = a2, b2
    hits = met if event == "met" else (a == b)
    p = float(hits.mean())
    return Estimate(p, math.sqrt(p * (1 - p) / replicas), replicas)


# ---------------------------------------------------------------------------
# Tanaka

def _law_half(size, rng):
    return np.full(size, 0.5)


def _law_coin(size, rng):
    return rng.integers(0, 2, size=size).astype(np.float64)


def _law_uniform(size, rng):
    return rng.random(size)


SPLITTING_LAWS = {"half": _law_half, "coin": _law_coin, "uniform": _law_uniform}


class TanakaModel(KernelModel):
    """Discrete-time analogue of the Tanaka kernel flows on ``{-L, ..., L}``.

    Away from 0 every point follows ``x -> x + sign(x) xi`` with one global
    fair coin ``xi`` per step; mass at 0 splits as ``V delta_{+1} +
    (1 - V) delta_{-1}`` with a fresh ``V`` from the splitting law
    (mean 1/2).  Moves past ``+-L`` reflect.  State ``k`` is stored at
    index ``k + L``.
    """

    kind = "tanaka"
    discrete_time = True

    def __init__(self, L: int, m_law="uniform", validate_draws: int = 100_000):
        if L < 1:
            raise ValueError("half-width must be >= 1")
        self.L = int(L)
        if isinstance(m_law, str):
            self.law_name = m_law
            m_law = SPLITTING_LAWS[m_law]
        else:
            self.law_name = getattr(m_law, "__name__", "custom")
        self.m_law = m_law
        self.space = StateSpace.discrete(2 * self.L + 1)
        if validate_draws:
            v = np.asarray(m_law(validate_draws, substream(0, TAG_TANAKA, 0)), dtype=np.float64)
            if v.min() < 0 or v.max() > 1:
                raise ValueError("splitting law must live on [0, 1]")
            mean, se = mean_with_se(v)
            if abs(mean - 0.5) > 3 * se + 1e-12:
                raise ValueError(f"splitting law mean {mean:.4f} is not 1/2 (SE {se:.1e})")

    @property
    def origin(self) -> int:
        return self.L

    def states(self) -> np.ndarray:
        return np.arange(-self.L, self.L + 1)

    def _target(self, x: np.ndarray) -> np.ndarray:
        x = np.where(x > self.L, 2 * self.L - x, x)
        return np.where(x < -self.L, -2 * self.L - x, x)

    def step_kernels(self, size, rng) -> np.ndarray:
        L, m = self.L, self.m
        xi = 2 * rng.integers(0, 2, size=size) - 1
        V = np.asarray(self.m_law(size, rng), dtype=np.float64)
        K = np.zeros((size, m, m))
        s = self.states()
        rows = np.arange(m)
        away = s != 0
        sign = np.sign(s)
        for val in (-1, 1):
            sel = xi == val
            if not sel.any():
                continue
            tgt = self._target(s + sign * val) + L
            sub = np.zeros((m, m))
            sub[rows[away], tgt[away]] = 1.0
            K[sel] = sub
        K[:, L, :] = 0.0
        K[:, L, L + 1] = V
        K[:, L, L - 1] = 1.0 - V
        return K

    def sample_batch(self, t, size, rng):
        self._check_time(t)
        if abs(t - round(t)) > 1e-12:
            raise ValueError("Tanaka model supports integer-step durations only")
        steps = int(round(t))
        K = np.broadcast_to(np.eye(self.m), (size, self.m, self.m)).copy()
        for _ in range(steps):
            K = np.matmul(K, self.step_kernels(size, rng))
        return K

    def to_dict(self):
        return {"kind": self.kind, "L": self.L, "m_law": self.law_name}


@dataclass
class MassSample:
    samples: np.ndarray
    mean: float
    std_error: float

    @property
    def n(self):
        return self.samples.size


def tanaka_mass_statistic(model: TanakaModel, t_steps: int, replicas: int, seed: int = 0,
                          batch: int = 8192) -> MassSample:
    """Replicas of ``K_{0,t}(0, {x >= 0})``."""
    if t_steps < 1:
        raise ValueError("t_steps must be >= 1")
    out = np.empty(replicas)
    for b, start in enumerate(range(0, replicas, batch)):
        size = min(batch, replicas - start)
        K = model.sample_batch(t_steps, size, substream(seed, TAG_TANAKA, 1, b))
        out[start:start + size] = K[:, model.origin, model.origin:].sum(axis=1)
    mean, se = mean_with_se(out)
    return MassSample(out, float(mean), float(se))


# ---------------------------------------------------------------------------
# configuration

def model_from_config(cfg: dict) -> KernelModel:
    kind = cfg.get("kind")
    p = dict(cfg.get("params", {}))
    if kind == "poisson_p2":
        return poisson_p2(p.get("rate", 1.0))
    if kind == "poisson":
        space = StateSpace.grid(len(p["jumps"][0])) if p.get("grid") else None
        return PoissonProductModel(p["rate"], p["jumps"], p.get("probs"), space)
    if kind == "deterministic":
        space = StateSpace.grid(len(p["Q"])) if p.get("grid") else None
        return DeterministicModel(p["Q"], space)
    if kind == "heat":
        return heat_model(p["m"], p.get("diffusivity", 1.0))
    if kind == "identity":
        m = p.get("m", 2)
        return DeterministicModel(np.zeros((m, m)), StateSpace.grid(m) if p.get("grid") else None)
    if kind == "local_smoothing":
        return local_smoothing_model(p["m"], p.get("rate", 4.0))
    if kind == "coalescing":
        return CoalescingMapModel(p["m"], p.get("rate"))
    if kind == "tanaka":
        return TanakaModel(p.get("L", 6), p.get("m_law", "uniform"))
    raise ValueError(f"unknown model kind {kind!r}")
