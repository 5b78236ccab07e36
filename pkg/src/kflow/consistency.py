"""n-point transition tensors from kernel laws and checks of their defining properties.

A ``TensorFamily`` holds ``P^(n)_t`` for orders ``1..N`` on a time grid,
either from an exact oracle or from Monte Carlo.  The checks cover
consistency under coordinate injections, Chapman-Kolmogorov and the two
Feller continuity conditions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels as _k
from .core import (
    Injection, KflowError, TransitionTensor, all_injections, all_points,
    check_capacity, encode, identity_tensor, injection_apply, kron_power, pushforward_matrix,
)
from .models import KernelLaw, KernelModel
from .stats import TAG_FELLER, TAG_TENSOR, _jsonable, parallel_map, substream

SAMPLE_CHUNK = 1 << 14
TIME_MATCH = 1e-12


class MissingTensorError(KflowError, KeyError):
    pass


def as_law(obj, t: float | None = None) -> KernelLaw:
    """Coerce a model, a ``t -> law`` callable or a law into a ``KernelLaw`` at ``t``."""
    if isinstance(obj, KernelLaw):
        return obj
    if isinstance(obj, KernelModel):
        return obj.law(t)
    if callable(obj):
        return obj(t)
    raise TypeError(f"cannot interpret {type(obj).__name__} as a kernel law")


def sample_chunks(law: KernelLaw, samples: int, seed: int, key: tuple, chunk: int = SAMPLE_CHUNK):
    """Draw ``samples`` kernels in fixed-size chunks, one substream per chunk.

    Returns the list of chunk arrays in order.  Reproducible for any
    worker count since chunk boundaries do not depend on it.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    starts = list(range(0, samples, chunk))

    def draw(c):
        size = min(chunk, samples - starts[c])
        return law.sample(size, substream(seed, *key, c))

    return parallel_map(draw, range(len(starts)))


@dataclass
class CheckReport:
    name: str
    max_abs_error: float
    threshold: float
    passed: bool = field(init=False)
    details: list = field(default_factory=list)
    skipped: bool = False
    warning: bool = False

    def __post_init__(self):
        self.max_abs_error = float(self.max_abs_error)
        self.passed = bool(self.max_abs_error <= self.threshold)

    def to_dict(self) -> dict:
        return {"kind": "check", "name": self.name, "max_abs_error": _jsonable(self.max_abs_error),
                "threshold": self.threshold, "passed": self.passed, "skipped": self.skipped,
                "warning": self.warning, "details": _jsonable(self.details)}


@dataclass
class EmpiricalTensor:
    """Monte Carlo mean of ``K^{(x)n}`` with per-entry standard errors."""

    tensor: TransitionTensor
    std_error: np.ndarray
    n_samples: int
    seed: int

    @property
    def entries(self) -> np.ndarray:
        return self.tensor.entries


def build_tensor_from_sampler(law, n: int, t: float | None = None, samples: int = 100_000,
                              seed: int = 0) -> EmpiricalTensor:
    """Average of ``tensor_of_kernel(K, n)`` over i.i.d. draws ``K ~ nu_t``."""
    law = as_law(law, t)
    m = law.space.m
    check_capacity(m, n)
    chunks = sample_chunks(law, samples, seed, (TAG_TENSOR, n))
    parts = parallel_map(lambda K: _k.tensor_moments(K, n), chunks)
    total = np.zeros((m ** n, m ** n))
    total_sq = np.zeros((m ** n, m ** n))
    for s, sq in parts:
        total += s
        total_sq += sq
    mean = total / samples
    if samples > 1:
        second = total_sq / samples
        var = second - mean * mean
        # one-pass variance: differences at roundoff level are zero
        var[var <= 64 * np.finfo(float).eps * second] = 0.0
        var *= samples / (samples - 1)
        se = np.sqrt(var / samples)
    else:
        se = np.zeros_like(mean)
    mean /= mean.sum(axis=1, keepdims=True)
    return EmpiricalTensor(TransitionTensor(m, n, mean), se, samples, seed)


class TensorFamily:
    """``P^(n)_t`` for ``n = 1..max_order`` on a sorted time grid."""

    def __init__(self, m: int, max_order: int, times, tensors: dict, std_errors: dict | None = None,
                 label: str = "family"):
        self.m = int(m)
        self.max_order = int(max_order)
        self.times = sorted(float(t) for t in times)
        self._tensors = {}
        for (n, t), T in tensors.items():
            if T.m != self.m or T.order != n:
                raise ValueError(f"tensor at {(n, t)} has m={T.m}, order={T.order}")
            self._tensors[(int(n), self._round(t))] = T
        self.std_errors = dict(std_errors or {})
        self.label = label
        for (n, t), T in self._tensors.items():
            if t == 0.0 and np.abs(T.entries - np.eye(T.size)).max() > 1e-10:
                raise ValueError(f"order-{n} tensor at t=0 is not the identity")

    def _round(self, t):
        for s in getattr(self, "times", []):
            if abs(s - t) <= TIME_MATCH:
                return s
        return float(t)

    def has(self, n: int, t: float) -> bool:
        return (n, self._round(t)) in self._tensors

    def get(self, n: int, t: float) -> TransitionTensor:
        try:
            return self._tensors[(n, self._round(t))]
        except KeyError:
            raise MissingTensorError(f"{self.label}: no order-{n} tensor at t={t:g}") from None

    def items(self):
        return sorted(self._tensors.items())

    def replace(self, n: int, t: float, tensor: TransitionTensor, label: str | None = None) -> "TensorFamily":
        tensors = dict(self._tensors)
        tensors[(n, self._round(t))] = tensor
        return TensorFamily(self.m, self.max_order, self.times, tensors, self.std_errors,
                            label or self.label + "*")

    def decorrelated(self, order: int = 2) -> "TensorFamily":
        """Replace every order-``order`` tensor by the product of one-point tensors."""
        fam = self
        for t in self.times:
            P1 = self.get(1, t).entries
            fam = fam.replace(order, t, TransitionTensor(self.m, order, kron_power(P1, order)),
                              self.label + "-decorrelated")
        return fam

    @classmethod
    def from_oracle(cls, model, max_order: int, times, method: str = "expm") -> "TensorFamily":
        tensors = {}
        for t in times:
            for n in range(1, max_order + 1):
                tensors[(n, float(t))] = (identity_tensor(model.m, n) if t == 0
                                          else model.exact_moment_tensor(n, t, method))
        return cls(model.m, max_order, times, tensors, label=f"{model.kind}-oracle")

    @classmethod
    def from_sampler(cls, law_family, max_order: int, times, samples: int, seed: int = 0) -> "TensorFamily":
        tensors, ses, m = {}, {}, None
        for ti, t in enumerate(times):
            for n in range(1, max_order + 1):
                if t == 0:
                    law = as_law(law_family, 0.0)
                    T, se = identity_tensor(law.space.m, n), np.zeros((law.space.m ** n,) * 2)
                else:
                    emp = build_tensor_from_sampler(law_family, n, t, samples, seed + 7919 * ti)
                    T, se = emp.tensor, emp.std_error
                tensors[(n, float(t))] = T
                ses[(n, float(t))] = se
                m = T.m
        return cls(m, max_order, times, tensors, ses, label="sampled")


def _injections_for(n: int):
    """All injections for ``n <= 3``; generators (adjacent swaps, last-coordinate drop) above."""
    if n <= 3:
        return [s for k in range(1, n + 1) for s in all_injections(k, n)]
    gens = []
    for i in range(1, n):
        vals = list(range(1, n + 1))
        vals[i - 1], vals[i] = vals[i], vals[i - 1]
        gens.append(Injection(n, tuple(vals)))
    gens.append(Injection(n, tuple(range(1, n))))
    return gens


def _projection_index(m: int, n: int, sigma: Injection) -> np.ndarray:
    return np.array([encode(injection_apply(sigma, x), m) for x in all_points(m, n)])


def check_consistency(fam: TensorFamily, tol: float = 1e-9) -> CheckReport:
    """Max over ``t, n, sigma, x`` of ``|P^(n)_t(x) o pi_sigma^{-1} - P^(k)_t(pi_sigma x)|``."""
    worst = []
    for t in fam.times:
        for n in range(1, fam.max_order + 1):
            Tn = fam.get(n, t)
            for sigma in _injections_for(n):
                Tk = fam.get(sigma.k, t)
                pf = pushforward_matrix(Tn, sigma)
                ref = Tk.entries[_projection_index(fam.m, n, sigma)]
                dev = np.abs(pf - ref)
                r, c = np.unravel_index(np.argmax(dev), dev.shape)
                worst.append((float(dev[r, c]), {"t": t, "n": n, "sigma": list(sigma.values),
                                                 "row": int(r), "col": int(c)}))
    worst.sort(key=lambda w: -w[0])
    err = worst[0][0] if worst else 0.0
    return CheckReport("consistency", err, tol, [dict(d, error=e) for e, d in worst[:5]])


def check_chapman_kolmogorov(fam: TensorFamily, n: int, t: float, s: float,
                             tol: float = 1e-9) -> CheckReport:
    """``|P^(n)_{t+s} - P^(n)_t P^(n)_s|``."""
    lhs = fam.get(n, t + s).entries
    rhs = fam.get(n, t).entries @ fam.get(n, s).entries
    dev = np.abs(lhs - rhs)
    r, c = np.unravel_index(np.argmax(dev), dev.shape)
    return CheckReport(f"chapman_kolmogorov(n={n},t={t:g},s={s:g})", dev.max(), tol,
                       [{"row": int(r), "col": int(c), "error": float(dev[r, c])}])


def _exceedance(frac_hits: np.ndarray, samples: int):
    p = frac_hits
    return p, np.sqrt(p * (1 - p) / samples)


def check_feller_small_time(law_family, f, eps: float, times, samples: int = 10_000,
                            seed: int = 0, bound: float = 0.05) -> CheckReport:
    """Estimates ``sup_x nu_t{|Kf(x) - f(x)| >= eps}`` along ``times`` decreasing to 0.

    The reported error is the final estimate plus every increase of the
    sequence beyond two combined standard errors, so the check passes
    exactly when the sequence is nonincreasing within noise and ends
    below ``bound``.
    """
    times = list(times)
    if any(b >= a for a, b in zip(times, times[1:])):
        raise ValueError("times must be strictly decreasing")
    f = np.asarray(f, dtype=np.float64)
    est, ses, rows = [], [], []
    for i, t in enumerate(times):
        law = as_law(law_family, t)
        hits = np.zeros(law.space.m)
        for K in sample_chunks(law, samples, seed, (TAG_FELLER, 0, i)):
            hits += (np.abs(K @ f - f) >= eps).sum(axis=0)
        p, se = _exceedance(hits / samples, samples)
        x = int(np.argmax(p))
        est.append(float(p[x])), ses.append(float(se[x]))
        rows.append({"t": t, "estimate": float(p[x]), "std_error": float(se[x]), "argmax_x": x})
    excess = sum(max(0.0, b - a - 2 * math.hypot(sa, sb))
                 for a, b, sa, sb in zip(est, est[1:], ses, ses[1:]))
    return CheckReport("feller_small_time", est[-1] + excess, bound, rows)


def check_feller_space(law, f, t: float | None = None, eps: float = 0.1, samples: int = 10_000,
                       seed: int = 0, bound: float = 0.05) -> CheckReport:
    """Max over adjacent grid pairs of ``nu_t{|Kf(y) - Kf(x)| >= eps}``."""
    law = as_law(law, t)
    if not law.space.is_grid:
        return CheckReport("feller_space", 0.0, bound, [{"note": "discrete space; vacuous"}],
                           skipped=True)
    f = np.asarray(f, dtype=np.float64)
    m = law.space.m
    hits = np.zeros(max(m - 1, 0))
    for K in sample_chunks(law, samples, seed, (TAG_FELLER, 1)):
        Kf = K @ f
        hits += (np.abs(np.diff(Kf, axis=1)) >= eps).sum(axis=0)
    p, se = _exceedance(hits / samples, samples)
    rows = [{"x": x, "y": x + 1, "estimate": float(p[x]), "std_error": float(se[x])}
            for x in range(m - 1)]
    return CheckReport("feller_space", float(p.max()) if p.size else 0.0, bound, rows)
