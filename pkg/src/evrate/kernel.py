"""One-interval transition kernel of the charging circuit.

Over one broadcast interval the connected-count process is a birth-death
chain with constant arrival rate and per-vehicle exponential departures.
Its interval kernel factors into two independent pieces:

* each of the ``m`` initially connected vehicles survives the interval
  with probability ``1 - epsilon`` (``epsilon = 1 - exp(-mu_tau)``), and
* vehicles that connect during the interval and are still connected at
  its end are Poisson with mean ``q = lambda_tau * epsilon / mu_tau``.

The kernel here is implemented from that decomposition (survivor binomial
convolved with a Poisson), and :func:`ctmc_oracle_row` provides an
independent continuous-time ground truth via uniformization to certify it.

All operations are pure; rows for distinct start states may be computed
concurrently.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import special as _sp

from .errors import DomainError, TruncationError, TruncationWarning, OutOfModelWarning
from .special_math import (
    binomial_log_pmf,
    compensated_sum,
    poisson_log_pmf,
    poisson_quantile_upper,
    poisson_upper_tail,
)

#: Truncation bounds are chosen so the discarded mass is below this.
TRUNCATION_TARGET = 1e-13


@dataclass(frozen=True)
class KernelParams:
    """Dimensionless description of one broadcast interval.

    ``lambda_tau`` is the expected number of connection attempts per
    interval, ``mu_tau`` the departure rate times the interval length.
    ``epsilon`` and ``q`` are derived deterministically from the two
    primary fields.
    """

    lambda_tau: float
    mu_tau: float
    epsilon: float = field(init=False, repr=False)
    q: float = field(init=False, repr=False)

    def __post_init__(self):
        lt, mt = self.lambda_tau, self.mu_tau
        if not (np.isfinite(lt) and lt >= 0.0):
            raise DomainError(f"lambda_tau must be finite and >= 0, got {lt}")
        if not (np.isfinite(mt) and mt > 0.0):
            raise DomainError(f"mu_tau must be finite and > 0, got {mt}")
        # expm1 keeps epsilon exact for tiny mu_tau.
        object.__setattr__(self, "epsilon", -math.expm1(-mt))
        object.__setattr__(self, "q", lt * self.epsilon / mt)


def make_params(lambda_tau: float, mu_tau: float) -> KernelParams:
    """Validate and derive the interval parameters."""
    return KernelParams(lambda_tau, mu_tau)


@dataclass(frozen=True)
class CircuitCapacity:
    """Capacity expressed as the maximum number of concurrent chargers.

    The overload convention is "count >= n_capacity is overloaded",
    applied consistently across the package.
    """

    n_capacity: int

    def __post_init__(self):
        n = self.n_capacity
        if n != int(n) or n < 1:
            raise DomainError(f"n_capacity must be an integer >= 1, got {n}")
        object.__setattr__(self, "n_capacity", int(n))

    def __int__(self) -> int:
        return self.n_capacity


def capacity_value(capacity) -> int:
    """Normalize ``CircuitCapacity | int`` to a plain threshold count."""
    n = int(capacity)
    if n < 0:
        raise DomainError(f"capacity must be >= 0, got {capacity}")
    return n


@dataclass(frozen=True)
class CountDistribution:
    """Truncated probability vector over the connected count 0..n_max."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        if p.ndim != 1 or p.size == 0:
            raise DomainError("probs must be a non-empty 1-d vector")
        if np.any(p < -1e-15) or np.any(p > 1.0 + 1e-12):
            raise DomainError("probabilities must lie in [0, 1]")
        np.clip(p, 0.0, None, out=p)
        total = compensated_sum(p)
        if not 1.0 - 1e-9 <= total <= 1.0 + 1e-9:
            raise DomainError(f"probabilities must sum to 1 within 1e-9, got {total}")
        p.flags.writeable = False
        object.__setattr__(self, "probs", p)

    @property
    def n_max(self) -> int:
        return self.probs.size - 1

    def total(self) -> float:
        return compensated_sum(self.probs)

    def mean(self) -> float:
        return compensated_sum(self.probs * np.arange(self.probs.size))

    def tail_mass(self, threshold: int) -> float:
        """Mass at counts >= threshold."""
        if threshold <= 0:
            return self.total()
        return compensated_sum(self.probs[threshold:])

    def tv_distance(self, other: "CountDistribution") -> float:
        n = max(self.probs.size, other.probs.size)
        a = np.zeros(n)
        b = np.zeros(n)
        a[: self.probs.size] = self.probs
        b[: other.probs.size] = other.probs
        return 0.5 * compensated_sum(np.abs(a - b))

    @staticmethod
    def point_mass(n: int, n_max: int | None = None) -> "CountDistribution":
        size = (n if n_max is None else n_max) + 1
        if size <= n:
            raise DomainError("n_max must be >= n for a point mass")
        p = np.zeros(size)
        p[n] = 1.0
        return CountDistribution(p)


def _survivor_log_pmf(m: int, epsilon: float) -> np.ndarray:
    """log P(k of m initial vehicles survive the interval), k = 0..m."""
    if m == 0:
        return np.zeros(1)
    return binomial_log_pmf(np.arange(m + 1), m, 1.0 - epsilon)


def transition_prob(m: int, n: int, p: KernelParams) -> float:
    """Probability that a circuit holding m vehicles holds n one interval later.

    Direct evaluation of the survivor-thinning/Poisson-arrival sum
    ``sum_k C(m,k)(1-eps)^k eps^(m-k) e^(-q) q^(n-k)/(n-k)!`` over
    k = 0..min(m, n), in log space.
    """
    m = _check_count(m, "m")
    n = _check_count(n, "n")
    ks = np.arange(min(m, n) + 1)
    logs = _survivor_log_pmf(m, p.epsilon)[ks] + poisson_log_pmf(n - ks, p.q)
    return float(np.exp(_sp.logsumexp(logs)))


def _row_probs(m: int, p: KernelParams, n_max: int) -> np.ndarray:
    """Transition probabilities m -> 0..n_max as a dense vector."""
    survivors = np.exp(_survivor_log_pmf(m, p.epsilon))
    arrivals = np.exp(poisson_log_pmf(np.arange(n_max + 1), p.q))
    return np.convolve(survivors, arrivals)[: n_max + 1]


def default_row_n_max(m: int, p: KernelParams) -> int:
    """Truncation bound: survivors never exceed m, so a Poisson quantile
    of the arrival mean bounds the discarded mass below TRUNCATION_TARGET."""
    return m + poisson_quantile_upper(p.q, TRUNCATION_TARGET)


def kernel_row(m: int, p: KernelParams, n_max: int | None = None) -> CountDistribution:
    """One column of the interval kernel: the distribution of the count one
    interval after starting at m.  ``n_max`` is chosen automatically when
    omitted; an insufficient explicit value raises ``TruncationError``.
    """
    m = _check_count(m, "m")
    auto = default_row_n_max(m, p)
    if n_max is None:
        n_max = auto
    else:
        if n_max < 0:
            raise DomainError(f"n_max must be >= 0, got {n_max}")
        probs = _row_probs(m, p, n_max)
        if 1.0 - compensated_sum(probs) > 1e-12:
            raise TruncationError(
                f"n_max={n_max} keeps less than 1 - 1e-12 of the row mass for "
                f"m={m}; need n_max >= {auto}",
                required_n_max=auto,
            )
        return CountDistribution(probs)
    return CountDistribution(_row_probs(m, p, n_max))


def overload_mass(m: int, capacity, p: KernelParams) -> float:
    """P(count >= capacity one interval later | count = m now).

    Computed as a direct tail: survivor binomial weights times the Poisson
    upper tail of the remaining headroom, summed with compensated
    accumulation.  Calling this with m already at or above capacity is
    permitted but flagged: the per-interval guarantee conditions on a
    non-overloaded start.
    """
    m = _check_count(m, "m")
    cap = capacity_value(capacity)
    if cap == 0:
        return 1.0
    if m >= cap:
        warnings.warn(
            f"overload_mass evaluated at m={m} >= capacity {cap}; the "
            "per-interval bound conditions on a non-overloaded start",
            OutOfModelWarning,
            stacklevel=2,
        )
    survivors = np.exp(_survivor_log_pmf(m, p.epsilon))
    need = cap - np.arange(m + 1)
    tails = np.ones(m + 1)
    pos = need > 0
    if np.any(pos):
        if p.q == 0.0:
            tails[pos] = 0.0
        else:
            tails[pos] = _sp.gammainc(need[pos].astype(float), p.q)
    return min(1.0, compensated_sum(survivors * tails))


def overload_mass_derivative(m: int, capacity, p: KernelParams) -> float:
    """d overload_mass / d lambda_tau at fixed mu_tau (used by the rate solver).

    d/dq P(X >= a) = pmf(a-1; q) for a >= 1, and dq/dlambda_tau = eps/mu_tau.
    """
    m = _check_count(m, "m")
    cap = capacity_value(capacity)
    if cap == 0:
        return 0.0
    survivors = np.exp(_survivor_log_pmf(m, p.epsilon))
    need = cap - np.arange(m + 1)
    terms = np.zeros(m + 1)
    pos = need > 0
    if np.any(pos):
        terms[pos] = np.exp(poisson_log_pmf(need[pos] - 1, p.q))
    return (p.epsilon / p.mu_tau) * compensated_sum(survivors * terms)


def ctmc_oracle_row(
    m: int, lambda_tau: float, mu_tau: float, n_max: int
) -> CountDistribution:
    """Ground-truth interval distribution from the continuous-time chain.

    Exponentiates the birth-death generator (constant birth rate, death
    rate proportional to the count, birth zeroed at the n_max boundary)
    by uniformization with term tolerance 1e-15.  Independent of
    :func:`transition_prob`; intended as the certifying oracle for small
    instances.
    """
    m = _check_count(m, "m")
    if not (np.isfinite(lambda_tau) and lambda_tau >= 0.0):
        raise DomainError(f"lambda_tau must be finite and >= 0, got {lambda_tau}")
    if not (np.isfinite(mu_tau) and mu_tau > 0.0):
        raise DomainError(f"mu_tau must be finite and > 0, got {mu_tau}")
    if n_max < m:
        raise DomainError(f"n_max={n_max} must be >= start state m={m}")

    size = n_max + 1
    birth = np.full(size, lambda_tau)
    birth[-1] = 0.0
    death = mu_tau * np.arange(size)

    # Halve the time step until the uniformization rate is comfortably
    # representable, then square the result by repeated application.
    halvings = 0
    rate = lambda_tau + mu_tau * n_max
    while rate > 600.0:
        rate *= 0.5
        halvings += 1
    scale = 0.5**halvings

    v = np.zeros(size)
    v[m] = 1.0
    for _ in range(2**halvings):
        v = _uniformized_step(v, birth * scale, death * scale, rate)

    if v[-1] > 1e-12:
        warnings.warn(
            f"probability {v[-1]:.3e} at the truncation boundary n_max={n_max}; "
            "increase n_max for a trustworthy oracle row",
            TruncationWarning,
            stacklevel=2,
        )
    return CountDistribution(np.clip(v, 0.0, None))


def _uniformized_step(v, birth, death, rate):
    """exp(Q) applied to v for the (scaled) generator, via the Poissonized
    discrete chain with uniformization rate ``rate``."""
    if rate == 0.0:
        return v.copy()
    out = np.zeros_like(v)
    stay = 1.0 - (birth + death) / rate
    log_rate = math.log(rate)
    total = 0.0
    j = 0
    term = v
    j_cap = int(rate + 12.0 * math.sqrt(rate) + 40.0)
    while j <= j_cap:
        w = math.exp(-rate + j * log_rate - _sp.gammaln(j + 1))
        if w > 0.0:
            out += w * term
            total += w
            if total >= 1.0 - 1e-15:
                break
        nxt = stay * term
        nxt[1:] += (birth[:-1] / rate) * term[:-1]
        nxt[:-1] += (death[1:] / rate) * term[1:]
        term = nxt
        j += 1
    return out


def _check_count(value, name: str) -> int:
    if value != int(value) or value < 0:
        raise DomainError(f"{name} must be an integer >= 0, got {value}")
    return int(value)
