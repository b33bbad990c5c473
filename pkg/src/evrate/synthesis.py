"""Construction of broadcast-rate control policies.

The variable-rate policy assigns every occupancy ``n`` below capacity the
largest per-interval connection rate whose one-interval overload
probability equals the budget; occupancies at or above capacity get rate
zero.  The solved table is continued to real arguments with a
shape-preserving quadratic spline, which yields the capacity-utilization
lower bound as the fixed point ``lambda(x)*tau = mu_tau*x``.

Table construction parallelizes naturally over states (independent scalar
solves); everything here is pure.
"""

import csv
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import (
    ConvergenceError,
    DomainError,
    InfeasibleError,
    PolicyShapeError,
    TableFormatError,
)
from .kernel import KernelParams, capacity_value, overload_mass, overload_mass_derivative

#: Accepted relative residual of overload mass around the budget.
RESIDUAL_RTOL = 1e-3
#: Relative tolerance on the solved per-interval rate.
RATE_RTOL = 1e-12


@dataclass(frozen=True)
class SynthesisSpec:
    """Inputs of one synthesis problem: capacity N, per-interval overload
    budget, and interval length in departure-rate units."""

    capacity: int
    overload_budget: float
    mu_tau: float

    def __post_init__(self):
        object.__setattr__(self, "capacity", capacity_value(self.capacity))
        if self.capacity < 1:
            raise DomainError(f"capacity must be >= 1, got {self.capacity}")
        if not 0.0 < self.overload_budget < 1.0:
            raise DomainError(
                f"overload_budget must be in (0, 1), got {self.overload_budget}"
            )
        if not (np.isfinite(self.mu_tau) and self.mu_tau > 0.0):
            raise DomainError(f"mu_tau must be finite and > 0, got {self.mu_tau}")


class RatePolicy:
    """Common interface of the control laws: per-interval connection rate
    ``lambda(n)*tau`` as a function of the occupancy read at the interval
    start."""

    def lambda_tau(self, n, mu_tau: float) -> float:
        raise NotImplementedError

    def rates_vector(self, n_max: int, mu_tau: float) -> np.ndarray:
        """lambda(n)*tau for n = 0..n_max as a dense vector."""
        raise NotImplementedError

    def interval_rate_lookup(self, mu_tau: float):
        """(finite lookup vector, rate beyond its end) for simulator use."""
        raise NotImplementedError


@dataclass(frozen=True)
class ConstantRatePolicy(RatePolicy):
    """Preprogrammed constant connection rate, stored as lambda0/mu."""

    lambda_over_mu: float

    def __post_init__(self):
        if not (np.isfinite(self.lambda_over_mu) and self.lambda_over_mu >= 0.0):
            raise DomainError(
                f"lambda_over_mu must be finite and >= 0, got {self.lambda_over_mu}"
            )

    def lambda_tau(self, n, mu_tau: float) -> float:
        if n < 0:
            raise DomainError(f"occupancy must be >= 0, got {n}")
        return self.lambda_over_mu * mu_tau

    def rates_vector(self, n_max: int, mu_tau: float) -> np.ndarray:
        return np.full(n_max + 1, self.lambda_over_mu * mu_tau)

    def interval_rate_lookup(self, mu_tau: float):
        return np.empty(0), self.lambda_over_mu * mu_tau


@dataclass(frozen=True)
class TableRatePolicy(RatePolicy):
    """Tabulated per-interval rates for n = 0..capacity-1, zero beyond.

    Synthesized tables are strictly decreasing and positive below
    capacity; derived tables (e.g. the linearized deadband comparison) may
    hit zero earlier, so only nonincreasing shape is enforced here.
    """

    rates: np.ndarray
    capacity: int
    mu_tau: float

    def __post_init__(self):
        r = np.array(self.rates, dtype=float)
        cap = capacity_value(self.capacity)
        object.__setattr__(self, "capacity", cap)
        if r.ndim != 1 or r.size != cap:
            raise DomainError(
                f"rates must have one entry per state below capacity "
                f"({cap}), got shape {r.shape}"
            )
        if not np.all(np.isfinite(r)) or np.any(r < 0.0):
            raise DomainError("rates must be finite and >= 0")
        if np.any(np.diff(r) > 1e-12 * max(1.0, r[0])):
            raise PolicyShapeError("rates must be nonincreasing in n")
        if not (np.isfinite(self.mu_tau) and self.mu_tau > 0.0):
            raise DomainError(f"mu_tau must be finite and > 0, got {self.mu_tau}")
        r.flags.writeable = False
        object.__setattr__(self, "rates", r)

    def lambda_tau(self, n, mu_tau: float) -> float:
        if n != int(n) or n < 0:
            raise DomainError(f"occupancy must be an integer >= 0, got {n}")
        n = int(n)
        return float(self.rates[n]) if n < self.capacity else 0.0

    def rates_vector(self, n_max: int, mu_tau: float) -> np.ndarray:
        out = np.zeros(n_max + 1)
        k = min(self.capacity, n_max + 1)
        out[:k] = self.rates[:k]
        return out

    def interval_rate_lookup(self, mu_tau: float):
        return self.rates, 0.0


@dataclass(frozen=True)
class ContinuousRatePolicy(RatePolicy):
    """Monotone continuation of a rate table to real occupancies on
    [0, capacity], clamped to zero at and beyond capacity.

    ``breaks``/``coef_*`` hold the piecewise-quadratic spline pieces:
    value(x) = a[i] + b[i]*(x-breaks[i]) + c[i]*(x-breaks[i])**2 on
    [breaks[i], breaks[i+1]].
    """

    breaks: np.ndarray
    coef_a: np.ndarray
    coef_b: np.ndarray
    coef_c: np.ndarray
    capacity: int
    mu_tau: float

    def __call__(self, x):
        return self.lambda_tau(x, self.mu_tau)

    def lambda_tau(self, x, mu_tau: float):
        arr = np.asarray(x, dtype=float)
        if np.any(arr < 0.0):
            raise DomainError("occupancy must be >= 0")
        idx = np.clip(np.searchsorted(self.breaks, arr, side="right") - 1,
                      0, self.coef_a.size - 1)
        dt = arr - self.breaks[idx]
        val = self.coef_a[idx] + dt * (self.coef_b[idx] + dt * self.coef_c[idx])
        val = np.where(arr >= self.capacity, 0.0, np.maximum(val, 0.0))
        return float(val) if np.ndim(x) == 0 else val

    def rates_vector(self, n_max: int, mu_tau: float) -> np.ndarray:
        return self.lambda_tau(np.arange(n_max + 1, dtype=float), mu_tau)

    def interval_rate_lookup(self, mu_tau: float):
        return self.lambda_tau(np.arange(self.capacity, dtype=float), mu_tau), 0.0


class UtilizationBound(NamedTuple):
    n_star: float
    utilization: float


class AsymptoticRate(NamedTuple):
    lambda_tau: float
    valid: bool
    clamped: bool


def solve_rate_for_state(
    n: int, spec: SynthesisSpec, *, lower: float = 0.0, initial: float | None = None
) -> float:
    """The per-interval rate at occupancy n whose one-interval overload
    probability equals the budget.

    Bracketed safeguarded Newton iteration on the log residual (the mass
    is extremely flat in the rate at small budgets, where plain Newton
    stalls); bisection fallback keeps every step inside the bracket.
    Uniqueness follows from strict monotonicity of the overload mass in
    the rate.
    """
    cap = spec.capacity
    if n != int(n) or not 0 <= n < cap:
        raise DomainError(f"state must satisfy 0 <= n < capacity={cap}, got {n}")
    n = int(n)
    pstar = spec.overload_budget
    log_pstar = math.log(pstar)

    def mass_at(x: float):
        prm = KernelParams(x, spec.mu_tau)
        return overload_mass(n, cap, prm), overload_mass_derivative(n, cap, prm)

    m0, _ = mass_at(lower)
    if m0 > pstar:
        # Cannot happen for n < cap with exact arithmetic; guarded anyway.
        raise InfeasibleError(
            f"overload mass {m0:.3e} at rate {lower} already exceeds the "
            f"budget {pstar:.3e} for state n={n}",
            state=n,
        )

    lo = lower
    hi = cap - n + 10.0 * math.sqrt(cap)
    expansions = 0
    while mass_at(hi)[0] < pstar:
        hi *= 2.0
        expansions += 1
        if expansions > 60:
            raise ConvergenceError(f"failed to bracket the rate for n={n}")

    x = initial if initial is not None and lo < initial < hi else 0.5 * (lo + hi)
    last_step = math.inf
    for _ in range(200):
        mass, deriv = mass_at(x)
        if mass < pstar:
            lo = x
        else:
            hi = x
        if mass > 0.0:
            res = math.log(mass) - log_pstar
            if abs(res) <= 8e-4 and last_step <= RATE_RTOL:
                break
            # Newton in log(x): d log(mass) / d log(x) = x * deriv / mass
            slope = x * deriv / mass
            step_ok = slope > 0.0 and math.isfinite(res)
            x_new = x * math.exp(-res / slope) if step_ok else math.nan
        else:
            x_new = math.nan
        if not (lo < x_new < hi) or not math.isfinite(x_new):
            x_new = 0.5 * (lo + hi)
        last_step = abs(x_new - x) / max(x_new, 1e-300)
        x = x_new
        if hi - lo <= RATE_RTOL * hi:
            break
    mass, _ = mass_at(x)
    if abs(mass - pstar) > RESIDUAL_RTOL * pstar:
        raise ConvergenceError(
            f"rate solve for n={n} stalled: overload mass {mass:.6e} vs "
            f"budget {pstar:.6e}",
            residual=mass - pstar,
        )
    return x


def build_rate_table(spec: SynthesisSpec) -> TableRatePolicy:
    """Solve the per-state rates for every occupancy below capacity.

    States are solved from capacity-1 downward so each solve warm-starts
    from its neighbor (the table decreases by roughly one vehicle per
    state).  The result is checked to be strictly decreasing and convex,
    the two shape properties the continuation and the utilization bound
    rely on.
    """
    cap = spec.capacity
    rates = np.empty(cap)
    prev = None
    for n in range(cap - 1, -1, -1):
        try:
            rates[n] = solve_rate_for_state(
                n,
                spec,
                lower=0.0 if prev is None else prev,
                initial=None if prev is None else prev + 1.0,
            )
        except (ConvergenceError, InfeasibleError) as exc:
            raise type(exc)(f"state n={n}: {exc}", **_err_kwargs(exc, n)) from exc
        prev = rates[n]
    if not np.all(np.diff(rates) < 0.0):
        raise PolicyShapeError("synthesized table is not strictly decreasing")
    second = np.diff(rates, 2)
    conv_tol = 1e-8 * (1.0 + rates[0])
    if second.size and second.min() < -conv_tol:
        raise PolicyShapeError(
            f"synthesized table violates convexity (min second difference "
            f"{second.min():.3e}); the utilization bound would be invalid"
        )
    return TableRatePolicy(rates, cap, spec.mu_tau)


def _err_kwargs(exc, n):
    if isinstance(exc, InfeasibleError):
        return {"state": n}
    return {"residual": getattr(exc, "residual", None)}


def residual_certificate(policy: TableRatePolicy, spec: SynthesisSpec) -> np.ndarray:
    """Overload mass of every table entry divided by the budget.

    A valid table yields values within 1 +/- RESIDUAL_RTOL.
    """
    out = np.empty(policy.capacity)
    for n in range(policy.capacity):
        prm = KernelParams(float(policy.rates[n]), spec.mu_tau)
        out[n] = overload_mass(n, spec.capacity, prm) / spec.overload_budget
    return out


def interpolate_policy(table: TableRatePolicy) -> ContinuousRatePolicy:
    """Continue a rate table to real occupancies on [0, capacity].

    Shape-preserving quadratic spline (Schumaker construction) through the
    table values plus the boundary value zero at capacity: co-monotone
    with the data, exact at the integer nodes, C1 across pieces.
    """
    cap = table.capacity
    z = np.append(table.rates, 0.0)
    if np.any(np.diff(z) > 0.0):
        raise PolicyShapeError("table must be nonincreasing to interpolate")
    t = np.arange(cap + 1, dtype=float)
    breaks, a, b, c = _schumaker(t, z)
    return ContinuousRatePolicy(breaks, a, b, c, cap, table.mu_tau)


def _schumaker(t: np.ndarray, z: np.ndarray):
    """Schumaker's co-monotone, co-convex quadratic spline.

    Returns (breaks, a, b, c) with one coefficient triple per piece; at
    most one extra knot is inserted inside each data interval.
    """
    n = t.size - 1
    delta = np.diff(z) / np.diff(t)
    length = np.sqrt(np.diff(t) ** 2 + np.diff(z) ** 2)

    s = np.zeros(n + 1)
    for i in range(1, n):
        if delta[i - 1] * delta[i] > 0.0:
            s[i] = (length[i - 1] * delta[i - 1] + length[i] * delta[i]) / (
                length[i - 1] + length[i]
            )
    s[0] = (3.0 * delta[0] - s[1]) / 2.0
    s[n] = (3.0 * delta[n - 1] - s[n - 1]) / 2.0
    # Decreasing data: derivative estimates must stay <= 0 for co-monotonicity.
    if np.all(delta <= 0.0):
        np.minimum(s, 0.0, out=s)

    breaks, a, b, c = [], [], [], []
    for i in range(n):
        t0, t1 = t[i], t[i + 1]
        h = t1 - t0
        d = delta[i]
        s0, s1 = s[i], s[i + 1]
        if abs(s0 + s1 - 2.0 * d) <= 1e-14 * max(1.0, abs(d)):
            breaks.append(t0)
            a.append(z[i])
            b.append(s0)
            c.append((s1 - s0) / (2.0 * h))
            continue
        if (s0 - d) * (s1 - d) >= 0.0:
            knot = 0.5 * (t0 + t1)
        elif abs(s1 - d) < abs(s0 - d):
            bar = t0 + 2.0 * h * (s1 - d) / (s1 - s0)
            knot = 0.5 * (t0 + bar)
        else:
            bar = t1 + 2.0 * h * (s0 - d) / (s1 - s0)
            knot = 0.5 * (t1 + bar)
        alpha = knot - t0
        beta = t1 - knot
        sbar = (2.0 * (z[i + 1] - z[i]) - (alpha * s0 + beta * s1)) / h
        breaks.append(t0)
        a.append(z[i])
        b.append(s0)
        c.append((sbar - s0) / (2.0 * alpha))
        value_at_knot = z[i] + alpha * s0 + ((sbar - s0) / (2.0 * alpha)) * alpha**2
        breaks.append(knot)
        a.append(value_at_knot)
        b.append(sbar)
        c.append((s1 - sbar) / (2.0 * beta))
    breaks.append(t[-1])
    return (np.asarray(breaks), np.asarray(a), np.asarray(b), np.asarray(c))


def utilization_lower_bound(policy, spec: SynthesisSpec) -> UtilizationBound:
    """Fixed point of lambda(x)*tau = mu_tau*x, the stationary-mean lower
    bound for convex decreasing policies (Jensen), found by bisection to
    1e-10 absolute in x.
    """
    cap = spec.capacity
    if isinstance(policy, ConstantRatePolicy):
        x = policy.lambda_over_mu
        if x > cap:
            raise DomainError(
                f"constant load {x} exceeds capacity {cap}; no fixed point in [0, N]"
            )
        return UtilizationBound(x, x / cap)
    if isinstance(policy, TableRatePolicy):
        policy = interpolate_policy(policy)

    mu_tau = spec.mu_tau

    def h(x: float) -> float:
        return policy.lambda_tau(x, mu_tau) - mu_tau * x

    lo, hi = 0.0, float(cap)
    if h(lo) <= 0.0:
        return UtilizationBound(0.0, 0.0)
    while hi - lo > 1e-10:
        mid = 0.5 * (lo + hi)
        if h(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    x = 0.5 * (lo + hi)
    return UtilizationBound(x, x / cap)


def asymptotic_rate(n: int, spec: SynthesisSpec) -> AsymptoticRate:
    """Leading-order estimate of the solved rate: headroom minus a defect
    growing like -log(budget) * sqrt(headroom).

    Diagnostic only (never used in synthesis); the constant factor of the
    defect is loose, and the estimate is meaningless unless the headroom
    is large.
    """
    cap = spec.capacity
    if n != int(n) or n < 0:
        raise DomainError(f"state must be an integer >= 0, got {n}")
    headroom = cap - int(n)
    raw = headroom + math.log(spec.overload_budget) * math.sqrt(max(headroom, 0))
    clamped = raw < 0.0
    if clamped:
        warnings.warn(
            f"asymptotic rate estimate {raw:.3f} clamped to 0 at n={n} "
            "(outside the estimate's validity)",
            stacklevel=2,
        )
    return AsymptoticRate(max(raw, 0.0), valid=headroom >= 10, clamped=clamped)


def relaxation_time_estimate(spec: SynthesisSpec, protocol: str) -> float:
    """Time to reach the stationary regime.

    ``constant``: 1.0 in units of mean charge time (1/mu).
    ``variable``: log(N * -log(budget)) in units of the broadcast interval.
    Natural logarithms throughout.
    """
    if protocol == "constant":
        return 1.0
    if protocol == "variable":
        return math.log(spec.capacity * -math.log(spec.overload_budget))
    raise DomainError(f"protocol must be 'constant' or 'variable', got {protocol!r}")


def constant_rate_max_load(capacity, p_target: float) -> float:
    """Largest stationary mean whose overload tail stays within the target:
    inverts the Poisson upper tail at the capacity by bisection to 1e-10.
    Equals the optimal lambda0/mu of the preprogrammed scheme.
    """
    from .special_math import poisson_upper_tail

    cap = capacity_value(capacity)
    if cap < 1:
        raise DomainError(f"capacity must be >= 1, got {capacity}")
    if not 0.0 < p_target < 1.0:
        raise DomainError(f"p_target must be in (0, 1), got {p_target}")
    lo = 0.0
    hi = float(cap)
    while poisson_upper_tail(cap, hi) <= p_target:
        hi *= 2.0
    while hi - lo > 1e-10:
        mid = 0.5 * (lo + hi)
        if poisson_upper_tail(cap, mid) <= p_target:
            lo = mid
        else:
            hi = mid
    return lo


#: Fraction of low-occupancy states used for the deadband line fit.
DEADBAND_FIT_FRACTION = 0.6


def linearized_deadband_policy(table: TableRatePolicy) -> TableRatePolicy:
    """Proportional-feedback-with-deadband caricature of a solved table.

    Least-squares line through the low-occupancy portion of the table,
    clamped at zero from its root onward.  Used only for performance
    comparisons; it carries no overload guarantee.
    """
    cap = table.capacity
    window = max(2, int(round(DEADBAND_FIT_FRACTION * cap)))
    xs = np.arange(window, dtype=float)
    slope, intercept = np.polyfit(xs, table.rates[:window], 1)
    if slope >= 0.0:
        raise PolicyShapeError("deadband fit expects a decreasing table")
    line = intercept + slope * np.arange(cap)
    return TableRatePolicy(np.maximum(line, 0.0), cap, table.mu_tau)


# ---------------------------------------------------------------------------
# Serialization: rate tables as CSV plus a JSON metadata sidecar.

TABLE_HEADER = ("n", "lambda_tau")


def sidecar_path(path) -> Path:
    """The metadata file accompanying a table: ``<table path>.json``."""
    return Path(str(path) + ".json")


def write_rate_table(policy: TableRatePolicy, spec: SynthesisSpec, path) -> None:
    """Write ``n,lambda_tau`` rows (17 significant digits, lossless for
    doubles) plus the metadata sidecar."""
    if policy.capacity != spec.capacity:
        raise DomainError("policy and spec disagree on capacity")
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(",".join(TABLE_HEADER) + "\n")
        for n in range(policy.capacity):
            fh.write(f"{n},{policy.rates[n]:.17g}\n")
    from . import __version__

    meta = {
        "capacity": spec.capacity,
        "overload_budget": spec.overload_budget,
        "mu_tau": spec.mu_tau,
        "artifact_version": __version__,
    }
    with sidecar_path(path).open("w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_rate_table(path, *, mu_tau: float | None = None):
    """Read a rate table written by :func:`write_rate_table`.

    Returns ``(policy, metadata)``; metadata is None when no sidecar is
    present, in which case ``mu_tau`` must be supplied by the caller.
    """
    path = Path(path)
    meta = None
    sc = sidecar_path(path)
    if sc.exists():
        with sc.open() as fh:
            meta = json.load(fh)
    if mu_tau is None:
        if meta is None or "mu_tau" not in meta:
            raise DomainError(
                f"no metadata sidecar at {sc}; pass mu_tau explicitly"
            )
        mu_tau = float(meta["mu_tau"])
    elif meta is not None and not math.isclose(
        mu_tau, float(meta["mu_tau"]), rel_tol=1e-12
    ):
        warnings.warn(
            f"mu_tau={mu_tau} differs from the table's recorded "
            f"{meta['mu_tau']}; the rates will be reinterpreted",
            stacklevel=2,
        )

    rates = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise TableFormatError("empty table file", line=1) from None
        if [h.strip() for h in header] != list(TABLE_HEADER):
            raise TableFormatError(
                f"expected header {','.join(TABLE_HEADER)!r}, got {header!r}", line=1
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise TableFormatError(f"expected 2 columns, got {row!r}", line=lineno)
            try:
                n = int(row[0])
                rate = float(row[1])
            except ValueError:
                raise TableFormatError(f"malformed row {row!r}", line=lineno) from None
            if n != len(rates):
                raise TableFormatError(
                    f"expected state {len(rates)}, got {n}", line=lineno
                )
            rates.append(rate)
    if not rates:
        raise TableFormatError("table holds no rows", line=2)
    capacity = meta["capacity"] if meta is not None else len(rates)
    if capacity != len(rates):
        raise TableFormatError(
            f"sidecar capacity {capacity} does not match {len(rates)} rows"
        )
    return TableRatePolicy(np.asarray(rates), len(rates), mu_tau), meta
