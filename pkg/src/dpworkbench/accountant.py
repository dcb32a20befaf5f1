"""RDP accounting for the Poisson-subsampled Gaussian mechanism.

Per-step Renyi divergences are accumulated on a fixed grid of integer orders
and converted to an (epsilon, delta) guarantee with the classic bound
``eps = min_a rdp(a) + log(1/delta) / (a - 1)``.
"""

from __future__ import annotations

import csv
import functools
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.special import gammaln, logsumexp

logger = logging.getLogger(__name__)

DEFAULT_ORDERS: Tuple[int, ...] = tuple(range(2, 65)) + (128, 256)
SIGMA_BRACKET = (0.3, 100.0)
SIGMA_TOL = 1e-4


class CalibrationError(ValueError):
    """No noise multiplier inside the search bracket meets the budget."""


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float

    def __post_init__(self):
        if not (math.isfinite(self.epsilon) and self.epsilon > 0):
            raise ValueError(f"epsilon must be positive and finite, got {self.epsilon}")
        if not (0.0 < self.delta < 1.0):
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")

    def check_dataset_size(self, n: int) -> None:
        if self.delta >= 1.0 / n:
            logger.warning("delta=%g is not below 1/N=%g", self.delta, 1.0 / n)


def gaussian_rdp(sigma: float, order: float) -> float:
    """RDP of the unit-sensitivity Gaussian mechanism."""
    if order <= 1:
        raise ValueError(f"order must exceed 1, got {order}")
    if sigma < 0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    if sigma == 0:
        return math.inf
    return order / (2.0 * sigma**2)


def _log_binom(n, k):
    return gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)


def _is_integer(x) -> bool:
    return float(x).is_integer()


def subsampled_gaussian_rdp(q: float, sigma: float, order: int) -> float:
    """Per-step RDP of the Poisson-subsampled Gaussian at an integer order."""
    return float(_subsampled_rdp_vec(q, sigma, np.asarray([order]))[0])


def _subsampled_rdp_vec(q: float, sigma: float, orders: np.ndarray) -> np.ndarray:
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"sampling ratio must lie in [0, 1], got {q}")
    if sigma < 0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    orders = np.asarray(orders, dtype=np.float64)
    if np.any(orders < 2) or not all(_is_integer(a) for a in orders):
        raise ValueError("subsampled bound needs integer orders >= 2")
    if q == 0:
        return np.zeros(len(orders))
    if sigma == 0:
        return np.full(len(orders), math.inf)
    if q == 1:
        return orders / (2.0 * sigma**2)

    # log A_a = logsumexp_i [log C(a,i) + i log q + (a-i) log(1-q) + (i^2-i)/(2 sigma^2)]
    top = int(orders.max())
    i = np.arange(top + 1, dtype=np.float64)
    a = orders[:, None]
    terms = (
        _log_binom(a, i[None, :])
        + i[None, :] * math.log(q)
        + (a - i[None, :]) * math.log1p(-q)
        + (i * i - i)[None, :] / (2.0 * sigma**2)
    )
    terms = np.where(i[None, :] <= a, terms, -np.inf)
    return logsumexp(terms, axis=1) / (orders - 1)


@functools.lru_cache(maxsize=256)
def _cached_step_rdp(q: float, sigma: float, orders: Tuple[float, ...]) -> np.ndarray:
    out = _subsampled_rdp_vec(q, sigma, np.asarray(orders))
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class AccountantState:
    """Accumulated RDP of one subsampled-Gaussian stream."""

    q: float
    sigma: float
    orders: Tuple[float, ...] = DEFAULT_ORDERS
    rdp: Optional[np.ndarray] = None
    steps: int = 0

    def __post_init__(self):
        if not 0.0 <= self.q <= 1.0:
            raise ValueError(f"sampling ratio must lie in [0, 1], got {self.q}")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        orders = tuple(self.orders)
        if list(orders) != sorted(orders) or any(o <= 1 for o in orders):
            raise ValueError("orders must be ascending and > 1")
        object.__setattr__(self, "orders", orders)
        if self.rdp is None:
            object.__setattr__(self, "rdp", np.zeros(len(orders)))
        else:
            rdp = np.asarray(self.rdp, dtype=np.float64)
            if rdp.shape != (len(orders),):
                raise ValueError("rdp must have one entry per order")
            object.__setattr__(self, "rdp", rdp)

    def step_rdp(self) -> np.ndarray:
        return _cached_step_rdp(self.q, self.sigma, self.orders)

    def compose(self, steps: int = 1) -> "AccountantState":
        return compose(self, steps)


def compose(state: AccountantState, steps: int) -> AccountantState:
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    if steps == 0:
        return state
    return replace(state, rdp=state.rdp + steps * state.step_rdp(), steps=state.steps + steps)


@dataclass(frozen=True)
class PrivacyAccountant:
    """Several named mechanism streams composed over a shared order grid.

    The central trainer charges a ``"gradient"`` stream every step and, with
    adaptive clipping, a ``"norm"`` stream for the clipping-bound query.
    """

    orders: Tuple[float, ...] = DEFAULT_ORDERS
    streams: Dict[str, AccountantState] = field(default_factory=dict)

    def charge(self, name: str, q: float, sigma: float, steps: int = 1) -> "PrivacyAccountant":
        state = self.streams.get(name)
        if state is None:
            state = AccountantState(q=q, sigma=sigma, orders=self.orders)
        elif state.q != q or state.sigma != sigma:
            # heterogeneous steps on one stream: fold history into a fresh state
            state = AccountantState(q=q, sigma=sigma, orders=self.orders, rdp=state.rdp, steps=state.steps)
        streams = dict(self.streams)
        streams[name] = compose(state, steps)
        return replace(self, streams=streams)

    @property
    def rdp(self) -> np.ndarray:
        total = np.zeros(len(self.orders))
        for s in self.streams.values():
            total = total + s.rdp
        return total

    def steps(self, name: str) -> int:
        s = self.streams.get(name)
        return 0 if s is None else s.steps

    def epsilon(self, delta: float) -> float:
        return eps_at_delta(self, delta).epsilon


class EpsilonResult(NamedTuple):
    epsilon: float
    order: float


def eps_at_delta(state, delta: float) -> EpsilonResult:
    """Smallest epsilon over the order grid for the given delta.

    ``state`` is anything exposing ``orders`` and accumulated ``rdp``.
    """
    if not 0.0 < delta <= 1.0:
        raise ValueError(f"delta must lie in (0, 1], got {delta}")
    orders = np.asarray(state.orders, dtype=np.float64)
    if orders.size == 0:
        raise ValueError("empty order grid")
    rdp = np.asarray(state.rdp, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        eps = rdp + math.log(1.0 / delta) / (orders - 1)
    eps = np.where(np.isnan(eps), np.inf, eps)
    k = int(np.argmin(eps))
    return EpsilonResult(float(eps[k]), float(orders[k]))


def epsilon_for(q: float, sigma: float, steps: int, delta: float,
                orders: Sequence[float] = DEFAULT_ORDERS,
                base_rdp: Optional[np.ndarray] = None) -> float:
    rdp = steps * _subsampled_rdp_vec(q, sigma, np.asarray(orders))
    if base_rdp is not None:
        rdp = rdp + base_rdp
    return eps_at_delta(_Grid(tuple(orders), rdp), delta).epsilon


class _Grid(NamedTuple):
    orders: Tuple[float, ...]
    rdp: np.ndarray


def calibrate_sigma(
    budget: PrivacyBudget,
    q: float,
    steps: int,
    orders: Sequence[float] = DEFAULT_ORDERS,
    base_rdp: Optional[np.ndarray] = None,
    bracket: Tuple[float, float] = SIGMA_BRACKET,
    tol: float = SIGMA_TOL,
) -> float:
    """Smallest noise multiplier whose epsilon after ``steps`` stays within budget.

    ``base_rdp`` is RDP already committed elsewhere (for example a norm-query
    stream) and is added before converting to epsilon. Returns the upper end
    of a bisection interval narrower than ``tol``.
    """
    if not 0.0 < q <= 1.0:
        raise ValueError(f"sampling ratio must lie in (0, 1], got {q}")
    if steps < 1:
        raise ValueError("steps must be at least 1")

    def eps(sigma):
        return epsilon_for(q, sigma, steps, budget.delta, orders, base_rdp)

    lo, hi = bracket
    if eps(hi) > budget.epsilon:
        raise CalibrationError(
            f"epsilon={budget.epsilon} unreachable with sigma <= {hi} "
            f"(q={q}, steps={steps}, delta={budget.delta})"
        )
    if eps(lo) <= budget.epsilon:
        return lo
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if eps(mid) <= budget.epsilon:
            hi = mid
        else:
            lo = mid
    return hi


class NoiseRow(NamedTuple):
    batch_size: int
    sigma_min: float
    noise_per_example: float
    eps_achieved: float


NOISE_TABLE_HEADER = ("batch_size", "sigma_min", "noise_per_example", "eps_achieved")


def noise_per_example_table(
    budget: PrivacyBudget,
    dataset_size: int,
    epochs: int,
    batch_sizes: Iterable[int],
    orders: Sequence[float] = DEFAULT_ORDERS,
) -> List[NoiseRow]:
    """Minimal noise multiplier and noise std per aggregated example for each batch size.

    Rows whose calibration fails carry NaN values instead of aborting the table.
    """
    rows = []
    for b in sorted(set(int(b) for b in batch_sizes)):
        if not 1 <= b <= dataset_size:
            raise ValueError(f"batch size {b} outside [1, {dataset_size}]")
        q = b / dataset_size
        steps = (dataset_size // b) * epochs
        try:
            sigma = calibrate_sigma(budget, q, steps, orders)
        except CalibrationError as exc:
            logger.warning("batch size %d: %s", b, exc)
            rows.append(NoiseRow(b, math.nan, math.nan, math.nan))
            continue
        eps = epsilon_for(q, sigma, steps, budget.delta, orders)
        rows.append(NoiseRow(b, sigma, sigma / b, eps))
    return rows


def write_noise_table_csv(rows: Sequence[NoiseRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(NOISE_TABLE_HEADER)
        for r in rows:
            writer.writerow([r.batch_size, repr(r.sigma_min), repr(r.noise_per_example), repr(r.eps_achieved)])


def accounting_sigma(sigma: float, n_groups: int, strict: bool = False) -> float:
    """Noise multiplier charged to the accountant for per-group noise ``sigma``.

    Each group is clipped to its own bound and noised at ``sigma`` times that
    bound. By default the charge is ``sigma``; ``strict`` charges the joint
    release of ``n_groups`` groups as ``sigma / sqrt(n_groups)``.
    """
    if strict:
        return sigma / math.sqrt(n_groups)
    return sigma
