"""DPSGD with per-group clipping and the adaptive clipping-bound schedule."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, NamedTuple, Optional, Tuple

import numpy as np

from .accountant import PrivacyAccountant, accounting_sigma
from .nn import ModelParams, PerExampleGrads, apply_update, loss_and_per_example_grads

DEFAULT_FLOOR = 1e-6
GRADIENT_STREAM = "gradient"
NORM_STREAM = "norm"


@dataclass(frozen=True)
class NoiseConfig:
    sigma: float
    sigma_l2: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0 or self.sigma_l2 < 0:
            raise ValueError("noise multipliers must be nonnegative")


@dataclass(frozen=True)
class ClipState:
    """Per-group gradient bounds and norm-query bounds.

    With ``adaptive=False`` the gradient bounds never change and the norm
    bounds are unused.
    """

    bounds: np.ndarray
    norm_bounds: np.ndarray
    alpha: float = 1.0
    beta: float = 2.0
    floor: float = DEFAULT_FLOOR
    t: int = 0
    adaptive: bool = True

    def __post_init__(self):
        object.__setattr__(self, "bounds", np.asarray(self.bounds, dtype=np.float64))
        object.__setattr__(self, "norm_bounds", np.asarray(self.norm_bounds, dtype=np.float64))
        if self.alpha <= 0 or self.beta <= 0 or self.floor <= 0:
            raise ValueError("alpha, beta and floor must be positive")
        if np.any(self.bounds <= 0):
            raise ValueError("clipping bounds must be positive")

    @classmethod
    def fixed(cls, bound, n_groups: int) -> "ClipState":
        b = np.broadcast_to(np.asarray(bound, dtype=np.float64), (n_groups,)).copy()
        return cls(bounds=b, norm_bounds=b.copy(), adaptive=False)

    @property
    def n_groups(self) -> int:
        return len(self.bounds)


def clip_per_example(grads: PerExampleGrads, bounds) -> Tuple[PerExampleGrads, np.ndarray]:
    """Scale each example-group gradient by ``1 / max(1, norm / C)``.

    Returns the clipped gradients and the clipped norms ``min(norm, C)``.
    """
    bounds = np.asarray(bounds, dtype=np.float64)
    norms = grads.norms()
    if norms.size and np.any(bounds <= 0):
        raise ValueError("clipping bounds must be positive")
    scale = 1.0 / np.maximum(1.0, norms / bounds[None, :])
    clipped = []
    for l, g in enumerate(grads.groups):
        shape = (-1,) + (1,) * (g.ndim - 1)
        clipped.append(g * scale[:, l].reshape(shape))
    return PerExampleGrads(clipped), norms * scale


def noisy_aggregate(clipped: PerExampleGrads, bounds, sigma: float, lot_size: float,
                    rng: np.random.Generator, shapes=None) -> List[np.ndarray]:
    """Per group: ``(sum of clipped grads + N(0, (sigma * C)^2)) / lot_size``.

    ``shapes`` gives parameter shapes when the batch is empty.
    """
    if lot_size <= 0:
        raise ValueError("lot_size must be positive")
    bounds = np.asarray(bounds, dtype=np.float64)
    if clipped.groups:
        sums = clipped.sum()
    else:
        sums = [np.zeros(s) for s in shapes]
    out = []
    for l, s in enumerate(sums):
        if sigma > 0:
            s = s + rng.normal(0.0, sigma * bounds[l], size=s.shape)
        out.append(s / lot_size)
    return out


def private_mean_norms(norms, clip_state: ClipState, sigma_l2: float, lot_size: float,
                       rng: np.random.Generator) -> np.ndarray:
    """Per group: ``(sum_i min(norm_i, C_l2) + N(0, (sigma_l2 * C_l2)^2)) / lot_size``."""
    if lot_size <= 0:
        raise ValueError("lot_size must be positive")
    norms = np.asarray(norms, dtype=np.float64).reshape(-1, clip_state.n_groups)
    cb = clip_state.norm_bounds
    total = np.minimum(norms, cb[None, :]).sum(axis=0)
    if sigma_l2 > 0:
        total = total + rng.normal(0.0, sigma_l2 * cb)
    return total / lot_size


def init_clip_state(params: ModelParams, alpha: float = 1.0, beta: float = 2.0,
                    floor: float = DEFAULT_FLOOR, rng: Optional[np.random.Generator] = None,
                    batch_size: int = 128) -> ClipState:
    """Seed the schedule from one pass over a synthetic random-noise batch.

    The norm-query bound starts at the mean per-example gradient norm of each
    group on that batch and the gradient bound at ``alpha`` times it. The batch
    holds no private data, so this costs no privacy.
    """
    if alpha <= 0 or beta <= 0:
        raise ValueError("alpha and beta must be positive")
    rng = np.random.default_rng(0) if rng is None else rng
    widths = params.layer_widths
    X = rng.random((batch_size, widths[0]))
    y = rng.integers(0, widths[-1], size=batch_size)
    _, grads = loss_and_per_example_grads(params, X, y)
    mean_norms = grads.norms().mean(axis=0)
    norm_bounds = np.maximum(floor, mean_norms)
    bounds = np.maximum(floor, alpha * mean_norms)
    return ClipState(bounds=bounds, norm_bounds=norm_bounds, alpha=alpha, beta=beta, floor=floor)


def advance_clip_state(state: ClipState, dp_mean_norms) -> ClipState:
    """Next round's bounds: ``C = max(floor, alpha * mean)`` and ``C_l2 = beta * C_prev``."""
    if not state.adaptive:
        return replace(state, t=state.t + 1)
    m = np.asarray(dp_mean_norms, dtype=np.float64)
    bounds = np.maximum(state.floor, state.alpha * m)
    norm_bounds = np.maximum(state.floor, state.beta * state.bounds)
    return replace(state, bounds=bounds, norm_bounds=norm_bounds, t=state.t + 1)


class StepResult(NamedTuple):
    params: ModelParams
    velocity: ModelParams
    clip_state: ClipState
    accountant: PrivacyAccountant


def dpsgd_step(
    params: ModelParams,
    velocity: ModelParams,
    inputs,
    labels,
    noise: NoiseConfig,
    clip_state: ClipState,
    lr: float,
    momentum: float,
    accountant: PrivacyAccountant,
    q: float,
    lot_size: float,
    grad_rng: np.random.Generator,
    norm_rng: Optional[np.random.Generator] = None,
    strict_accounting: bool = False,
) -> StepResult:
    """One private step on a (possibly empty) Poisson batch.

    Clips each example's gradient per group, adds Gaussian noise scaled to the
    group bound, divides by the nominal lot size and takes a momentum step.
    In adaptive mode the raw per-example norms of this batch feed a private
    mean-norm query that sets the next step's bounds. The accountant is charged
    one gradient release and, when adaptive, one norm release.
    """
    m = params.n_groups
    inputs = np.asarray(inputs, dtype=np.float64).reshape(-1, params.weights[0].shape[0])
    _, grads = loss_and_per_example_grads(params, inputs, labels)
    clipped, _ = clip_per_example(grads, clip_state.bounds)
    shapes = [g.shape for g in params.groups()]
    update = noisy_aggregate(clipped, clip_state.bounds, noise.sigma, lot_size, grad_rng, shapes)
    params, velocity = apply_update(params, update, lr, momentum, velocity)

    accountant = accountant.charge(GRADIENT_STREAM, q, accounting_sigma(noise.sigma, m, strict_accounting))
    if clip_state.adaptive:
        if norm_rng is None:
            raise ValueError("adaptive clipping needs a norm noise generator")
        raw_norms = grads.norms() if grads.batch_size else np.zeros((0, m))
        dp_norms = private_mean_norms(raw_norms, clip_state, noise.sigma_l2, lot_size, norm_rng)
        clip_state = advance_clip_state(clip_state, dp_norms)
        accountant = accountant.charge(NORM_STREAM, q, accounting_sigma(noise.sigma_l2, m, strict_accounting))
    else:
        clip_state = advance_clip_state(clip_state, None)
    return StepResult(params, velocity, clip_state, accountant)
