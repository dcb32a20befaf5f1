"""User-level DP federated averaging simulator."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .accountant import PrivacyAccountant, PrivacyBudget, eps_at_delta
from .data import UserDataset, derive_rng
from .nn import ModelParams, ModelSpec, evaluate, init_params, loss_and_grad

USER_STREAM = "user"
METRICS_HEADER = ("round", "eps", "global_acc", "pattern_recall")


class BudgetExhaustedError(RuntimeError):
    """The privacy budget does not allow a single training step."""


@dataclass(frozen=True)
class FedConfig:
    user_fraction: float = 1.0
    local_steps: int = 5
    local_lr: float = 0.1
    update_clip: float = 1.0
    sigma: float = 1.0
    rounds: int = 100
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.user_fraction <= 1.0:
            raise ValueError("user_fraction must lie in (0, 1]")
        if self.local_steps < 1 or self.rounds < 1:
            raise ValueError("local_steps and rounds must be at least 1")
        if self.local_lr <= 0 or self.update_clip <= 0:
            raise ValueError("local_lr and update_clip must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")


def local_update(global_params: ModelParams, inputs, labels, local_steps: int,
                 local_lr: float) -> List[np.ndarray]:
    """Full-batch local SGD on one user's records; returns ``final - global`` per group."""
    inputs = np.asarray(inputs)
    if len(inputs) == 0:
        raise ValueError("user has no records")
    params = global_params
    for _ in range(local_steps):
        _, grads = loss_and_grad(params, inputs, labels)
        params = ModelParams.from_groups([p - local_lr * g for p, g in zip(params.groups(), grads)])
    return [p - g for p, g in zip(params.groups(), global_params.groups())]


def local_updates(global_params: ModelParams, inputs: np.ndarray, labels: np.ndarray,
                  local_steps: int, local_lr: float) -> List[np.ndarray]:
    """:func:`local_update` for many equal-sized users at once.

    ``inputs`` is ``(S, R, d)``; every returned group has a leading user axis.
    """
    S, R, _ = inputs.shape
    if R == 0:
        raise ValueError("users have no records")
    ws = [np.repeat(w[None], S, axis=0) for w in global_params.weights]
    bs = [np.repeat(b[None], S, axis=0) for b in global_params.biases]
    onehot = np.zeros((S, R, ws[-1].shape[2]))
    np.put_along_axis(onehot, labels[..., None].astype(np.int64), 1.0, axis=2)
    last = len(ws) - 1
    for _ in range(local_steps):
        acts = [inputs]
        h = inputs
        for i, (w, b) in enumerate(zip(ws, bs)):
            z = h @ w + b[:, None, :]
            h = z if i == last else np.maximum(z, 0.0)
            acts.append(h)
        z = acts[-1] - acts[-1].max(axis=2, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=2, keepdims=True)
        delta = (p - onehot) / R
        for i in range(last, -1, -1):
            gw = np.swapaxes(acts[i], 1, 2) @ delta
            gb = delta.sum(axis=1)
            if i:
                delta = (delta @ np.swapaxes(ws[i], 1, 2)) * (acts[i] > 0)
            ws[i] = ws[i] - local_lr * gw
            bs[i] = bs[i] - local_lr * gb
    out = []
    for w, b, w0, b0 in zip(ws, bs, global_params.weights, global_params.biases):
        out.extend((w - w0[None], b - b0[None]))
    return out


def sample_users(n_users: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Poisson user sampling: each user joins independently with probability ``fraction``."""
    if fraction == 1.0:
        return np.arange(n_users)
    return np.flatnonzero(rng.random(n_users) < fraction)


def clip_update(delta: Sequence[np.ndarray], bound: float) -> List[np.ndarray]:
    """Scale the whole concatenated delta to l2 norm at most ``bound``."""
    norm = math.sqrt(sum(float(np.sum(d * d)) for d in delta))
    scale = 1.0 / max(1.0, norm / bound) if math.isfinite(bound) else 1.0
    return [d * scale for d in delta]


def server_aggregate(clipped: Sequence[Sequence[np.ndarray]], shapes, bound: float, sigma: float,
                     denominator: float, rng: Optional[np.random.Generator]) -> List[np.ndarray]:
    """``(sum of clipped deltas + N(0, (sigma * bound)^2)) / denominator`` per coordinate."""
    total = [np.zeros(s) for s in shapes]
    for delta in clipped:
        for acc, d in zip(total, delta):
            acc += d
    if sigma > 0:
        total = [t + rng.normal(0.0, sigma * bound, size=t.shape) for t in total]
    return [t / denominator for t in total]


class RoundResult(NamedTuple):
    params: ModelParams
    accountant: PrivacyAccountant
    sampled: np.ndarray


def run_round(global_params: ModelParams, dataset: UserDataset, cfg: FedConfig,
              accountant: PrivacyAccountant, sample_rng: np.random.Generator,
              noise_rng: np.random.Generator) -> RoundResult:
    """Sample users, collect clipped local deltas, add server noise, update the model."""
    U = dataset.n_users
    sampled = sample_users(U, cfg.user_fraction, sample_rng)
    clipped = []
    if len(sampled):
        stacked = local_updates(global_params, dataset.inputs[sampled], dataset.labels[sampled],
                                cfg.local_steps, cfg.local_lr)
        for k in range(len(sampled)):
            clipped.append(clip_update([g[k] for g in stacked], cfg.update_clip))
    shapes = [g.shape for g in global_params.groups()]
    agg = server_aggregate(clipped, shapes, cfg.update_clip, cfg.sigma, cfg.user_fraction * U, noise_rng)
    params = ModelParams.from_groups([p + a for p, a in zip(global_params.groups(), agg)])
    accountant = accountant.charge(USER_STREAM, cfg.user_fraction, cfg.sigma)
    return RoundResult(params, accountant, sampled)


@dataclass
class FederatedRun:
    params: ModelParams
    accountant: PrivacyAccountant
    metrics: List[Dict[str, float]] = field(default_factory=list)


def run_training(dataset: UserDataset, model_spec: ModelSpec, cfg: FedConfig,
                 budget: Optional[PrivacyBudget] = None,
                 probes: Optional[Dict[str, Tuple[np.ndarray, np.ndarray]]] = None,
                 params: Optional[ModelParams] = None) -> FederatedRun:
    """Run rounds until ``cfg.rounds`` or until the next round would overspend ``budget``.

    ``global_acc`` is measured on the full training data; ``pattern_recall``
    on ``probes["pattern"]`` when given, else NaN. A budget of ``None`` (or a
    zero noise multiplier with no budget) disables the privacy stop.
    """
    if model_spec.layer_widths[0] != dataset.dim:
        raise ValueError("model input width does not match dataset dimension")
    probes = probes or {}
    params = init_params(model_spec) if params is None else params
    accountant = PrivacyAccountant()
    sample_rng = derive_rng(cfg.seed, "user_sampling")
    noise_rng = derive_rng(cfg.seed, "server_noise")
    X_all, y_all = dataset.flat()
    run = FederatedRun(params, accountant)
    for r in range(cfg.rounds):
        if budget is not None:
            nxt = accountant.charge(USER_STREAM, cfg.user_fraction, cfg.sigma)
            if eps_at_delta(nxt, budget.delta).epsilon > budget.epsilon:
                if r == 0:
                    raise BudgetExhaustedError("budget does not cover a single round")
                break
        params, accountant, _ = run_round(params, dataset, cfg, accountant, sample_rng, noise_rng)
        eps = eps_at_delta(accountant, budget.delta).epsilon if budget is not None else math.inf
        row = {
            "round": r + 1,
            "eps": eps,
            "global_acc": evaluate(params, X_all, y_all),
            "pattern_recall": evaluate(params, *probes["pattern"]) if "pattern" in probes else math.nan,
        }
        run.metrics.append(row)
    run.params, run.accountant = params, accountant
    return run


def write_metrics_csv(rows: Sequence[Dict[str, float]], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for row in rows:
            writer.writerow([row["round"], repr(row["eps"]), repr(row["global_acc"]), repr(row["pattern_recall"])])
