"""scikit-learn compatible classifiers trained with DPSGD or DP-FedAvg."""

from __future__ import annotations

import math
import time
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import nn
from .accountant import (
    DEFAULT_ORDERS,
    PrivacyAccountant,
    PrivacyBudget,
    _subsampled_rdp_vec,
    accounting_sigma,
    calibrate_sigma,
    eps_at_delta,
)
from .data import UserDataset, derive_rng, poisson_batches
from .federated import BudgetExhaustedError, FedConfig, run_training
from .optimizer import (
    GRADIENT_STREAM,
    NORM_STREAM,
    ClipState,
    NoiseConfig,
    dpsgd_step,
    init_clip_state,
)

BASE_BATCH_SIZE = 128


def scaled_learning_rate(base_lr: float, batch_size: int, lr_scaling: bool) -> float:
    """Linear scaling rule anchored at a batch size of 128."""
    return base_lr * batch_size / BASE_BATCH_SIZE if lr_scaling else base_lr


def default_delta(n: int) -> float:
    return 1.0 / n**1.1


class _MLPClassifierMixin:
    def _encode_labels(self, y):
        if self.n_classes is not None:
            self.classes_ = np.arange(self.n_classes)
            if y.min() < 0 or y.max() >= self.n_classes:
                raise ValueError(f"labels must lie in [0, {self.n_classes})")
            return y.astype(np.int64)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least 2 classes")
        return encoded

    def _model_spec(self, n_features):
        widths = (n_features,) + tuple(self.hidden_layer_sizes) + (len(self.classes_),)
        return nn.ModelSpec(widths, seed=self.random_state)

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        return nn.forward(self.params_, X)

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        check_is_fitted(self, "params_")
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


class DPSGDClassifier(_MLPClassifierMixin, ClassifierMixin, BaseEstimator):
    """MLP classifier trained with DPSGD on Poisson-sampled lots.

    Parameters
    ----------
    hidden_layer_sizes : tuple of int
    noise_multiplier : float or "auto"
        Gradient noise std as a multiple of each group's clipping bound.
        ``"auto"`` calibrates the smallest value that fits ``target_epsilon``
        over ``epochs``.
    clipping : {"fixed", "adaptive"}
    clip_bound : float
        Per-group bound in fixed mode.
    alpha, beta, sigma_l2, clip_floor : float
        Adaptive schedule: bound multiplier, norm-query bound multiplier,
        norm-query noise multiplier and minimum bound.
    batch_size : int
        Expected lot size; the sampling ratio is ``batch_size / n_samples``.
    learning_rate : float
        Base learning rate, scaled by ``batch_size / 128`` when ``lr_scaling``.
    target_epsilon : float, optional
        Budget. Training stops before any step that would exceed it.
    delta : float, optional
        Defaults to ``n_samples ** -1.1``.
    private : bool
        ``False`` trains the non-private twin (plain momentum SGD on the same
        lots, no clipping or noise).
    strict_accounting : bool
        Charge ``sigma / sqrt(n_groups)`` instead of ``sigma``.
    """

    def __init__(self, hidden_layer_sizes=(256,), noise_multiplier=1.0, clipping="fixed",
                 clip_bound=2.0, alpha=1.0, beta=2.0, sigma_l2=2.5, clip_floor=1e-6,
                 batch_size=128, learning_rate=0.01, lr_scaling=False, momentum=0.0,
                 epochs=10, target_epsilon=None, delta=None, private=True,
                 strict_accounting=False, n_classes=None, record_wall_ms=False,
                 random_state=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.noise_multiplier = noise_multiplier
        self.clipping = clipping
        self.clip_bound = clip_bound
        self.alpha = alpha
        self.beta = beta
        self.sigma_l2 = sigma_l2
        self.clip_floor = clip_floor
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_scaling = lr_scaling
        self.momentum = momentum
        self.epochs = epochs
        self.target_epsilon = target_epsilon
        self.delta = delta
        self.private = private
        self.strict_accounting = strict_accounting
        self.n_classes = n_classes
        self.record_wall_ms = record_wall_ms
        self.random_state = random_state

    def _validate_params(self, n):
        if self.clipping not in ("fixed", "adaptive"):
            raise ValueError(f"clipping must be 'fixed' or 'adaptive', got {self.clipping!r}")
        if not 1 <= self.batch_size <= n:
            raise ValueError(f"batch_size must lie in [1, {n}]")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.noise_multiplier == "auto" and self.target_epsilon is None:
            raise ValueError("noise_multiplier='auto' needs target_epsilon")

    def _resolve_sigma(self, q, steps, n_groups):
        if self.noise_multiplier != "auto":
            return float(self.noise_multiplier)
        budget = PrivacyBudget(self.target_epsilon, self.delta_)
        base = None
        if self.clipping == "adaptive":
            z_norm = accounting_sigma(self.sigma_l2, n_groups, self.strict_accounting)
            base = steps * _subsampled_rdp_vec(q, z_norm, np.asarray(DEFAULT_ORDERS))
        z = calibrate_sigma(budget, q, steps, base_rdp=base)
        # calibrated value is the charged multiplier; undo the strict rescaling
        return z * math.sqrt(n_groups) if self.strict_accounting else z

    def fit(self, X, y, eval_set=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        y_enc = self._encode_labels(y)
        n = X.shape[0]
        self._validate_params(n)
        spec = self._model_spec(X.shape[1])
        params = nn.init_params(spec)
        velocity = params.zeros_like()
        m = spec.n_groups

        q = self.batch_size / n
        steps_per_epoch = n // self.batch_size
        total_steps = steps_per_epoch * self.epochs
        self.delta_ = self.delta if self.delta is not None else default_delta(n)
        self.effective_lr_ = scaled_learning_rate(self.learning_rate, self.batch_size, self.lr_scaling)
        self.noise_multiplier_ = self._resolve_sigma(q, total_steps, m) if self.private else 0.0

        if self.clipping == "adaptive":
            clip_state = init_clip_state(params, self.alpha, self.beta, self.clip_floor,
                                         derive_rng(self.random_state, "clip_init"), self.batch_size)
        else:
            clip_state = ClipState.fixed(self.clip_bound, m)
        noise = NoiseConfig(self.noise_multiplier_, self.sigma_l2, self.random_state)
        accountant = PrivacyAccountant()
        batches = poisson_batches(n, q, derive_rng(self.random_state, "sampling"))
        grad_rng = derive_rng(self.random_state, "grad_noise")
        norm_rng = derive_rng(self.random_state, "norm_noise")

        if eval_set is not None:
            X_eval = check_array(eval_set[0], dtype=np.float64)
            y_eval = self._encode_eval(eval_set[1])

        self.history_ = []
        self.stopped_early_ = False
        step = 0
        t0 = time.perf_counter()
        for epoch in range(1, self.epochs + 1):
            for _ in range(steps_per_epoch):
                idx = next(batches)
                if not self.private:
                    if len(idx):
                        _, g = nn.loss_and_grad(params, X[idx], y_enc[idx])
                        params, velocity = nn.apply_update(params, g, self.effective_lr_, self.momentum, velocity)
                    step += 1
                    continue
                if self.target_epsilon is not None and self._would_overspend(accountant, q, m):
                    if step == 0:
                        raise BudgetExhaustedError("budget does not cover a single step")
                    self.stopped_early_ = True
                    break
                params, velocity, clip_state, accountant = dpsgd_step(
                    params, velocity, X[idx], y_enc[idx], noise, clip_state,
                    self.effective_lr_, self.momentum, accountant, q, q * n,
                    grad_rng, norm_rng, self.strict_accounting,
                )
                step += 1
            row = {
                "step": step,
                "epoch": epoch,
                "eps_spent": eps_at_delta(accountant, self.delta_).epsilon if self.private else math.inf,
                "train_acc": nn.evaluate(params, X, y_enc),
                "test_acc": nn.evaluate(params, X_eval, y_eval) if eval_set is not None else math.nan,
            }
            for l, b in enumerate(clip_state.bounds):
                row[f"clip_{l}"] = float(b)
            if self.record_wall_ms:
                row["wall_ms"] = 1000.0 * (time.perf_counter() - t0)
            self.history_.append(row)
            if self.stopped_early_:
                break

        self.params_ = params
        self.velocity_ = velocity
        self.clip_state_ = clip_state
        self.accountant_ = accountant
        self.n_steps_ = step
        self.model_spec_ = spec
        return self

    def _encode_eval(self, y):
        y = np.asarray(y)
        if self.n_classes is not None:
            return y.astype(np.int64)
        idx = np.searchsorted(self.classes_, y)
        if np.any(idx >= len(self.classes_)) or np.any(self.classes_[np.minimum(idx, len(self.classes_) - 1)] != y):
            raise ValueError("eval labels contain unseen classes")
        return idx

    def _would_overspend(self, accountant, q, m):
        nxt = accountant.charge(GRADIENT_STREAM, q,
                                accounting_sigma(self.noise_multiplier_, m, self.strict_accounting))
        if self.clipping == "adaptive":
            nxt = nxt.charge(NORM_STREAM, q, accounting_sigma(self.sigma_l2, m, self.strict_accounting))
        return eps_at_delta(nxt, self.delta_).epsilon > self.target_epsilon

    @property
    def epsilon_(self) -> float:
        check_is_fitted(self, "accountant_")
        return eps_at_delta(self.accountant_, self.delta_).epsilon if self.private else math.inf


class DPFedAvgClassifier(_MLPClassifierMixin, ClassifierMixin, BaseEstimator):
    """MLP classifier trained with user-level DP federated averaging.

    ``fit`` takes ``groups``, the user id of every record; each user must own
    the same number of records. ``noise_multiplier=0`` with
    ``target_epsilon=None`` gives plain federated averaging.
    """

    def __init__(self, hidden_layer_sizes=(64,), noise_multiplier=1.0, user_fraction=1.0,
                 local_steps=5, local_lr=0.1, update_clip=1.0, rounds=100,
                 target_epsilon=None, delta=None, n_classes=None, random_state=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.noise_multiplier = noise_multiplier
        self.user_fraction = user_fraction
        self.local_steps = local_steps
        self.local_lr = local_lr
        self.update_clip = update_clip
        self.rounds = rounds
        self.target_epsilon = target_epsilon
        self.delta = delta
        self.n_classes = n_classes
        self.random_state = random_state

    def fit(self, X, y, groups, probes=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        y_enc = self._encode_labels(y)
        dataset = UserDataset.from_groups(X, y_enc, groups)
        return self.fit_users(dataset, probes)

    def fit_users(self, dataset: UserDataset, probes=None):
        """Train directly on a grouped dataset (labels already class indices)."""
        if not hasattr(self, "classes_"):
            if self.n_classes is None:
                raise ValueError("fit_users needs n_classes")
            self.classes_ = np.arange(self.n_classes)
        U = dataset.n_users
        self.delta_ = self.delta if self.delta is not None else default_delta(U)
        budget = PrivacyBudget(self.target_epsilon, self.delta_) if self.target_epsilon is not None else None
        if self.noise_multiplier == "auto":
            if budget is None:
                raise ValueError("noise_multiplier='auto' needs target_epsilon")
            sigma = calibrate_sigma(budget, self.user_fraction, self.rounds)
        else:
            sigma = float(self.noise_multiplier)
        self.noise_multiplier_ = sigma
        cfg = FedConfig(self.user_fraction, self.local_steps, self.local_lr, self.update_clip,
                        sigma, self.rounds, self.random_state)
        spec = self._model_spec(dataset.dim)
        run = run_training(dataset, spec, cfg, budget, probes)
        self.params_ = run.params
        self.accountant_ = run.accountant
        self.history_ = run.metrics
        self.model_spec_ = spec
        return self

    @property
    def epsilon_(self) -> float:
        check_is_fitted(self, "accountant_")
        return eps_at_delta(self.accountant_, self.delta_).epsilon
