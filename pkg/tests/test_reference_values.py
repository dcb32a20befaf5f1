"""Operation-level checks against externally reported noise levels and budgets."""

import numpy as np
import pytest

from dpworkbench import nn
from dpworkbench.accountant import PrivacyAccountant, PrivacyBudget, calibrate_sigma, epsilon_for
from dpworkbench.cli import cmd_calibrate
from dpworkbench.config import ExperimentConfig
from dpworkbench.optimizer import NORM_STREAM, NoiseConfig, dpsgd_step, init_clip_state

N, B, EPOCHS = 50_000, 128, 60
Q, STEPS, DELTA = B / N, (N // B) * EPOCHS, N ** -1.1
REPORTED_SIGMA = 0.7225

UNDER_RDP = ("the subsampled-Gaussian RDP bound gives eps~5.7 at sigma=0.7225 for this setting, "
             "so calibrating to eps=20 lands near sigma=0.50, outside the +-15% band")


@pytest.fixture(scope="module")
def calibrated():
    return calibrate_sigma(PrivacyBudget(20.0, DELTA), Q, STEPS)


@pytest.mark.xfail(strict=True, reason=UNDER_RDP)
def test_calibrated_sigma_near_reported_value(calibrated):
    assert abs(calibrated / REPORTED_SIGMA - 1) <= 0.15


def test_calibrated_epsilon_within_tolerance(calibrated):
    eps = epsilon_for(Q, calibrated, STEPS, DELTA)
    assert 19.95 <= eps <= 20.0


@pytest.mark.xfail(strict=True, reason=UNDER_RDP)
def test_calibrate_command_sigma_band():
    cfg = ExperimentConfig(task="calibrate", dataset_size=N, batch_size=B, epochs=EPOCHS, epsilon=20.0)
    assert 0.61 <= cmd_calibrate(cfg)["sigma"] <= 0.83


def test_calibrate_command_repeatable():
    cfg = ExperimentConfig(task="calibrate", dataset_size=N, batch_size=B, epochs=EPOCHS, epsilon=20.0)
    assert cmd_calibrate(cfg) == cmd_calibrate(cfg)


def test_adaptive_configuration_fits_same_budget():
    # sigma=0.725 with a sigma_l2=2.5 norm query, both charged, over the full schedule
    acct = PrivacyAccountant().charge("gradient", Q, 0.725, STEPS).charge(NORM_STREAM, Q, 2.5, STEPS)
    fixed = epsilon_for(Q, REPORTED_SIGMA, STEPS, DELTA)
    assert acct.epsilon(DELTA) <= 20.0 and fixed <= 20.0

    params = nn.init_params(nn.ModelSpec((8, 6, 3)))
    rng = np.random.default_rng(0)
    clip = init_clip_state(params, alpha=1.1, beta=2.0)
    res = dpsgd_step(params, params.zeros_like(), rng.random((4, 8)), rng.integers(0, 3, 4),
                     NoiseConfig(0.725, 2.5), clip, 0.01, 0.9, PrivacyAccountant(), Q, B,
                     np.random.default_rng(1), np.random.default_rng(2))
    assert res.accountant.steps(NORM_STREAM) == 1 and np.all(res.clip_state.bounds > 0)
