"""Differentially private training workbench."""

from .accountant import (
    AccountantState,
    CalibrationError,
    PrivacyAccountant,
    PrivacyBudget,
    calibrate_sigma,
    compose,
    eps_at_delta,
    gaussian_rdp,
    noise_per_example_table,
    subsampled_gaussian_rdp,
)
from .estimators import DPFedAvgClassifier, DPSGDClassifier

__all__ = [
    "AccountantState",
    "CalibrationError",
    "DPFedAvgClassifier",
    "DPSGDClassifier",
    "PrivacyAccountant",
    "PrivacyBudget",
    "calibrate_sigma",
    "compose",
    "eps_at_delta",
    "gaussian_rdp",
    "noise_per_example_table",
    "subsampled_gaussian_rdp",
]

__version__ = "0.1.0"
