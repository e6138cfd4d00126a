"""dtrbench: dynamic-treatment-regime simulation and counterfactual estimation.

Simulates an HIV-like longitudinal panel with time-varying confounding,
informative censoring and absorbing treatment; computes inverse-probability
weights; and estimates counterfactual mean outcomes under static and
CD4-threshold regimes with IPTW, MSM, sequential g-computation, LTMLE and a
two-step weighted outcome-regression estimator backed by deep-kernel GP or
neural-network regressors.
"""

from .errors import (
    DataIntegrityError,
    DtrBenchError,
    EstimationError,
    InvalidParameterError,
)

__all__ = [
    "DataIntegrityError",
    "DtrBenchError",
    "EstimationError",
    "InvalidParameterError",
]

__version__ = "0.1.0"
