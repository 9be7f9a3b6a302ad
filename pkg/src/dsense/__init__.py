"""Design sensitivity for weighted observational studies.

Compare plain, trimmed and augmented inverse-propensity-weighted designs by
their asymptotic robustness to unmeasured confounding under the
variance-based (VBM) and marginal (MSM) sensitivity models.
"""

__version__ = "0.1.0"
