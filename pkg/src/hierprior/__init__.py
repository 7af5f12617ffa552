"""Hyperprior analysis and MCMC for the exchangeable multivariate normal model."""

from .analysis import (
    Admissibility,
    AdmissibilityVerdict,
    Propriety,
    ProprietyVerdict,
    check_propriety,
    classify_admissibility,
    minimal_proper_m,
    recommend_default,
    verdict_records,
)
from .core import (
    BetaCase,
    BetaPriorSpec,
    ChainState,
    DegenerateSpectrumError,
    Eigendecomp,
    HyperpriorSpec,
    ModelData,
    ModelError,
    VPriorName,
    VPriorParams,
    eigendecompose,
    log_beta_prior_density,
    log_lambda_prior_density,
    log_v_prior_density,
    named_v_prior,
    sample_haar_orthogonal,
    sample_inverse_wishart,
)

__version__ = "0.1.0"
