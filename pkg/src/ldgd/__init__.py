"""Latent double-GP decoder.

A shared low-dimensional latent variable drives two Gaussian processes: one
generating continuous observations (e.g. neural features), one generating
one-hot labels through a sigmoid. Training maximizes a sparse variational
evidence lower bound; decoding infers a test point's latent from continuous
observations alone and reads label probabilities off the discrete generative
path.
"""

from .data import (
    FeatureRanking,
    FeatureScaler,
    FoldSplit,
    SynthConfig,
    kfold_split,
    load_dataset,
    plain_kfold_split,
    point_biserial,
    save_dataset,
    select_top_k,
    synth_generate,
)
from .decoding import (
    DecodeResult,
    Metrics,
    TestLatent,
    decode_latent,
    evaluate,
    infer_latent,
    objective_at_latent,
    predict_labels,
)
from .errors import DimensionMismatch, NotPositiveDefinite, NumericalError, ValidationError
from .kernels import GramMatrix, KernelParams, ard_rbf, ard_rbf_grad_log_lengthscales, gram
from .linalg import (
    CholeskyFactor,
    chol_jitter,
    kl_diag_standard,
    kl_full_vs_prior,
    reparam_sample,
)
from .bundle import ModelBundle
from .model import (
    Dataset,
    ElboBreakdown,
    InducingVariational,
    LatentVariational,
    MarginalGaussians,
    ModelConfig,
    ModelState,
    NoiseParams,
    elbo,
    ell_continuous,
    ell_discrete,
    generate,
    sample_latent,
    svgp_marginal,
)
from .training import (
    AdamMoments,
    GradCheckReport,
    TrainConfig,
    TrainTrace,
    adam_step,
    fit,
    grad_check,
    gradcheck_instance,
    init_model,
)

__version__ = "0.1.0"

__all__ = [
    "AdamMoments",
    "CholeskyFactor",
    "Dataset",
    "DecodeResult",
    "DimensionMismatch",
    "ElboBreakdown",
    "FeatureRanking",
    "FeatureScaler",
    "FoldSplit",
    "GradCheckReport",
    "GramMatrix",
    "InducingVariational",
    "KernelParams",
    "LatentVariational",
    "MarginalGaussians",
    "Metrics",
    "ModelBundle",
    "ModelConfig",
    "ModelState",
    "NoiseParams",
    "NotPositiveDefinite",
    "NumericalError",
    "SynthConfig",
    "TestLatent",
    "TrainConfig",
    "TrainTrace",
    "ValidationError",
    "adam_step",
    "ard_rbf",
    "ard_rbf_grad_log_lengthscales",
    "chol_jitter",
    "decode_latent",
    "elbo",
    "ell_continuous",
    "ell_discrete",
    "evaluate",
    "fit",
    "generate",
    "grad_check",
    "gradcheck_instance",
    "gram",
    "infer_latent",
    "init_model",
    "kfold_split",
    "kl_diag_standard",
    "kl_full_vs_prior",
    "load_dataset",
    "objective_at_latent",
    "plain_kfold_split",
    "point_biserial",
    "predict_labels",
    "reparam_sample",
    "sample_latent",
    "save_dataset",
    "select_top_k",
    "svgp_marginal",
    "synth_generate",
]
