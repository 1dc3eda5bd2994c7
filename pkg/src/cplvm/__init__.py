"""Contrastive Poisson latent variable models for case-control count data."""

__version__ = "0.1.0"

from cplvm.counts import (
    ContrastivePair,
    CountDataError,
    CountMatrix,
    GeneSetCollection,
    SizeFactorPrior,
    empirical_size_prior,
    load_counts,
    load_gene_sets,
    poisson_deviance_per_gene,
    save_counts,
    select_top_genes,
    shuffle_conditions,
)
from cplvm.model import GeneSetMask, ModelSpec, apply_variant, log_joint, sample_generative
from cplvm.inference import FitConfig, FitResult, VariationalState, elbo_estimate, fit
from cplvm.hypothesis import EbfResult, RocCurve, decide, geneset_test, global_test, roc

__all__ = [
    "ContrastivePair",
    "CountDataError",
    "CountMatrix",
    "EbfResult",
    "FitConfig",
    "FitResult",
    "GeneSetCollection",
    "GeneSetMask",
    "ModelSpec",
    "RocCurve",
    "SizeFactorPrior",
    "VariationalState",
    "apply_variant",
    "decide",
    "elbo_estimate",
    "empirical_size_prior",
    "fit",
    "geneset_test",
    "global_test",
    "load_counts",
    "load_gene_sets",
    "log_joint",
    "poisson_deviance_per_gene",
    "roc",
    "sample_generative",
    "save_counts",
    "select_top_genes",
    "shuffle_conditions",
]
