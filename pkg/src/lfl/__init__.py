"""Latent-feature linear Gaussian models with hypergeometric feature allocation."""

from lfl.core import Dataset, FitReport, Hyperpriors, LatentState, PriorSpec, center, mae, reconstruct

__version__ = "0.1.0"

__all__ = ["Dataset", "FitReport", "Hyperpriors", "LatentState", "PriorSpec", "center", "mae", "reconstruct"]
