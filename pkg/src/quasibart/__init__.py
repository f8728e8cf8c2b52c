"""Quasi-likelihood Bayesian additive regression trees."""

from .backfit import SamplerConfig, init_state, run_chain
from .dispersion import DispersionConfig
from .family import Dataset, QuasiFamily, family_from_name
from .forest import Ensemble, TreePrior
from .summaries import Draws

__all__ = ["Dataset", "DispersionConfig", "Draws", "Ensemble", "QuasiFamily", "SamplerConfig", "TreePrior",
           "family_from_name", "init_state", "run_chain"]
__version__ = "0.1.0"
