"""Certified robustness for ensembles of smooth classifiers under randomized smoothing."""

from . import autodiff, data, ensemble, model, numstats, smoothing, statsim, training
from .ensemble import EnsembleSpec, mme_predict, we_predict
from .model import MlpClassifier
from .smoothing import SmoothingSpec, certify_eas, certify_ebs
from .training import TrainingConfig, train

__version__ = "0.1.0"

__all__ = [
    "autodiff", "data", "ensemble", "model", "numstats", "smoothing", "statsim", "training",
    "EnsembleSpec", "MlpClassifier", "SmoothingSpec", "TrainingConfig",
    "certify_ebs", "certify_eas", "mme_predict", "we_predict", "train",
]
