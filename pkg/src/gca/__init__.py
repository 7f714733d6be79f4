"""Granger-causal domain adaptation for multivariate time-series forecasting."""

from .autodiff import NumericError, ShapeError, Tensor, no_grad
from .data import Dataset, DomainConfig, NormStats, WeightedLagStructure
from .metrics import EvalReport, auprc, evaluate, export_structures, forecast_metrics
from .model import FullTimeGraph, ModelConfig, ModelParams, forecast
from .objectives import Hyper, elbo, total_loss
from .trainer import TrainConfig, train

__version__ = "0.1.0"
