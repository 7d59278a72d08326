"""Meta-learned Koopman spectral analysis for short time-series.

Autodiff, dense linear algebra, data generators, the BiLSTM-conditioned
Koopman model, episodic training, baselines and an experiment harness.
"""

from .baselines import dmd_fit_predict, finetune, train_method
from .data import Dataset, GeneratorSpec, TimeSeries, generate, load_dataset, normalize, split_dataset
from .experiment import ExperimentConfig, MetricsRecord, run_experiment, sweep
from .metrics import eigenvalue_error, mean_se, rmse
from .model import ModelParams, default_hyper, init_params, predict, spectrum
from .train import TrainConfig, train_meta

__version__ = "0.1.0"

__all__ = [
    "dmd_fit_predict", "finetune", "train_method",
    "Dataset", "GeneratorSpec", "TimeSeries", "generate", "load_dataset", "normalize", "split_dataset",
    "ExperimentConfig", "MetricsRecord", "run_experiment", "sweep",
    "eigenvalue_error", "mean_se", "rmse",
    "ModelParams", "default_hyper", "init_params", "predict", "spectrum",
    "TrainConfig", "train_meta",
]
