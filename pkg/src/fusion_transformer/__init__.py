"""Pure-encoder Transformers for time series, images and their fusion.

Built on a small reverse-mode autodiff core (:mod:`.tensor`). The usual entry
points are :func:`preset` / :func:`build` for models, :func:`fit` for training
and :func:`save` / :func:`load` for checkpoints.
"""

from .errors import (CheckpointError, ConfigError, ContractError, DataError, DimensionError,
                     FusionTransformerError, InputError, NumericalError, SchemaError, VersionError)
from .models import (TABLE_ONE, Checkpoint, Hyperparameters, InputHeadSpec, Model, ModelSpec, TaskHead,
                     build, count_parameters, forward, load, load_checkpoint, preset, save,
                     spec_from_hyperparameters)
from .tensor import GradTape, Tensor, backward
from .training import (LRSchedule, MultiTaskLossSpec, OptimizerState, TrainReport, accuracy, adam_step,
                       evaluate, fit, lr_schedule, mae, mse, scce, sweep)

__all__ = [
    'CheckpointError', 'ConfigError', 'ContractError', 'DataError', 'DimensionError',
    'FusionTransformerError', 'InputError', 'NumericalError', 'SchemaError', 'VersionError', 'TABLE_ONE',
    'Checkpoint', 'Hyperparameters', 'InputHeadSpec', 'Model', 'ModelSpec', 'TaskHead', 'build',
    'count_parameters', 'forward', 'load', 'load_checkpoint', 'preset', 'save', 'spec_from_hyperparameters',
    'GradTape', 'Tensor', 'backward', 'LRSchedule', 'MultiTaskLossSpec', 'OptimizerState', 'TrainReport',
    'accuracy', 'adam_step', 'evaluate', 'fit', 'lr_schedule', 'mae', 'mse', 'scce', 'sweep',
]

__version__ = "0.1.0"
