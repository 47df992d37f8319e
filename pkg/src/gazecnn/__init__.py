"""Appearance-based gaze estimation with a small numpy CNN.

Two eye crops and the head pose go in, gaze pitch and yaw (degrees) come out.
Everything, including backpropagation and Adam, is written directly in numpy.
"""
from gazecnn.estimator import GazeRegressor, check_samples
from gazecnn.harness import TrainConfig, cross_dataset_matrix, cross_validate, evaluate, train
from gazecnn.model import build, forward, backward, load, param_count, save

__version__ = "0.1.0"

__all__ = [
    "GazeRegressor", "TrainConfig", "backward", "build", "check_samples",
    "cross_dataset_matrix", "cross_validate", "evaluate", "forward", "load",
    "param_count", "save", "train",
]
