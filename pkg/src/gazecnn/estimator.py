"""scikit-learn compatible wrapper around the training harness."""
from __future__ import annotations

from dataclasses import fields
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from gazecnn import model as M
from gazecnn import harness as H
from gazecnn import optim
from gazecnn.data import GazeSample, preprocess_batch


def check_samples(X, y=None) -> list[GazeSample]:
    """Validate ``X`` as a non-empty sequence of :class:`GazeSample`.

    When ``y`` is given it must be ``n x 2`` (pitch, yaw) in degrees and
    replaces the samples' own gaze labels.
    """
    if isinstance(X, GazeSample):
        raise TypeError("X must be a sequence of GazeSample, not a single sample")
    samples = list(X)
    if not samples:
        raise ValueError("X is empty")
    bad = [type(s).__name__ for s in samples if not isinstance(s, GazeSample)]
    if bad:
        raise TypeError(f"X must contain GazeSample objects, found {sorted(set(bad))}")
    if y is not None:
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (len(samples), 2):
            raise ValueError(f"y must have shape ({len(samples)}, 2), got {y.shape}")
        if not np.all(np.isfinite(y)):
            raise ValueError("y contains non-finite values")
        samples = [GazeSample(s.left_eye, s.right_eye, s.head_pose, (float(p), float(q)),
                              s.subject_id, s.domain) for s, (p, q) in zip(samples, y)]
    return samples


class GazeRegressor(RegressorMixin, BaseEstimator):
    """Eye-pair + head-pose -> (pitch, yaw) regressor.

    Hyperparameters mirror :class:`gazecnn.harness.TrainConfig`; ``fit``
    trains with early stopping on a subject-disjoint validation split.

    Attributes
    ----------
    net_ : GazeNet
        Best-validation snapshot.
    history_ : list of dict
        Per-epoch training loss and validation MAE.
    """

    def __init__(self, max_epochs=200, batch_size=32, lr=1e-3, beta1=0.9, beta2=0.999,
                 eps=1e-8, patience=10, val_fraction=0.1, mirror=True, seed=0,
                 overfit=False, max_steps=None, target_mae=None, zero_head_pose=False,
                 precision="single"):
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.patience = patience
        self.val_fraction = val_fraction
        self.mirror = mirror
        self.seed = seed
        self.overfit = overfit
        self.max_steps = max_steps
        self.target_mae = target_mae
        self.zero_head_pose = zero_head_pose
        self.precision = precision

    def _config(self) -> H.TrainConfig:
        return H.TrainConfig(**{f.name: getattr(self, f.name) for f in fields(H.TrainConfig)})

    def fit(self, X: Sequence[GazeSample], y=None):
        samples = check_samples(X, y)
        result = H.train(samples, self._config())
        self.net_ = result.net
        self.history_ = result.history
        self.n_steps_ = result.steps
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        samples = check_samples(X)
        eyes, pose = preprocess_batch(samples)
        if self.zero_head_pose:
            pose[:] = 0
        return M.predict(self.net_, eyes, pose)

    def score(self, X, y=None, sample_weight=None) -> float:
        """Negative mean absolute error in degrees (higher is better)."""
        samples = check_samples(X, y)
        preds = self.predict(samples)
        return -optim.mae(preds, np.array([s.gaze for s in samples]))[0]
