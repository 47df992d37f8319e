"""Adam, the MSE training loss and the MAE evaluation metric."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    """Raised instead of applying an update computed from NaN/inf gradients."""


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    scratch: list[np.ndarray] = field(default_factory=list, repr=False, compare=False)

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        params = list(params)
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, hyper: AdamHyper = AdamHyper()):
    """One bias-corrected Adam update, applied to ``params`` in place.

    ``params`` and ``grads`` are equally long sequences of arrays; the state
    is advanced in place as well.  Returns ``(params, state)``.
    """
    params, grads = list(params), list(grads)
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ValueError(
            f"{len(params)} params, {len(grads)} grads and {len(state.m)} moment tensors")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.m[i].shape or p.shape != state.v[i].shape:
            raise ValueError(f"tensor {i}: param {p.shape}, grad {g.shape}, "
                             f"m {state.m[i].shape}, v {state.v[i].shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise NonFiniteGradientError(
                f"tensor {i} (shape {g.shape}) has {bad} non-finite gradient entries; "
                f"step {state.t + 1} rejected")

    t = state.t + 1
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    if len(state.scratch) != len(params):
        state.scratch = [np.empty_like(p) for p in params]
    for p, g, m, v, buf in zip(params, grads, state.m, state.v, state.scratch):
        # all in place: the large layers make temporaries expensive
        m *= b1
        np.multiply(g, 1.0 - b1, out=buf)
        m += buf
        v *= b2
        np.multiply(g, g, out=buf)
        buf *= 1.0 - b2
        v += buf
        np.divide(v, c2, out=buf)
        np.sqrt(buf, out=buf)
        buf += hyper.eps
        np.divide(m, buf, out=buf)
        buf *= hyper.lr / c1
        p -= buf
    state.t = t
    return params, state


def mse_loss(pred, target):
    """Mean over the two outputs of the squared error, and its gradient.

    With ``loss = mean((pred - target)**2)`` over two components the gradient
    is ``2 * (pred - target) / 2 = pred - target``.
    """
    diff = np.asarray(pred, dtype=float) - np.asarray(target, dtype=float)
    return float(np.mean(diff ** 2)), diff


def per_sample_error(preds, targets) -> np.ndarray:
    """Per-sample mean of |pitch error| and |yaw error|, in degrees."""
    preds = np.asarray(preds, dtype=np.float64).reshape(-1, 2)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 2)
    if preds.shape != targets.shape:
        raise ValueError(f"{len(preds)} predictions for {len(targets)} targets")
    return np.abs(preds - targets).mean(axis=1)


def mae(preds, targets) -> tuple[float, float]:
    """Mean and population standard deviation of the per-sample error."""
    err = per_sample_error(preds, targets)
    if err.size == 0:
        raise ValueError("MAE of an empty sample set is undefined")
    return float(err.mean()), float(err.std())
