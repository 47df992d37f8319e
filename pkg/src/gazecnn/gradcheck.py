"""Central finite-difference checks of every hand-written backward pass.

Kernels are called through their modules (``T.conv2d_backward`` rather than
a local alias) so a deliberately broken kernel patched in by a test is picked
up here too.

The error measure is elementwise ``|analytic - numeric| / max(|analytic|,
|numeric|, floor)``; the floor only matters for gradients that are zero up to
rounding.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gazecnn import model as M
from gazecnn import optim
from gazecnn import tensor as T

STEP = 1e-5
KERNEL_TOL = 1e-6
NETWORK_TOL = 1e-5
SPOT_TOL = 1e-4
FLOOR = 1e-7
MSE_STEP = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    n_checked: int
    n_skipped: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        skipped = f", {self.n_skipped} skipped at kinks" if self.n_skipped else ""
        return (f"{status} {self.name}: max rel err {self.max_rel_error:.3e} "
                f"(tol {self.tolerance:.0e}, {self.n_checked} values{skipped})")


def rel_error(analytic, numeric, floor: float = FLOOR) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_grad(f, x: np.ndarray, step: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (mutated and restored)."""
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        g[i] = (up - down) / (2 * step)
    return grad


def _spaced(rng, shape):
    """Random values with pairwise gaps >= 0.05 so no max-pool argmax flips under the step."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.05 + rng.uniform(0, 0.01, n) - n * 0.025).reshape(shape)


def check_conv2d(rng, trials: int = 50) -> CheckResult:
    worst, count = 0.0, 0
    for _ in range(trials):
        n, c, o = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        h, w = rng.integers(3, 8, size=2)
        x = rng.standard_normal((n, c, h, w))
        wt = rng.standard_normal((o, c, 3, 3))
        b = rng.standard_normal(o)
        r = rng.standard_normal((n, o, h - 2, w - 2))

        def loss():
            return float(np.sum(r * T.conv2d_forward(x, wt, b)))

        gx, gw, gb = T.conv2d_backward(r, x, wt)
        for analytic, target in ((gx, x), (gw, wt), (gb, b)):
            err = rel_error(analytic, numeric_grad(loss, target))
            worst = max(worst, float(err.max()))
            count += err.size
    return CheckResult("conv2d_backward", worst, KERNEL_TOL, count)


def check_maxpool(rng, trials: int = 50) -> CheckResult:
    worst, count = 0.0, 0
    for _ in range(trials):
        n, c = rng.integers(1, 3), rng.integers(1, 4)
        h, w = rng.integers(3, 11, size=2)
        x = _spaced(rng, (n, c, h, w))
        out, idx = T.maxpool_forward(x)
        r = rng.standard_normal(out.shape)

        def loss():
            return float(np.sum(r * T.maxpool_forward(x)[0]))

        err = rel_error(T.maxpool_backward(r, idx, x.shape), numeric_grad(loss, x))
        worst = max(worst, float(err.max()))
        count += err.size
    return CheckResult("maxpool_backward", worst, KERNEL_TOL, count)


def check_linear(rng, trials: int = 50) -> CheckResult:
    worst, count = 0.0, 0
    for _ in range(trials):
        n, i, o = rng.integers(1, 4), rng.integers(1, 9), rng.integers(1, 9)
        x = rng.standard_normal((n, i))
        wt = rng.standard_normal((o, i))
        b = rng.standard_normal(o)
        r = rng.standard_normal((n, o))

        def loss():
            return float(np.sum(r * T.linear_forward(x, wt, b)))

        gx, gw, gb = T.linear_backward(r, x, wt)
        for analytic, target in ((gx, x), (gw, wt), (gb, b)):
            err = rel_error(analytic, numeric_grad(loss, target))
            worst = max(worst, float(err.max()))
            count += err.size
    return CheckResult("linear_backward", worst, KERNEL_TOL, count)


def check_relu(rng, trials: int = 50) -> CheckResult:
    worst, count = 0.0, 0
    for _ in range(trials):
        shape = tuple(rng.integers(1, 6, size=rng.integers(1, 4)))
        x = rng.standard_normal(shape)
        # stay clear of the kink at zero
        x = np.where(np.abs(x) < 1e-2, 0.5, x)
        r = rng.standard_normal(shape)

        def loss():
            return float(np.sum(r * T.relu(x)))

        err = rel_error(T.relu_backward(r, x), numeric_grad(loss, x))
        worst = max(worst, float(err.max()))
        count += err.size
    return CheckResult("relu_backward", worst, KERNEL_TOL, count)


def check_mse(rng, trials: int = 50) -> CheckResult:
    worst, count = 0.0, 0
    for _ in range(trials):
        pred = rng.standard_normal(2) * 10
        target = rng.standard_normal(2) * 10
        _, grad = optim.mse_loss(pred, target)
        # the loss is quadratic, so central differences carry no truncation
        # error and a wider step only shrinks the rounding error
        numeric = numeric_grad(lambda: optim.mse_loss(pred, target)[0], pred, MSE_STEP)
        err = rel_error(grad, numeric)
        worst = max(worst, float(err.max()))
        count += err.size
    return CheckResult("mse_loss", worst, 1e-9, count)


def _pattern(trace: M.ForwardTrace):
    """Everything that makes the network piecewise: ReLU signs and pool argmaxes."""
    return (trace.conv1 > 0, trace.conv2 > 0, trace.fc1 > 0, trace.fc2 > 0,
            trace.pool1_idx, trace.pool2_idx)


def _same_pattern(a, b) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def _network_fd(net: M.GazeNet, eyes, pose, target, name: str, flat_indices, step: float):
    """Numeric gradient of the MSE loss for selected entries of one parameter tensor.

    Entries whose +-step perturbation changes the activation pattern sit on a
    kink, where the loss is not differentiable at that scale; they come back
    as NaN.
    """
    base = _pattern(M.forward(net, eyes, pose)[1])
    flat = net.params[name].reshape(-1)
    out = np.empty(len(flat_indices))
    for k, i in enumerate(flat_indices):
        orig = flat[i]
        vals = []
        kink = False
        for delta in (step, -step):
            flat[i] = orig + delta
            pred, tr = M.forward(net, eyes, pose)
            vals.append(optim.mse_loss(pred, target)[0])
            kink = kink or not _same_pattern(base, _pattern(tr))
        flat[i] = orig
        out[k] = np.nan if kink else (vals[0] - vals[1]) / (2 * step)
    return out


def check_network_reduced(rng) -> CheckResult:
    """Every parameter of a miniature, topology-identical network, in double precision."""
    net = M.build(rng, M.REDUCED_ARCH, dtype=np.float64)
    for name, p in net.params.items():
        if name.endswith(".bias"):
            p[:] = rng.uniform(-0.1, 0.1, p.shape)
    a = net.arch
    eyes = rng.uniform(0, 1, (3, a.in_h, a.in_w))
    pose = rng.uniform(-1, 1, 3)
    target = rng.uniform(-20, 20, 2)
    pred, trace = M.forward(net, eyes, pose)
    _, gout = optim.mse_loss(pred, target)
    grads = M.backward(net, trace, gout)
    worst, count, skipped = 0.0, 0, 0
    for name, p in net.params.items():
        numeric = _network_fd(net, eyes, pose, target, name, range(p.size), STEP)
        ok = ~np.isnan(numeric)
        skipped += int((~ok).sum())
        err = rel_error(grads[name].reshape(-1)[ok], numeric[ok])
        if err.size:
            worst = max(worst, float(err.max()))
        count += int(ok.sum())
    return CheckResult("network_reduced", worst, NETWORK_TOL, count, skipped)


def _spot_indices(net: M.GazeNet, rng, total: int):
    """``total`` parameter positions spread over every tensor (at most 20 from small ones)."""
    names = list(net.params)
    if total < len(names):
        raise ValueError(f"spot check needs at least {len(names)} parameters, got {total}")
    share = min(20, total // len(names))
    quota = {n: min(share, net.params[n].size) for n in names}
    quota["fc1.weight"] += total - sum(quota.values())
    return {n: rng.choice(net.params[n].size, size=q, replace=False) for n, q in quota.items()}


def check_network_spot(rng, n_params: int = 200, sample=None) -> CheckResult:
    """Spot-check the full network.

    The analytic gradients come from the float32 training path; the numeric
    ones from a float64 copy of the same weights.
    """
    net32 = M.build(rng)
    for name, p in net32.params.items():
        if name.endswith(".bias"):
            p[:] = rng.uniform(-0.05, 0.05, p.shape)
    if sample is None:
        eyes = rng.uniform(0, 1, (3, 70, 210)).astype(np.float32)
        pose = rng.uniform(-1, 1, 3).astype(np.float32)
    else:
        eyes, pose = sample
    target = rng.uniform(-20, 20, 2)
    pred, trace = M.forward(net32, eyes, pose)
    _, gout = optim.mse_loss(pred, target)
    grads = M.backward(net32, trace, gout)

    net64 = net32.astype(np.float64)
    eyes64, pose64 = eyes.astype(np.float64), pose.astype(np.float64)
    worst, count, skipped = 0.0, 0, 0
    # gradients that are zero to float32 rounding carry no relative information
    floor = 1e-4 * max(float(np.abs(g).max()) for g in grads.values())
    for name, idx in _spot_indices(net32, rng, n_params).items():
        numeric = _network_fd(net64, eyes64, pose64, target, name, idx, STEP)
        ok = ~np.isnan(numeric)
        skipped += int((~ok).sum())
        err = rel_error(grads[name].reshape(-1)[idx][ok], numeric[ok], floor)
        if err.size:
            worst = max(worst, float(err.max()))
        count += int(ok.sum())
    return CheckResult("network_spot_full", worst, SPOT_TOL, count, skipped)


def run_all(seed: int = 0, trials: int = 50, spot: int = 200) -> list[CheckResult]:
    rng = T.make_rng(seed)
    return [
        check_conv2d(rng, trials),
        check_maxpool(rng, trials),
        check_linear(rng, trials),
        check_relu(rng, trials),
        check_mse(rng, trials),
        check_network_reduced(rng),
        check_network_spot(rng, spot),
    ]
