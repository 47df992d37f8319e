"""Forward and backward kernels for the layer types used by the gaze network.

Tensors are plain numpy arrays.  Every kernel accepts either a single sample
(``C x H x W`` for images, ``N`` for vectors) or a batch with one extra leading
axis, and works in whatever floating dtype it is handed (float32 for training,
float64 for gradient checks).  Gradients are written out by hand per layer.

Layer hyperparameters are fixed to what the network needs: 3x3 valid
convolution with stride 1, and 3x3 max pooling with stride 3 where trailing
rows/columns that do not fill a window are dropped.
"""
from __future__ import annotations

import numpy as np

KERNEL = 3
POOL = 3

__all__ = [
    "ShapeError",
    "PoolIndexError",
    "make_rng",
    "conv2d_forward",
    "conv2d_backward",
    "maxpool_forward",
    "maxpool_backward",
    "linear_forward",
    "linear_backward",
    "relu",
    "relu_backward",
    "bilinear_resize",
]


class ShapeError(ValueError):
    """Raised when the shapes handed to a kernel do not agree."""


class PoolIndexError(RuntimeError):
    """Raised when a pooling index map points outside the input it came from."""


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic generator (PCG64) used everywhere randomness is needed.

    PCG64 streams are specified bit-for-bit by numpy, so a seed reproduces the
    same sequence on every platform.
    """
    return np.random.Generator(np.random.PCG64(seed))


def _batched(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    if x.ndim == ndim:
        return x[None], True
    if x.ndim == ndim + 1:
        return x, False
    raise ShapeError(f"expected a {ndim}-d sample or {ndim + 1}-d batch, got shape {x.shape}")


def _im2col(x: np.ndarray) -> np.ndarray:
    """Unfold a batch ``N x C x H x W`` into a ``(C*9) x (N*H'*W')`` matrix."""
    n, c, h, w = x.shape
    ho, wo = h - KERNEL + 1, w - KERNEL + 1
    xt = x.transpose(1, 0, 2, 3)
    cols = np.empty((c, KERNEL, KERNEL, n, ho, wo), dtype=x.dtype)
    for i in range(KERNEL):
        for j in range(KERNEL):
            cols[:, i, j] = xt[:, :, i:i + ho, j:j + wo]
    return cols.reshape(c * KERNEL * KERNEL, n * ho * wo)


def _check_conv(x: np.ndarray, weight: np.ndarray) -> None:
    if weight.ndim != 4 or weight.shape[2:] != (KERNEL, KERNEL):
        raise ShapeError(f"conv weight must be C_out x C_in x 3 x 3, got {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"input channels do not match weight: input {x.shape[1:]} vs weight {weight.shape}")
    if x.shape[2] < KERNEL or x.shape[3] < KERNEL:
        raise ShapeError(f"input {x.shape[1:]} is smaller than the 3x3 kernel")


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
                   return_cols: bool = False):
    """3x3 valid cross-correlation, stride 1.

    ``out[o, y, x] = bias[o] + sum_{c,i,j} weight[o, c, i, j] * x[c, y + i, x + j]``

    With ``return_cols`` the unfolded input is returned as well so that
    :func:`conv2d_backward` can reuse it.
    """
    xb, single = _batched(x, 3)
    _check_conv(xb, weight)
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias {bias.shape} does not match weight {weight.shape}")
    n, _, h, w = xb.shape
    ho, wo = h - KERNEL + 1, w - KERNEL + 1
    cols = _im2col(xb)
    out = weight.reshape(weight.shape[0], -1) @ cols
    out += bias[:, None]
    out = out.reshape(weight.shape[0], n, ho, wo).transpose(1, 0, 2, 3)
    if single:
        out = out[0]
    return (out, cols) if return_cols else out


def conv2d_backward(grad_out: np.ndarray, x: np.ndarray, weight: np.ndarray,
                    need_input_grad: bool = True, cols: np.ndarray | None = None):
    """Gradients of :func:`conv2d_forward` w.r.t. input, weight and bias.

    ``grad_input`` is ``None`` when ``need_input_grad`` is false (the first
    layer never needs it, and skipping the col2im pass halves its cost).
    """
    xb, single = _batched(x, 3)
    gb = grad_out[None] if single else grad_out
    _check_conv(xb, weight)
    n, c, h, w = xb.shape
    o = weight.shape[0]
    ho, wo = h - KERNEL + 1, w - KERNEL + 1
    if gb.shape != (n, o, ho, wo):
        raise ShapeError(
            f"grad_out {grad_out.shape} does not match forward output for input {x.shape} "
            f"and weight {weight.shape}")

    g = gb.transpose(1, 0, 2, 3).reshape(o, -1)
    grad_bias = g.sum(axis=1)
    if cols is None:
        cols = _im2col(xb)
    grad_weight = (g @ cols.T).reshape(weight.shape)
    if not need_input_grad:
        return None, grad_weight, grad_bias

    dcols = (weight.reshape(o, -1).T @ g).reshape(c, KERNEL, KERNEL, n, ho, wo)
    grad_t = np.zeros((c, n, h, w), dtype=np.result_type(grad_out, weight))
    for i in range(KERNEL):
        for j in range(KERNEL):
            grad_t[:, :, i:i + ho, j:j + wo] += dcols[:, i, j]
    grad_input = grad_t.transpose(1, 0, 2, 3)
    return (grad_input[0] if single else grad_input), grad_weight, grad_bias


def maxpool_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """3x3 max pooling with stride 3; fringe rows/columns are dropped.

    Returns the pooled tensor and an index map of the same shape holding, for
    every output cell, the flat index into the sample's ``C x H x W`` input of
    the window maximum.  Ties resolve to the lowest flat index.
    """
    xb, single = _batched(x, 3)
    n, c, h, w = xb.shape
    if h < POOL or w < POOL:
        raise ShapeError(f"input {x.shape} is smaller than the 3x3 pooling window")
    ho, wo = h // POOL, w // POOL
    views = [xb[:, :, di:ho * POOL:POOL, dj:wo * POOL:POOL]
             for di in range(POOL) for dj in range(POOL)]
    # running max over the window in row-major order (= increasing flat
    # index); a strict comparison keeps the earliest position on ties
    out = views[0].copy()
    arg = np.zeros(out.shape, dtype=np.uint8)
    for k in range(1, len(views)):
        greater = views[k] > out
        np.maximum(out, views[k], out=out)
        step = np.uint8(k) - arg
        step *= greater.view(np.uint8)
        arg += step
    offsets = np.array([di * w + dj for di in range(POOL) for dj in range(POOL)], dtype=np.intp)
    index = offsets.take(arg)
    index += (np.arange(c)[:, None, None] * (h * w)
              + np.arange(ho)[:, None] * (POOL * w) + np.arange(wo)[None, :] * POOL)
    if single:
        return out[0], index[0]
    return out, index


def maxpool_backward(grad_out: np.ndarray, index: np.ndarray, input_shape) -> np.ndarray:
    """Route each output gradient to the argmax position recorded by the forward pass."""
    input_shape = tuple(input_shape)
    single = len(input_shape) == 3
    gb = grad_out[None] if single else grad_out
    ib = index[None] if single else index
    shape = (1,) + input_shape if single else input_shape
    if gb.shape != ib.shape:
        raise ShapeError(f"grad_out {grad_out.shape} does not match index map {index.shape}")
    n = shape[0]
    size = int(np.prod(shape[1:]))
    flat_idx = ib.reshape(n, -1)
    if flat_idx.size and (flat_idx.min() < 0 or flat_idx.max() >= size):
        raise PoolIndexError(
            f"pool index map references positions outside input shape {input_shape}")
    grad = np.zeros((n, size), dtype=grad_out.dtype)
    # windows never overlap, so every input position receives at most one value
    np.put_along_axis(grad, flat_idx, gb.reshape(n, -1), axis=1)
    grad = grad.reshape(shape)
    return grad[0] if single else grad


def linear_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """``weight @ x + bias`` for a vector or a batch of row vectors."""
    if weight.ndim != 2 or bias.shape != (weight.shape[0],) or x.shape[-1] != weight.shape[1]:
        raise ShapeError(
            f"linear shapes disagree: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    return x @ weight.T + bias


def linear_backward(grad_out: np.ndarray, x: np.ndarray, weight: np.ndarray):
    if grad_out.shape[-1] != weight.shape[0] or x.shape[-1] != weight.shape[1] \
            or grad_out.shape[:-1] != x.shape[:-1]:
        raise ShapeError(
            f"linear backward shapes disagree: grad_out {grad_out.shape}, input {x.shape}, "
            f"weight {weight.shape}")
    grad_input = grad_out @ weight
    if x.ndim == 1:
        grad_weight = np.outer(grad_out, x)
        grad_bias = grad_out.copy()
    else:
        grad_weight = grad_out.T @ x
        grad_bias = grad_out.sum(axis=0)
    return grad_input, grad_weight, grad_bias


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    if grad_out.shape != x.shape:
        raise ShapeError(f"grad_out {grad_out.shape} does not match input {x.shape}")
    return grad_out * (x > 0)


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize over the last two axes.

    Works on ``3 x H x W`` images as well as stacks ``N x 3 x H x W``.  Integer
    images are converted to float32 first.
    """
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"degenerate output size {out_h}x{out_w}")
    h, w = image.shape[-2:]
    if h < 2 or w < 2:
        raise ShapeError(f"input {image.shape} must be at least 2x2")
    if not np.issubdtype(image.dtype, np.floating):
        image = image.astype(np.float32)
    if (h, w) == (out_h, out_w):
        return image.copy()

    def axis(n_in, n_out):
        pos = np.linspace(0.0, n_in - 1, n_out) if n_out > 1 else np.zeros(1)
        lo = np.minimum(np.floor(pos).astype(np.intp), n_in - 2)
        return lo, (pos - lo).astype(image.dtype)

    y0, wy = axis(h, out_h)
    x0, wx = axis(w, out_w)
    # separable: interpolate along x for every input row, then along y;
    # a + t * (b - a) keeps constant regions exactly constant
    left = image[..., x0]
    rows = left + wx * (image[..., x0 + 1] - left)
    top = rows[..., y0, :]
    return top + wy[:, None] * (rows[..., y0 + 1, :] - top)
