"""The gaze CNN: topology, forward/backward passes and checkpoint I/O.

Topology (per sample)::

    eyes 3x70x210
      conv1 3x3 (9)    -> 9x68x208   -> ReLU -> maxpool 3 -> 9x22x69
      conv2 3x3 (26)   -> 26x20x67   -> ReLU -> maxpool 3 -> 26x6x22
      flatten          -> 3432
      fc1              -> 600 -> ReLU
      fc2              -> 50  -> ReLU
      concat head pose -> 53
      fc3              -> 2   (pitch, yaw in degrees)

Kernel size, stride and pooling window are not free choices: they are the
only values that reproduce the published layer shapes and parameter counts
(252 = 9*(3*3*3+1), 2,132 = 26*(9*3*3+1), 68x208 -> 22x69 needs a 3x3 window
at stride 3).  Likewise the 30,050 parameters of the second linear layer
(= 50*601) and the 108 of the last (= 2*54) force a 50-unit layer followed by
a 3-angle head-pose concat, giving the 53-unit last hidden layer.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gazecnn import tensor as T

PARAM_NAMES = (
    "conv1.weight", "conv1.bias",
    "conv2.weight", "conv2.bias",
    "fc1.weight", "fc1.bias",
    "fc2.weight", "fc2.bias",
    "fc3.weight", "fc3.bias",
)
HEAD_POSE_SCALE = 90.0


@dataclass(frozen=True)
class Arch:
    """Layer widths.  The defaults are the published network."""

    in_h: int = 70
    in_w: int = 210
    conv1: int = 9
    conv2: int = 26
    fc1: int = 600
    fc2: int = 50
    pose: int = 3
    out: int = 2

    @property
    def conv1_hw(self):
        return self.in_h - 2, self.in_w - 2

    @property
    def pool1_hw(self):
        h, w = self.conv1_hw
        return h // 3, w // 3

    @property
    def conv2_hw(self):
        h, w = self.pool1_hw
        return h - 2, w - 2

    @property
    def pool2_hw(self):
        h, w = self.conv2_hw
        return h // 3, w // 3

    @property
    def flat(self) -> int:
        h, w = self.pool2_hw
        return self.conv2 * h * w

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "conv1.weight": (self.conv1, 3, 3, 3),
            "conv1.bias": (self.conv1,),
            "conv2.weight": (self.conv2, self.conv1, 3, 3),
            "conv2.bias": (self.conv2,),
            "fc1.weight": (self.fc1, self.flat),
            "fc1.bias": (self.fc1,),
            "fc2.weight": (self.fc2, self.fc1),
            "fc2.bias": (self.fc2,),
            "fc3.weight": (self.out, self.fc2 + self.pose),
            "fc3.bias": (self.out,),
        }

    def trace_shapes(self) -> list[tuple[int, ...]]:
        """Per-sample activation shapes, in the order of the architecture table."""
        return [
            (self.conv1, *self.conv1_hw),
            (self.conv1, *self.pool1_hw),
            (self.conv2, *self.conv2_hw),
            (self.conv2, *self.pool2_hw),
            (self.flat,),
            (self.fc1,),
            (self.fc2,),
            (self.fc2 + self.pose,),
            (self.out,),
        ]


FULL_ARCH = Arch()
# Topology-identical miniature used for exhaustive finite-difference checks.
REDUCED_ARCH = Arch(in_h=20, in_w=26, conv1=2, conv2=3, fc1=12, fc2=5)


@dataclass
class GazeNet:
    arch: Arch
    params: dict[str, np.ndarray]

    @property
    def dtype(self):
        return self.params["fc3.bias"].dtype

    def astype(self, dtype) -> "GazeNet":
        return GazeNet(self.arch, {k: v.astype(dtype, copy=True) for k, v in self.params.items()})

    def copy(self) -> "GazeNet":
        return self.astype(self.dtype)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __eq__(self, other) -> bool:
        if not isinstance(other, GazeNet) or self.arch != other.arch:
            return False
        return all(
            a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.params.values(), other.params.values()))


@dataclass
class ForwardTrace:
    arch: Arch
    dtype: np.dtype
    single: bool
    eyes: np.ndarray
    eyes_cols: np.ndarray
    conv1: np.ndarray
    pool1: np.ndarray
    pool1_idx: np.ndarray
    conv2: np.ndarray
    pool2: np.ndarray
    pool2_idx: np.ndarray
    flat: np.ndarray
    fc1: np.ndarray
    fc2: np.ndarray
    fused: np.ndarray
    out: np.ndarray

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-sample shapes of every stage (batch axis stripped)."""
        arrays = [self.conv1, self.pool1, self.conv2, self.pool2, self.flat,
                  self.fc1, self.fc2, self.fused, self.out]
        return [tuple(a.shape[1:]) for a in arrays]


def build(rng: np.random.Generator, arch: Arch = FULL_ARCH, dtype=np.float32) -> GazeNet:
    """Fresh network: weights uniform in +-sqrt(6 / fan_in), biases zero."""
    params = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            limit = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return GazeNet(arch, params)


def zeros(arch: Arch = FULL_ARCH, dtype=np.float32) -> GazeNet:
    return GazeNet(arch, {k: np.zeros(s, dtype=dtype) for k, s in arch.param_shapes().items()})


def param_count(net: GazeNet) -> int:
    return sum(int(p.size) for p in net.params.values())


def layer_param_counts(net: GazeNet) -> dict[str, int]:
    counts: dict[str, int] = {}
    for name, p in net.params.items():
        layer = name.split(".")[0]
        counts[layer] = counts.get(layer, 0) + int(p.size)
    return counts


def forward(net: GazeNet, eyes: np.ndarray, head_pose: np.ndarray):
    """Run the network.

    ``eyes`` is ``3 x H x W`` (or a batch ``N x 3 x H x W``) with values in
    [0, 1]; ``head_pose`` holds the three head angles already divided by 90.
    Returns ``(output, trace)`` where ``output`` is ``(pitch, yaw)`` in degrees
    (``N x 2`` for a batch).
    """
    a = net.arch
    p = net.params
    dtype = net.dtype
    eyes = np.asarray(eyes, dtype=dtype)
    head_pose = np.asarray(head_pose, dtype=dtype)
    single = eyes.ndim == 3
    if single:
        eyes = eyes[None]
        head_pose = head_pose[None]
    if eyes.ndim != 4 or eyes.shape[1:] != (3, a.in_h, a.in_w):
        raise T.ShapeError(f"eyes must be 3x{a.in_h}x{a.in_w} per sample, got {eyes.shape}")
    if head_pose.shape != (eyes.shape[0], a.pose):
        raise T.ShapeError(
            f"head_pose must hold {a.pose} angles per sample, got {head_pose.shape} "
            f"for eyes {eyes.shape}")

    c1, cols1 = T.conv2d_forward(eyes, p["conv1.weight"], p["conv1.bias"], return_cols=True)
    p1, i1 = T.maxpool_forward(T.relu(c1))
    c2 = T.conv2d_forward(p1, p["conv2.weight"], p["conv2.bias"])
    p2, i2 = T.maxpool_forward(T.relu(c2))
    flat = p2.reshape(p2.shape[0], -1)
    h1 = T.linear_forward(flat, p["fc1.weight"], p["fc1.bias"])
    h2 = T.linear_forward(T.relu(h1), p["fc2.weight"], p["fc2.bias"])
    fused = np.concatenate([T.relu(h2), head_pose], axis=1)
    out = T.linear_forward(fused, p["fc3.weight"], p["fc3.bias"])

    trace = ForwardTrace(a, dtype, single, eyes, cols1, c1, p1, i1, c2, p2, i2, flat, h1, h2,
                         fused, out)
    return (out[0] if single else out), trace


def backward(net: GazeNet, trace: ForwardTrace, grad_output: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients for a loss whose gradient w.r.t. the output is ``grad_output``.

    For a batch the gradients are summed over samples; scale ``grad_output``
    by ``1/N`` to obtain batch means.
    """
    if trace.arch != net.arch or trace.dtype != net.dtype:
        raise ValueError(
            f"trace was produced by a different network ({trace.arch}, {trace.dtype}) "
            f"than the one given ({net.arch}, {net.dtype})")
    p = net.params
    g = np.asarray(grad_output, dtype=net.dtype)
    if trace.single:
        g = g[None]
    if g.shape != trace.out.shape:
        raise T.ShapeError(f"grad_output {grad_output.shape} does not match output {trace.out.shape}")

    grads = {}
    d_fused, grads["fc3.weight"], grads["fc3.bias"] = T.linear_backward(
        g, trace.fused, p["fc3.weight"])
    d_h2 = T.relu_backward(d_fused[:, :net.arch.fc2], trace.fc2)
    d_h1, grads["fc2.weight"], grads["fc2.bias"] = T.linear_backward(
        d_h2, T.relu(trace.fc1), p["fc2.weight"])
    d_h1 = T.relu_backward(d_h1, trace.fc1)
    d_flat, grads["fc1.weight"], grads["fc1.bias"] = T.linear_backward(
        d_h1, trace.flat, p["fc1.weight"])

    # The ReLU mask is applied before unpooling: at a window's argmax the conv
    # output is positive exactly when the pooled value is, and every other
    # position receives no gradient anyway.  Same result, a ninth of the work.
    d_p2 = T.relu_backward(d_flat.reshape(trace.pool2.shape), trace.pool2)
    d_c2 = T.maxpool_backward(d_p2, trace.pool2_idx, trace.conv2.shape)
    d_p1, grads["conv2.weight"], grads["conv2.bias"] = T.conv2d_backward(
        d_c2, trace.pool1, p["conv2.weight"])
    d_p1 = T.relu_backward(d_p1, trace.pool1)
    d_c1 = T.maxpool_backward(d_p1, trace.pool1_idx, trace.conv1.shape)
    _, grads["conv1.weight"], grads["conv1.bias"] = T.conv2d_backward(
        d_c1, trace.eyes, p["conv1.weight"], need_input_grad=False, cols=trace.eyes_cols)
    return {name: grads[name] for name in PARAM_NAMES}


def predict(net: GazeNet, eyes: np.ndarray, head_pose: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Batched inference returning an ``N x 2`` float64 array of (pitch, yaw)."""
    outs = [forward(net, eyes[i:i + batch_size], head_pose[i:i + batch_size])[0]
            for i in range(0, len(eyes), batch_size)]
    if not outs:
        return np.zeros((0, net.arch.out))
    return np.concatenate(outs).astype(np.float64)


# --------------------------------------------------------------------------
# checkpoint I/O
#
# little-endian: b"GZNT" | u32 version | u32 tensor count |
#   per tensor: u16 name length, utf-8 name, u8 rank, u32 dims..., float32 payload
# followed by a u32 CRC32 of every preceding byte.

MAGIC = b"GZNT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Base class for unreadable checkpoint files."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


def to_bytes(net: GazeNet) -> bytes:
    buf = bytearray(MAGIC)
    buf += struct.pack("<II", FORMAT_VERSION, len(net.params))
    for name, arr in net.params.items():
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    buf += struct.pack("<I", zlib.crc32(buf))
    return bytes(buf)


def save(net: GazeNet, path) -> None:
    Path(path).write_bytes(to_bytes(net))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        # the trailing 4 bytes belong to the CRC
        if self.pos + n > len(self.data) - 4:
            raise TruncatedCheckpointError(f"file ends while reading {what} at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def from_bytes(data: bytes, arch: Arch = FULL_ARCH) -> GazeNet:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"not a gaze checkpoint: magic {data[:4]!r} != {MAGIC!r}")
    r = _Reader(data)
    r.pos = 4
    (version,) = r.unpack("<I", "format version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    (count,) = r.unpack("<I", "tensor count")
    expected = arch.param_shapes()
    if count != len(expected):
        raise CheckpointShapeError(f"checkpoint holds {count} tensors, expected {len(expected)}")

    params = {}
    for exp_name, exp_shape in expected.items():
        (n,) = r.unpack("<H", "tensor name length")
        name = r.take(n, "tensor name").decode("utf-8")
        if name != exp_name:
            raise CheckpointShapeError(f"unexpected tensor {name!r}, expected {exp_name!r}")
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        if tuple(dims) != exp_shape:
            raise CheckpointShapeError(f"{name} has shape {tuple(dims)}, expected {exp_shape}")
        size = int(np.prod(dims))
        payload = r.take(4 * size, f"payload of {name}")
        params[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)

    if r.pos != len(data) - 4:
        raise CheckpointShapeError(f"{len(data) - 4 - r.pos} unexpected trailing bytes")
    (crc,) = struct.unpack("<I", data[-4:])
    if crc != zlib.crc32(data[:-4]):
        raise ChecksumError("CRC32 mismatch: checkpoint is corrupted")
    return GazeNet(arch, params)


def load(path, arch: Arch = FULL_ARCH) -> GazeNet:
    return from_bytes(Path(path).read_bytes(), arch)
