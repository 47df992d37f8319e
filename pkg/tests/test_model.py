import struct
import zlib

import numpy as np
import pytest

from gazecnn import gradcheck as G
from gazecnn import model as M
from gazecnn import optim
from gazecnn import tensor as T

TABLE_SHAPES = [(9, 68, 208), (9, 22, 69), (26, 20, 67), (26, 6, 22), (3432,), (600,), (50,),
                (53,), (2,)]


@pytest.fixture(scope="module")
def net():
    return M.build(T.make_rng(0))


@pytest.fixture
def rng():
    return T.make_rng(99)


def _inputs(rng, arch=M.FULL_ARCH, dtype=np.float32):
    eyes = rng.uniform(0, 1, (3, arch.in_h, arch.in_w)).astype(dtype)
    pose = rng.uniform(-1, 1, 3).astype(dtype)
    return eyes, pose


def test_param_count(net):
    assert M.param_count(net) == 2_092_342


def test_layer_counts(net):
    assert M.layer_param_counts(net) == {
        "conv1": 252, "conv2": 2_132, "fc1": 2_059_800, "fc2": 30_050, "fc3": 108}


def test_empty_stub_has_no_params():
    assert M.param_count(M.GazeNet(M.FULL_ARCH, {})) == 0


def test_trace_shapes(net, rng):
    _, trace = M.forward(net, *_inputs(rng))
    assert trace.shapes() == TABLE_SHAPES
    assert M.FULL_ARCH.trace_shapes() == TABLE_SHAPES


def test_build_is_seeded():
    assert M.build(T.make_rng(5)) == M.build(T.make_rng(5))
    assert M.build(T.make_rng(1)) != M.build(T.make_rng(2))


def test_zero_net_outputs_zero(rng):
    out, _ = M.forward(M.zeros(), *_inputs(rng))
    np.testing.assert_array_equal(out, [0.0, 0.0])


def test_head_pose_shift_is_weight_times_delta(rng):
    net = M.zeros(dtype=np.float64)
    net["fc3.weight"][1, 51] = 1.0  # yaw output <- head yaw channel
    eyes, pose = _inputs(rng, dtype=np.float64)
    base, _ = M.forward(net, eyes, pose)
    moved = pose.copy()
    moved[1] += 0.25
    out, _ = M.forward(net, eyes, moved)
    np.testing.assert_allclose(out - base, [0.0, 0.25], atol=1e-15)


def test_batch_matches_single(net, rng):
    eyes = rng.uniform(0, 1, (3, 3, 70, 210)).astype(np.float32)
    pose = rng.uniform(-1, 1, (3, 3)).astype(np.float32)
    batch, _ = M.forward(net, eyes, pose)
    for i in range(3):
        np.testing.assert_allclose(batch[i], M.forward(net, eyes[i], pose[i])[0], rtol=1e-5,
                                   atol=1e-5)
    np.testing.assert_allclose(M.predict(net, eyes, pose, batch_size=2), batch, rtol=1e-5,
                               atol=1e-5)


def test_forward_rejects_bad_shapes(net):
    with pytest.raises(T.ShapeError):
        M.forward(net, np.zeros((3, 70, 200), np.float32), np.zeros(3, np.float32))
    with pytest.raises((T.ShapeError, ValueError)):
        M.forward(net, np.zeros((3, 70, 210), np.float32), np.zeros(2, np.float32))


def test_zero_grad_output_gives_zero_grads(net, rng):
    _, trace = M.forward(net, *_inputs(rng))
    grads = M.backward(net, trace, np.zeros(2, np.float32))
    assert list(grads) == list(M.PARAM_NAMES)
    assert all(not g.any() for g in grads.values())


def test_fc3_pose_columns_are_outer_product(net, rng):
    eyes, pose = _inputs(rng)
    _, trace = M.forward(net, eyes, pose)
    g = np.array([0.7, -1.3], np.float32)
    grads = M.backward(net, trace, g)
    np.testing.assert_allclose(grads["fc3.weight"][:, 50:], np.outer(g, pose), rtol=1e-6)
    np.testing.assert_allclose(grads["fc3.bias"], g)


def test_backward_sums_over_batch(rng):
    net = M.build(rng, M.REDUCED_ARCH, dtype=np.float64)
    eyes = rng.uniform(0, 1, (4, 3, 20, 26))
    pose = rng.uniform(-1, 1, (4, 3))
    g = rng.standard_normal((4, 2))
    _, trace = M.forward(net, eyes, pose)
    total = M.backward(net, trace, g)
    for name in M.PARAM_NAMES:
        ref = sum(M.backward(net, M.forward(net, eyes[i], pose[i])[1], g[i])[name]
                  for i in range(4))
        np.testing.assert_allclose(total[name], ref, rtol=1e-10, atol=1e-12)


def test_reduced_network_gradcheck(rng):
    res = G.check_network_reduced(rng)
    assert res.passed, res.line()
    assert res.n_checked > 0.9 * M.param_count(M.build(rng, M.REDUCED_ARCH))


def test_full_network_spot_check(rng):
    res = G.check_network_spot(rng, 200)
    assert res.passed, res.line()
    assert res.n_checked + res.n_skipped == 200


# -- checkpoints ----------------------------------------------------------------

def test_checkpoint_round_trip(net, tmp_path):
    path = tmp_path / "net.ckpt"
    M.save(net, path)
    assert M.load(path) == net


def test_checkpoint_bytes_deterministic(net):
    assert M.to_bytes(net) == M.to_bytes(net.copy())


def test_bad_magic(net):
    data = bytearray(M.to_bytes(net))
    data[:4] = b"XXXX"
    with pytest.raises(M.BadMagicError):
        M.from_bytes(bytes(data))


def test_version_mismatch(net):
    data = bytearray(M.to_bytes(net))
    data[4:8] = struct.pack("<I", 2)
    with pytest.raises(M.VersionMismatchError):
        M.from_bytes(bytes(data))


def test_checksum(net):
    data = bytearray(M.to_bytes(net))
    data[200] ^= 0xFF
    with pytest.raises(M.ChecksumError):
        M.from_bytes(bytes(data))


def test_truncated(net):
    with pytest.raises(M.TruncatedCheckpointError):
        M.from_bytes(M.to_bytes(net)[:5000])


def test_fc3_width_54_rejected(net):
    params = dict(net.params)
    params["fc3.weight"] = np.zeros((2, 54), np.float32)
    data = M.to_bytes(M.GazeNet(net.arch, params))  # valid CRC, wrong dims
    with pytest.raises(M.CheckpointShapeError, match="fc3.weight"):
        M.from_bytes(data)


def test_edited_dimension_field(net):
    data = bytearray(M.to_bytes(net))
    # first tensor: magic, version, count, u16 len, name, u8 rank, then dims
    off = 4 + 4 + 4 + 2 + len("conv1.weight") + 1
    assert struct.unpack_from("<I", data, off)[0] == 9
    struct.pack_into("<I", data, off, 10)
    data[-4:] = struct.pack("<I", zlib.crc32(bytes(data[:-4])))
    with pytest.raises(M.CheckpointShapeError):
        M.from_bytes(bytes(data))


def test_errors_share_a_base(net):
    for cls in (M.BadMagicError, M.VersionMismatchError, M.CheckpointShapeError,
                M.TruncatedCheckpointError, M.ChecksumError):
        assert issubclass(cls, M.CheckpointError)


def test_training_step_reduces_loss(rng):
    net = M.build(rng, M.REDUCED_ARCH, dtype=np.float64)
    eyes = rng.uniform(0, 1, (8, 3, 20, 26))
    pose = rng.uniform(-1, 1, (8, 3))
    target = rng.uniform(-10, 10, (8, 2))
    state = optim.AdamState.zeros_like(list(net.params.values()))
    losses = []
    for _ in range(150):
        pred, trace = M.forward(net, eyes, pose)
        loss, diff = optim.mse_loss(pred, target)
        losses.append(loss)
        optim.adam_step(net.params.values(), M.backward(net, trace, diff / len(eyes)).values(), state,
                        optim.AdamHyper(lr=1e-2))
    assert losses[-1] < 0.5 * losses[0]
