import struct
import zlib

import numpy as np
import pytest

from dermhybrid.checkpoint import (
    MAGIC,
    Checkpoint,
    decode,
    encode,
    load_checkpoint,
    load_into,
    make_checkpoint,
    restore_model,
    restore_optimizer,
    save_checkpoint,
)
from dermhybrid.errors import BadMagicError, CrcMismatchError, ShapeMismatchError, VersionMismatchError
from dermhybrid.models import ModelConfig, build_model
from dermhybrid.tensor import backward
from dermhybrid.training import OptimizerState, adam_step, weighted_bce_logits

CFG = ModelConfig(kind="parallel", image_size=32, backbone_channels=[4, 8], d_model=8, n_heads=2, n_layers=1,
                  ffn_dim=16, patch_size=8, fusion_hidden=8, fusion_out=4, init_seed=3)


def trained_pair():
    model = build_model(CFG)
    names = [n for n, _ in model.named_parameters()]
    params = model.parameters()
    x = np.random.default_rng(0).normal(size=(2, 3, 32, 32)).astype(np.float32)
    state = OptimizerState(lr=1e-3)
    loss = weighted_bce_logits(model(x, mode="train"), np.array([[1.0], [0.0]]))
    adam_step(params, backward(loss, params), state, names)
    return model, state, x


def test_layout_header():
    ckpt = Checkpoint(config={"a": 1}, tensors={"t": np.arange(6, dtype=np.float32).reshape(2, 3)})
    raw = encode(ckpt)
    assert raw[:4] == MAGIC
    assert struct.unpack_from("<I", raw, 4)[0] == 1
    (clen,) = struct.unpack_from("<I", raw, 8)
    assert raw[12 : 12 + clen] == b'{"a":1}'
    assert struct.unpack("<I", raw[-4:])[0] == zlib.crc32(raw[:-4])


def test_round_trip_predictions_bitwise(tmp_path):
    model, state, x = trained_pair()
    before = model(x).data
    save_checkpoint(make_checkpoint(model, state, epoch=4, best_val_f1=0.75), tmp_path / "m.ckpt")
    ckpt = load_checkpoint(tmp_path / "m.ckpt")
    assert ckpt.epoch == 4 and ckpt.best_val_f1 == 0.75
    assert restore_model(ckpt)(x).data.tobytes() == before.tobytes()


def test_save_load_save_is_byte_identical(tmp_path):
    model, state, _ = trained_pair()
    first = encode(make_checkpoint(model, state))
    assert encode(decode(first)) == first


def test_optimizer_restored(tmp_path):
    model, state, _ = trained_pair()
    ckpt = decode(encode(make_checkpoint(model, state)))
    restored = restore_optimizer(ckpt, model)
    assert restored.step == state.step and restored.lr == state.lr
    for a, b in zip(restored.m, state.m):
        np.testing.assert_array_equal(a, b)


def test_psi_tensors_present():
    model, state, _ = trained_pair()
    ckpt = make_checkpoint(model, state)
    assert any(name.startswith("model.fusion.") for name in ckpt.tensors)


@pytest.mark.parametrize("offset", [20, 200, -10])
def test_single_byte_corruption_detected(offset):
    model, state, _ = trained_pair()
    raw = bytearray(encode(make_checkpoint(model, state)))
    raw[offset] ^= 0x01
    with pytest.raises(CrcMismatchError):
        decode(bytes(raw))


def test_bad_magic_and_version():
    raw = encode(Checkpoint(config={}, tensors={}))
    with pytest.raises(BadMagicError):
        decode(b"XXXX" + raw[4:])
    body = raw[:4] + struct.pack("<I", 2) + raw[8:-4]
    with pytest.raises(VersionMismatchError):
        decode(body + struct.pack("<I", zlib.crc32(body)))


def test_shape_mismatch_names_tensor():
    model, state, _ = trained_pair()
    ckpt = make_checkpoint(model, state)
    other = build_model(ModelConfig(**{**CFG.to_dict(), "fusion_out": 5}))
    with pytest.raises(ShapeMismatchError, match="fusion"):
        load_into(other, ckpt.model_tensors())


def test_tensor_values_are_float32():
    ckpt = decode(encode(Checkpoint(config={}, tensors={"x": np.array([1.5, -2.0])})))
    assert ckpt.tensors["x"].dtype == np.float32
    np.testing.assert_array_equal(ckpt.tensors["x"], [1.5, -2.0])
