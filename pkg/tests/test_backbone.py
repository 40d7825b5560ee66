import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtk import tensor as tf
from dtk.backbone import (BackboneConfig, ParameterStore, attention, backbone_forward, backbone_param_specs,
                          decode_checkpoint, encode_checkpoint, load_checkpoint, load_into, save_checkpoint,
                          standard_block_forward)
from dtk.errors import ContractError, FormatError, ShapeError
from dtk.tensor import Tensor

CFG = BackboneConfig(L=2, M=1, D=8, n_heads=2, vocab_size=11, max_seq_len=6)


def make_store(cfg=CFG, seed=0, dtype=np.float64):
    return ParameterStore.from_specs(backbone_param_specs(cfg), np.random.default_rng(seed), dtype)


def test_config_validation():
    with pytest.raises(ContractError):
        BackboneConfig(L=2, M=3)
    with pytest.raises(ContractError):
        BackboneConfig(D=10, n_heads=4)
    assert list(BackboneConfig(L=12, M=4).fusion_layers) == [9, 10, 11, 12]


def test_specs_are_all_frozen_and_counted():
    specs = backbone_param_specs(CFG)
    assert all(s.frozen for s in specs)
    per_layer = 4 * (8 * 8 + 8) + 2 * 8 + (8 * 32 + 32) + (32 * 8 + 8) + 2 * 8
    assert sum(int(np.prod(s.shape)) for s in specs) == 11 * 8 + 6 * 8 + 2 * per_layer


def test_attention_matches_manual_softmax():
    rng = np.random.default_rng(1)
    Q, K, V = rng.normal(size=(3, 4)), rng.normal(size=(5, 4)), rng.normal(size=(5, 2))
    s = Q @ K.T / 2.0
    w = np.exp(s - s.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(attention(Tensor(Q), Tensor(K), Tensor(V)).data, w @ V, atol=1e-12)


def test_padding_mask_hides_padded_keys():
    store = make_store()
    rng = np.random.default_rng(2)
    H = rng.normal(size=(1, 5, 8))
    mask = np.array([[True, True, True, False, False]])
    out = standard_block_forward(store, CFG, Tensor(H), 1, mask).data
    H2 = H.copy()
    H2[0, 3:] = rng.normal(size=(2, 8)) * 10
    out2 = standard_block_forward(store, CFG, Tensor(H2), 1, mask).data
    np.testing.assert_allclose(out[0, :3], out2[0, :3], atol=1e-10)


def test_block_rejects_bad_width_and_layer():
    store = make_store()
    with pytest.raises(ShapeError):
        standard_block_forward(store, CFG, Tensor(np.zeros((3, 7))), 1)
    with pytest.raises(ContractError):
        standard_block_forward(store, CFG, Tensor(np.zeros((3, 8))), 3)


def test_batched_forward_equals_per_sample():
    store = make_store()
    H = np.random.default_rng(3).normal(size=(3, 4, 8))
    batched = backbone_forward(store, CFG, Tensor(H)).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], backbone_forward(store, CFG, Tensor(H[i])).data, atol=1e-10)


def test_frozen_backbone_receives_no_gradient():
    store = make_store()
    x = Tensor(np.random.default_rng(4).normal(size=(4, 8)), requires_grad=True)
    tf.backward(backbone_forward(store, CFG, x).sum())
    assert x.grad is not None
    assert all(t.grad is None for _, t in store.items())


# -- checkpoint format ----------------------------------------------------------------

def test_checkpoint_round_trip_is_bit_identical(tmp_path):
    store = make_store(dtype=np.float32)
    store.add("extra.trainable", np.arange(6, dtype=np.float32).reshape(2, 3), frozen=False)
    crc = save_checkpoint(store, tmp_path / "a.ckpt")
    loaded = load_checkpoint(tmp_path / "a.ckpt")
    assert loaded.names() == store.names()
    for name, t in store.items():
        assert loaded[name].data.tobytes() == t.data.tobytes()
        assert loaded.is_frozen(name) == store.is_frozen(name)
    assert crc == zlib.crc32((tmp_path / "a.ckpt").read_bytes()[8:-4])


def test_checkpoint_layout_header():
    blob = encode_checkpoint(make_store())
    assert blob[:4] == b"DTK1"
    assert struct.unpack("<I", blob[4:8]) == (1,)
    assert struct.unpack("<I", blob[8:12])[0] == len(make_store())


@pytest.mark.parametrize("corrupt, message", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + struct.pack("<I", 9) + b[8:], "version"),
    (lambda b: b[:-20] + b[-4:], "truncated|trailing|checksum"),
    (lambda b: b[:40] + bytes([b[40] ^ 0xFF]) + b[41:], "checksum|truncated|dtype|UTF-8|duplicate"),
])
def test_corrupted_checkpoints_raise_format_error(corrupt, message):
    blob = encode_checkpoint(make_store())
    with pytest.raises(FormatError, match=message):
        decode_checkpoint(corrupt(blob))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_any_single_byte_flip_is_detected(pos):
    blob = bytearray(encode_checkpoint(make_store(CFG, seed=5)))
    pos = pos % len(blob)
    blob[pos] ^= 0x01
    with pytest.raises(FormatError):
        decode_checkpoint(bytes(blob))


def test_load_into_checks_names_and_shapes(tmp_path):
    store = make_store()
    save_checkpoint(store, tmp_path / "b.ckpt")
    other = make_store(BackboneConfig(L=1, M=1, D=8, n_heads=2, vocab_size=11, max_seq_len=6))
    with pytest.raises(FormatError):
        load_into(other, tmp_path / "b.ckpt")
    fresh = make_store(seed=9)
    load_into(fresh, tmp_path / "b.ckpt")
    assert fresh.hashes() == store.hashes()


def test_store_rejects_duplicate_names():
    store = ParameterStore()
    store.add("w", np.zeros(2), frozen=True)
    with pytest.raises(ContractError):
        store.add("w", np.zeros(2), frozen=True)
