import json
import struct

import numpy as np
import pytest

from transplant_rl import nn, surgery
from transplant_rl.surgery import (
    MAGIC,
    ArchitectureMismatchError,
    Checkpoint,
    CheckpointFormatError,
    CheckpointVersionError,
    ChecksumMismatchError,
    TransplantSpec,
    fnv1a64,
    layer_equality,
    transplant,
    verify_transplant,
)

from .fixtures import child_agent, parent_checkpoint, train_steps

LAYERS = ["layer1", "layer2", "layer3", "layer4", "layer5"]


def _bits(a):
    return np.asarray(a, dtype="<f4").view(np.uint32)


def _child_tensors(child):
    return {k: surgery.to_f32(v) for k, v in child.parameters().items()}


def test_fnv1a64_reference_vectors():
    # published FNV-1a 64 test vectors
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a64(b"foobar") == 0x85944171F73967E8


def test_tensor_names_follow_layer_stream_param():
    ckpt = parent_checkpoint()
    names = sorted(ckpt.tensors)
    assert "layer1/trunk/weight" in names
    assert "layer4/value/mu_w" in names and "layer4/advantage/sigma_b" in names
    assert all(n.split("/")[0] in LAYERS for n in names)


def test_round_trip_is_bitwise(tmp_path):
    net = nn.rainbow_network(5, 21)
    net.init_params(3)
    saved = surgery.save(net, tmp_path / "a.rtl", env="corridor", training_steps=10, seed=3)
    loaded = surgery.load(tmp_path / "a.rtl", expected_hash=net.architecture_hash)
    assert set(loaded.tensors) == set(saved.tensors)
    for name, arr in saved.tensors.items():
        assert np.array_equal(_bits(arr), _bits(loaded.tensors[name]))
        assert np.array_equal(_bits(net.parameters()[name]), _bits(loaded.tensors[name]))
    for key in ("env", "training_steps", "seed", "created", "architecture_hash", "format_version"):
        assert key in loaded.metadata
    assert loaded.metadata["env"] == "corridor" and loaded.metadata["training_steps"] == 10
    # rebuilt network reproduces the same f32 tensors
    rebuilt = loaded.network()
    assert all(np.array_equal(_bits(v), _bits(loaded.tensors[k])) for k, v in rebuilt.parameters().items())


def test_layout_bytes(tmp_path):
    ckpt = parent_checkpoint()
    data = surgery.encode(ckpt)
    assert data[:4] == MAGIC
    (meta_len,) = struct.unpack_from("<I", data, 4)
    meta = json.loads(data[8:8 + meta_len])
    assert meta["n_tensors"] == len(ckpt.tensors)
    pos = 8 + meta_len
    names = []
    while pos < len(data) - 8:
        (n,) = struct.unpack_from("<H", data, pos)
        name = data[pos + 2:pos + 2 + n].decode()
        pos += 2 + n
        ndim = data[pos]
        dims = struct.unpack_from(f"<{ndim}I", data, pos + 1)
        pos += 1 + 4 * ndim
        count = int(np.prod(dims))
        payload = np.frombuffer(data, "<f4", count, pos)
        assert np.array_equal(payload.view(np.uint32), _bits(ckpt.tensors[name]).ravel())
        assert dims == ckpt.tensors[name].shape
        pos += 4 * count
        names.append(name)
    assert pos == len(data) - 8
    assert names == sorted(names) == sorted(ckpt.tensors)
    assert struct.unpack("<Q", data[-8:])[0] == fnv1a64(data[:-8])


@pytest.mark.parametrize("cut", [3, 10, 200, -9, -1])
def test_truncated_file_is_format_error(tmp_path, cut):
    data = surgery.encode(parent_checkpoint())
    with pytest.raises(CheckpointFormatError):
        surgery.decode(data[:cut])


def test_bad_magic():
    data = bytearray(surgery.encode(parent_checkpoint()))
    data[:4] = b"XXXX"
    with pytest.raises(CheckpointFormatError, match="magic"):
        surgery.decode(bytes(data))


def test_newer_version_rejected():
    ckpt = parent_checkpoint()
    ckpt = Checkpoint(dict(ckpt.metadata, format_version=99), ckpt.tensors)
    with pytest.raises(CheckpointVersionError, match="99"):
        surgery.decode(surgery.encode(ckpt))


def test_flipped_payload_byte_is_checksum_error():
    data = bytearray(surgery.encode(parent_checkpoint()))
    data[-20] ^= 0x01
    with pytest.raises(ChecksumMismatchError):
        surgery.decode(bytes(data))


def test_hash_mismatch_names_both_hashes(tmp_path):
    ckpt = parent_checkpoint()
    surgery.save(ckpt, tmp_path / "p.rtl")
    wrong = "0123456789abcdef"
    with pytest.raises(ArchitectureMismatchError) as info:
        surgery.load(tmp_path / "p.rtl", expected_hash=wrong)
    assert wrong in str(info.value) and ckpt.architecture_hash in str(info.value)


def test_errors_are_distinct_types():
    kinds = {CheckpointFormatError, CheckpointVersionError, ChecksumMismatchError, ArchitectureMismatchError}
    assert len(kinds) == 4
    assert all(issubclass(k, surgery.CheckpointError) for k in kinds)
    assert not any(issubclass(a, b) for a in kinds for b in kinds if a is not b)


def test_save_leaves_no_temp_files(tmp_path):
    surgery.save(parent_checkpoint(), tmp_path / "x.rtl")
    assert [p.name for p in tmp_path.iterdir()] == ["x.rtl"]


# -- transplant ----------------------------------------------------------------


def test_identity_transplant_equals_parent():
    parent = parent_checkpoint(1)
    child, mask = transplant(parent, TransplantSpec(5, "finetune", 99))
    assert mask == frozenset()
    tensors = _child_tensors(child)
    assert all(np.array_equal(_bits(tensors[k]), _bits(v)) for k, v in parent.tensors.items())
    assert verify_transplant(parent, child, 5).passed


@pytest.mark.parametrize("mode", ["freeze", "finetune"])
def test_full_reinit(mode):
    parent = parent_checkpoint(1)
    child, mask = transplant(parent, TransplantSpec(0, mode, 7))
    assert mask == frozenset()
    tensors = _child_tensors(child)
    for name, arr in parent.tensors.items():
        if name.endswith("bias") or name.endswith("sigma_w") or name.endswith("sigma_b"):
            continue  # zero or constant-valued inits coincide by construction
        assert not np.array_equal(_bits(arr), _bits(tensors[name]))


def test_k4_freeze_copies_both_stream_hidden_layers():
    parent = parent_checkpoint(1)
    child, mask = transplant(parent, TransplantSpec(4, "freeze", 7))
    assert mask == frozenset(LAYERS[:4])
    tensors = _child_tensors(child)
    same = {k for k, v in parent.tensors.items() if np.array_equal(_bits(v), _bits(tensors[k]))}
    for k in parent.tensors:
        if k.split("/")[0] in LAYERS[:4]:
            assert k in same
    assert {"layer4/value/mu_w", "layer4/advantage/mu_w"} <= same
    assert "layer5/value/mu_w" not in same and "layer5/advantage/mu_w" not in same


def test_k2_copies_convs_only():
    parent = parent_checkpoint(1)
    child, _ = transplant(parent, TransplantSpec(2, "finetune", 7))
    eq = layer_equality(parent, child)
    assert eq == {"layer1": True, "layer2": True, "layer3": False, "layer4": False, "layer5": False}


def test_reinit_uses_seed_and_fresh_init_distribution():
    parent = parent_checkpoint(1)
    a, _ = transplant(parent, TransplantSpec(2, "finetune", 5))
    b, _ = transplant(parent, TransplantSpec(2, "finetune", 5))
    fresh = nn.rainbow_network(5, 21)
    fresh.init_params(5)
    for k, v in a.parameters().items():
        assert np.array_equal(v, b.parameters()[k])
        if k.split("/")[0] not in ("layer1", "layer2"):
            assert np.array_equal(v, fresh.parameters()[k])


def test_k_beyond_depth_fails():
    with pytest.raises(ValueError, match="k=6"):
        transplant(parent_checkpoint(), TransplantSpec(6, "freeze"))
    with pytest.raises(ValueError):
        TransplantSpec(-1)
    with pytest.raises(ValueError):
        TransplantSpec(2, "melt")


def test_verify_examples():
    parent = parent_checkpoint(1)
    assert verify_transplant(parent, parent, 5).passed
    fresh = nn.rainbow_network(5, 21)
    fresh.init_params(2)
    report = verify_transplant(parent, fresh, 2)
    assert not report.passed and report.layers["layer1"] is False
    child, _ = transplant(parent, TransplantSpec(2, "freeze", 3))
    assert verify_transplant(parent, child, 2).passed
    assert verify_transplant(parent, child, 2).to_dict()["layers"]["layer2"] is True
    assert not verify_transplant(parent, child, 3).passed


def test_verify_architecture_mismatch():
    other = nn.rainbow_network(5, 21, hidden=64)
    other.init_params(0)
    with pytest.raises(ArchitectureMismatchError):
        verify_transplant(parent_checkpoint(), other, 2)


@pytest.mark.parametrize("k", [2, 4])
def test_freeze_persists_and_finetune_moves(k):
    parent = parent_checkpoint(4)
    frozen = train_steps(child_agent(parent, k, "freeze", seed=1), 40)
    eq = layer_equality(parent, frozen.online)
    assert all(eq[n] for n in LAYERS[:k])
    assert not any(eq[n] for n in LAYERS[k:])
    tuned = train_steps(child_agent(parent, k, "finetune", seed=1), 40)
    eq = layer_equality(parent, tuned.online)
    assert not all(eq[n] for n in LAYERS[:k])


def test_loaded_checkpoint_keeps_stream_order(tmp_path):
    net = nn.rainbow_network(5, 21)
    net.init_params(8)
    surgery.save(net, tmp_path / "s.rtl")
    rebuilt = surgery.load(tmp_path / "s.rtl").network()
    assert list(rebuilt.streams) == list(net.streams) == ["value", "advantage"]
    x = np.random.default_rng(0).random((2, 10, 10, 4))
    np.testing.assert_allclose(rebuilt.forward(x)[0], net.forward(x)[0], rtol=1e-6, atol=1e-6)
