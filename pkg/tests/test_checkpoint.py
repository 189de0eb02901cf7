import dataclasses
import struct

import numpy as np
import pytest

from modellab import checkpoint, mllm
from modellab.checkpoint import CheckpointVersionError
from modellab.masking import MaskPolicy
from modellab.tensor import NonFiniteError


@pytest.fixture
def model(tiny_config):
    cfg = dataclasses.replace(
        tiny_config, separate_visual_qkv=True,
        policy=MaskPolicy.VISUAL_BIDIRECTIONAL)
    built = mllm.init_model(cfg, 11)
    # move off the init values so a reload cannot pass by re-initialising
    for value in built.named().values():
        value.data = value.data + 0.125
    return built


def test_save_load__bit_identical(tmp_path, model):
    path = tmp_path / "model.ckpt"
    meta = {"seed": 4, "stage": "finetune", "variant": "llavit"}

    checkpoint.save(path, model, meta)
    loaded, loaded_meta = checkpoint.load(path)

    assert loaded.cfg == model.cfg
    assert loaded_meta == meta
    original = model.named()
    for name, tensor in loaded.named().items():
        assert tensor.data.tobytes() == original[name].data.tobytes(), name
    assert checkpoint.encode(loaded, meta) == path.read_bytes()


def test_encode__deterministic(model):
    assert checkpoint.encode(model, {"a": 1}) == \
        checkpoint.encode(model, {"a": 1})


def test_encode__header(model):
    payload = checkpoint.encode(model)

    assert payload[:4] == b"MLAB"
    assert struct.unpack("<I", payload[4:8])[0] == checkpoint.VERSION


def test_decode__version_mismatch(model):
    payload = bytearray(checkpoint.encode(model))
    payload[4:8] = struct.pack("<I", 7)

    with pytest.raises(CheckpointVersionError) as err:
        checkpoint.decode(bytes(payload))

    assert str(err.value) == \
        "Unsupported checkpoint version: expected 1, found 7"
    assert err.value.found == 7


def test_decode__bad_magic(model):
    payload = b"NOPE" + checkpoint.encode(model)[4:]

    with pytest.raises(ValueError) as err:
        checkpoint.decode(payload)

    assert "Not a modellab checkpoint" in str(err.value)


def test_decode__truncated(model):
    payload = checkpoint.encode(model)

    with pytest.raises(ValueError) as err:
        checkpoint.decode(payload[:-3])

    assert "Truncated checkpoint" in str(err.value)


def test_decode__trailing_bytes(model):
    payload = checkpoint.encode(model) + b"\x00\x00"

    with pytest.raises(ValueError) as err:
        checkpoint.decode(payload)

    assert str(err.value) == "Trailing bytes after checkpoint records: 2"


def test_load__rejects_non_finite_payload(tmp_path, model):
    path = tmp_path / "model.ckpt"
    payload = bytearray(checkpoint.encode(model))
    # last float of the last record
    payload[-4:] = struct.pack("<f", np.nan)
    path.write_bytes(bytes(payload))

    with pytest.raises(NonFiniteError):
        checkpoint.load(path)


def test_load__records_must_match_config(tmp_path, model):
    path = tmp_path / "model.ckpt"
    blob, _ = checkpoint.decode(checkpoint.encode(model))
    # same tensors, but a config without the visual projections
    model.cfg = dataclasses.replace(
        model.cfg, separate_visual_qkv=False)
    path.write_bytes(checkpoint.encode(model, blob["meta"]))

    with pytest.raises(ValueError) as err:
        checkpoint.load(path)

    assert "unexpected: ['layers.0.attn.b_k_vis'" in str(err.value)
