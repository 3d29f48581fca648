import struct
import sys
import zlib
from pathlib import Path

import numpy as np
import pytest

# Ensure project root on path
sys.path.append(str(Path(__file__).resolve().parents[1]))

from viewflow.checkpoint import (
    FORMAT_VERSION,
    MAGIC,
    Checkpoint,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from viewflow.config import RunConfig
from viewflow.errors import CheckpointFormatError
from viewflow.layers import LayerParams
from viewflow.network import NetworkConfig, build_network
from viewflow.trainer import initial_checkpoint


def _checkpoint():
    ckpt = initial_checkpoint(RunConfig(seed=7, network=NetworkConfig.tiny()))
    rng = np.random.default_rng(0)
    # moments on the float32 grid, as the optimizer keeps them
    for store in (ckpt.adam.m, ckpt.adam.v):
        for tensor in store.values():
            tensor[...] = rng.uniform(size=tensor.shape).astype(np.float32)
    ckpt.adam.t = 42
    ckpt.iteration = 42
    return ckpt


def test_save_load_round_trip(tmp_path):
    ckpt = _checkpoint()
    path = tmp_path / "run" / "checkpoint.ckpt"
    save_checkpoint(ckpt, path)
    loaded = load_checkpoint(path)

    assert loaded.config == ckpt.config
    assert loaded.iteration == 42 and loaded.adam.t == 42
    assert loaded.training_mode == "single-flow"
    assert loaded.rng_state == ckpt.rng_state
    assert loaded.adam.settings == ckpt.adam.settings
    assert loaded.adam.step_size == ckpt.adam.step_size
    for (name, a), (_, b) in zip(ckpt.params.tensors(), loaded.params.tensors()):
        assert np.array_equal(a, b), name
    for name in ckpt.adam.m:
        assert np.array_equal(ckpt.adam.m[name], loaded.adam.m[name]), name
        assert np.array_equal(ckpt.adam.v[name], loaded.adam.v[name]), name
    assert encode_checkpoint(loaded) == path.read_bytes()
    assert [p.name for p in path.parent.iterdir()] == ["checkpoint.ckpt"]


def test_parameters_only_checkpoint():
    params = build_network(NetworkConfig.tiny(), seed=1)
    loaded = decode_checkpoint(encode_checkpoint(Checkpoint(params)))
    assert loaded.adam is None and loaded.rng_state is None
    for (name, a), (_, b) in zip(params.tensors(), loaded.params.tensors()):
        assert np.array_equal(a, b), name


def test_file_starts_with_magic_and_version():
    data = encode_checkpoint(_checkpoint())
    assert data.startswith(MAGIC)
    assert struct.unpack("<I", data[len(MAGIC) : len(MAGIC) + 4]) == (FORMAT_VERSION,)


def test_bad_magic():
    data = bytearray(encode_checkpoint(_checkpoint()))
    data[0:8] = b"NOTACKPT"
    with pytest.raises(CheckpointFormatError, match="magic"):
        decode_checkpoint(bytes(data))


def test_corrupted_byte_fails_the_checksum():
    data = bytearray(encode_checkpoint(_checkpoint()))
    data[len(data) // 2] ^= 0xFF
    with pytest.raises(CheckpointFormatError, match="checksum"):
        decode_checkpoint(bytes(data))


@pytest.mark.parametrize("keep", [0, 10, 100, 0.5])
def test_truncated_file(keep):
    data = encode_checkpoint(_checkpoint())
    size = int(len(data) * keep) if isinstance(keep, float) else keep
    with pytest.raises(CheckpointFormatError):
        decode_checkpoint(data[:size])


def test_unknown_version_is_rejected():
    data = bytearray(encode_checkpoint(_checkpoint()))
    data[len(MAGIC) : len(MAGIC) + 4] = struct.pack("<I", FORMAT_VERSION + 1)
    body = bytes(data[:-4])
    with pytest.raises(CheckpointFormatError, match="version"):
        decode_checkpoint(body + struct.pack("<I", zlib.crc32(body)))


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "absent.ckpt")


@pytest.mark.parametrize("layer", ["enc_conv1", "enc_fc2", "dec_upconv1"])
def test_wrong_bias_length_is_rejected(layer):
    params = build_network(NetworkConfig.tiny(), seed=1)
    original = params.layers[layer]
    params.layers[layer] = LayerParams(layer, original.weight, np.zeros(original.bias.size + 1))
    with pytest.raises(CheckpointFormatError, match="bias"):
        decode_checkpoint(encode_checkpoint(Checkpoint(params)))


def test_upconv_bias_follows_the_output_channels():
    params = build_network(NetworkConfig.tiny(), seed=1)
    upconv = params.layers["dec_upconv2"]
    assert upconv.bias.shape == (upconv.weight.shape[1],)
    assert upconv.weight.shape[0] != upconv.weight.shape[1]


def test_wrong_moment_shape_is_rejected():
    ckpt = _checkpoint()
    ckpt.adam.v["enc_fc1.bias"] = np.zeros(3)
    with pytest.raises(CheckpointFormatError, match="moments"):
        decode_checkpoint(encode_checkpoint(ckpt))
