"""Binary checkpoint format.

Layout (little endian)::

    b"AFLOWCKP"                     magic
    u32                             format version
    u64 + UTF-8 JSON                header (network config, optimizer, RNG, iteration)
    per tensor:
        u32 + UTF-8                 name
        u32                         rank
        u64 * rank                  dims
        f32 * prod(dims)            data
    u32                             CRC32 of every preceding byte

Parameter tensors are named ``param/<layer>.<weight|bias>``, optimizer moments
``adam_m/...`` and ``adam_v/...``.
"""

from __future__ import annotations

import logging
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from .errors import CheckpointFormatError
from .layers import LayerParams, Tensor
from .network import NetworkConfig, NetworkParams, bias_size, layer_shapes
from .optim import AdamSettings, AdamState

logger = logging.getLogger(__name__)

MAGIC = b"AFLOWCKP"
FORMAT_VERSION = 1


class _AdamHeader(BaseModel):
    model_config = ConfigDict(extra="forbid")

    settings: AdamSettings
    step_size: int
    t: int


class CheckpointHeader(BaseModel):
    model_config = ConfigDict(extra="forbid")

    network: NetworkConfig
    training_mode: str | None = None
    iteration: int = 0
    adam: _AdamHeader | None = None
    rng_state: dict[str, Any] | None = None


@dataclass
class Checkpoint:
    params: NetworkParams
    adam: AdamState | None = None
    rng_state: dict[str, Any] | None = None
    iteration: int = 0
    training_mode: str | None = None
    version: int = FORMAT_VERSION

    @property
    def config(self) -> NetworkConfig:
        return self.params.config


def _tensor_record(name: str, tensor: Tensor) -> bytes:
    encoded = name.encode("utf-8")
    parts = [struct.pack("<I", len(encoded)), encoded, struct.pack("<I", tensor.ndim)]
    parts.append(struct.pack(f"<{tensor.ndim}Q", *tensor.shape))
    parts.append(np.ascontiguousarray(tensor, dtype="<f4").tobytes())
    return b"".join(parts)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    header = CheckpointHeader(
        network=ckpt.config,
        training_mode=ckpt.training_mode,
        iteration=ckpt.iteration,
        adam=(
            _AdamHeader(settings=ckpt.adam.settings, step_size=ckpt.adam.step_size, t=ckpt.adam.t)
            if ckpt.adam
            else None
        ),
        rng_state=ckpt.rng_state,
    )
    text = header.model_dump_json().encode("utf-8")
    parts = [MAGIC, struct.pack("<I", ckpt.version), struct.pack("<Q", len(text)), text]
    for name, tensor in ckpt.params.tensors():
        parts.append(_tensor_record(f"param/{name}", tensor))
    if ckpt.adam:
        for name, tensor in ckpt.adam.m.items():
            parts.append(_tensor_record(f"adam_m/{name}", tensor))
        for name, tensor in ckpt.adam.v.items():
            parts.append(_tensor_record(f"adam_v/{name}", tensor))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes, end: int):
        self.data = data
        self.pos = 0
        self.end = end

    def take(self, size: int) -> bytes:
        if self.pos + size > self.end:
            raise CheckpointFormatError("checkpoint is truncated")
        chunk = self.data[self.pos : self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + 4 + 8 + 4:
        raise CheckpointFormatError("checkpoint is truncated")
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic bytes)")
    (stored_crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != stored_crc:
        raise CheckpointFormatError("checkpoint checksum mismatch (corrupt or truncated file)")

    reader = _Reader(data, len(data) - 4)
    reader.take(len(MAGIC))
    (version,) = reader.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(
            f"unsupported checkpoint version {version}, expected {FORMAT_VERSION}"
        )
    (header_size,) = reader.unpack("<Q")
    try:
        header = CheckpointHeader.model_validate_json(reader.take(header_size))
    except ValidationError as exc:
        raise CheckpointFormatError(f"invalid checkpoint header: {exc}") from exc

    tensors: dict[str, Tensor] = {}
    while reader.pos < reader.end:
        (name_size,) = reader.unpack("<I")
        name = reader.take(name_size).decode("utf-8")
        (rank,) = reader.unpack("<I")
        dims = reader.unpack(f"<{rank}Q")
        count = int(np.prod(dims, dtype=np.int64))
        raw = np.frombuffer(reader.take(4 * count), dtype="<f4")
        tensors[name] = raw.astype(np.float64).reshape(dims)

    layers: dict[str, LayerParams] = {}
    for layer_name, shape, _ in layer_shapes(header.network):
        try:
            weight = tensors[f"param/{layer_name}.weight"]
            bias = tensors[f"param/{layer_name}.bias"]
        except KeyError as exc:
            raise CheckpointFormatError(f"checkpoint lacks tensor {exc.args[0]}") from exc
        if weight.shape != shape:
            raise CheckpointFormatError(f"{layer_name}: stored weight shape {weight.shape} != {shape}")
        expected_bias = (bias_size(layer_name, shape),)
        if bias.shape != expected_bias:
            raise CheckpointFormatError(f"{layer_name}: stored bias shape {bias.shape} != {expected_bias}")
        layers[layer_name] = LayerParams(layer_name, weight, bias)
    params = NetworkParams(header.network, layers)

    adam = None
    if header.adam is not None:
        names = [name for name, _ in params.tensors()]
        try:
            m = {name: tensors[f"adam_m/{name}"] for name in names}
            v = {name: tensors[f"adam_v/{name}"] for name in names}
        except KeyError as exc:
            raise CheckpointFormatError(f"checkpoint lacks tensor {exc.args[0]}") from exc
        for name, tensor in params.tensors():
            if m[name].shape != tensor.shape or v[name].shape != tensor.shape:
                raise CheckpointFormatError(f"{name}: optimizer moments do not match the parameter shape")
        adam = AdamState(header.adam.settings, header.adam.step_size, m, v, header.adam.t)

    return Checkpoint(
        params=params,
        adam=adam,
        rng_state=header.rng_state,
        iteration=header.iteration,
        training_mode=header.training_mode,
        version=version,
    )


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp_name, path)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    atomic_write_bytes(Path(path), encode_checkpoint(ckpt))
    logger.info("wrote checkpoint %s (iteration %d)", path, ckpt.iteration)


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
