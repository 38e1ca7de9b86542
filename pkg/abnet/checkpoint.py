"""
Binary checkpoints for abnet parameter stores.

Layout (all integers unsigned 32-bit little-endian):

    magic "ABNET1\\0" | version | config length | config TOML (UTF-8)
    tensor count
    per tensor: name length | name (UTF-8) | partition byte (0 frozen,
    1 trainable) | rank | extents | float32 little-endian values

A file holds either a full assembly or a single pre-trained backbone.
"""

import logging
import math
import os
import struct
from typing import Dict, Tuple

import numpy as np
import toml
import torch

from abnet.errors import (
    CheckpointLayoutError,
    CheckpointMagicError,
    CheckpointTruncatedError,
    ConfigurationError,
)
from abnet.model import (
    SIDES,
    ModelConfig,
    ParameterStore,
    Partition,
    backbone_shapes,
    parameter_shapes,
)

logger = logging.getLogger(__name__)

MAGIC = b"ABNET1\x00"
FORMAT_VERSION = 1
MAX_RANK = 8
_U32 = struct.Struct("<I")
_PARTITION_BYTES = {Partition.FROZEN: 0, Partition.TRAINABLE: 1}
_BYTE_PARTITIONS = {v: k for k, v in _PARTITION_BYTES.items()}


def _u32(value: int) -> bytes:
    return _U32.pack(value)


def config_text(config: ModelConfig) -> str:
    return toml.dumps(config.to_dict())


def encode_checkpoint(params: ParameterStore, config: ModelConfig) -> bytes:
    text = config_text(config).encode("utf-8")
    chunks = [MAGIC, _u32(FORMAT_VERSION), _u32(len(text)), text, _u32(len(params))]
    for name, tensor in params.items():
        encoded = name.encode("utf-8")
        chunks.append(_u32(len(encoded)))
        chunks.append(encoded)
        chunks.append(bytes([_PARTITION_BYTES[params.partition_of(name)]]))
        chunks.append(_u32(tensor.dim()))
        chunks.extend(_u32(extent) for extent in tensor.shape)
        chunks.append(tensor.detach().cpu().numpy().astype("<f4").tobytes())
    return b"".join(chunks)


def save_checkpoint(params: ParameterStore, config: ModelConfig, path: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    data = encode_checkpoint(params, config)
    with open(path, "wb") as f:
        f.write(data)
    logger.debug(f"Saved checkpoint {path}: {len(params)} tensors, {len(data)} bytes")


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.path = path
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        end = self.offset + n
        if end > len(self.data):
            raise CheckpointTruncatedError(
                f"{self.path}: truncated while reading {what} at byte {self.offset}"
            )
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]

    def text(self, n: int, what: str) -> str:
        raw = self.take(n, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointLayoutError(f"{self.path}: {what} is not valid UTF-8") from None


def _expected_layouts(config: ModelConfig) -> Dict[str, Dict[str, Tuple[int, ...]]]:
    layouts = {}
    for kind in ("assembly",) + tuple(SIDES):
        try:
            if kind == "assembly":
                layouts[kind] = parameter_shapes(config)
            else:
                layouts[kind] = backbone_shapes(config, kind)
        except ConfigurationError:
            pass
    return layouts


def decode_checkpoint(data: bytes, path: str = "<bytes>") -> Tuple[ParameterStore, ModelConfig]:
    reader = _Reader(data, path)
    if reader.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointMagicError(f"{path}: not an abnet checkpoint (bad magic)")
    version = reader.u32("format version")
    if version != FORMAT_VERSION:
        raise CheckpointLayoutError(f"{path}: unsupported format version {version}")
    text = reader.text(reader.u32("config length"), "config text")
    try:
        config = ModelConfig.from_dict(toml.loads(text))
    except (ValueError, ConfigurationError, TypeError, IndexError, KeyError) as e:
        raise CheckpointLayoutError(f"{path}: bad config header: {e}") from None

    params = ParameterStore()
    count = reader.u32("tensor count")
    for index in range(count):
        name = reader.text(reader.u32(f"name length of tensor {index}"), f"name of tensor {index}")
        flag = reader.take(1, f"partition of {name}")[0]
        if flag not in _BYTE_PARTITIONS:
            raise CheckpointLayoutError(f"{path}: tensor {name} has partition byte {flag}")
        rank = reader.u32(f"rank of {name}")
        if rank > MAX_RANK:
            raise CheckpointLayoutError(f"{path}: tensor {name} has rank {rank}")
        shape = tuple(reader.u32(f"extent of {name}") for _ in range(rank))
        size = 4 * math.prod(shape)
        if size > len(reader.data) - reader.offset:
            raise CheckpointTruncatedError(
                f"{path}: values of {name} need {size} bytes, "
                f"{len(reader.data) - reader.offset} remain"
            )
        values = np.frombuffer(reader.take(size, f"values of {name}"), dtype="<f4").reshape(shape)
        if name in params:
            raise CheckpointLayoutError(f"{path}: duplicate tensor {name}")
        tensor = torch.from_numpy(values.copy()).to(config.torch_dtype)
        params.add(name, tensor, _BYTE_PARTITIONS[flag])
    if reader.offset != len(data):
        raise CheckpointLayoutError(
            f"{path}: {len(data) - reader.offset} trailing bytes after the last tensor"
        )

    found = {name: tuple(t.shape) for name, t in params.items()}
    layouts = _expected_layouts(config)
    if found not in layouts.values():
        expected = layouts.get("assembly", {})
        for name, shape in found.items():
            if name in expected and expected[name] != shape:
                raise CheckpointLayoutError(
                    f"{path}: tensor {name} has extents {shape}, config implies {expected[name]}"
                )
        raise CheckpointLayoutError(
            f"{path}: tensor set matches neither the assembly nor a backbone of its config"
        )
    return params, config


def load_checkpoint(path: str) -> Tuple[ParameterStore, ModelConfig]:
    """
    Read a checkpoint written by save_checkpoint.

    Raises:
        FileNotFoundError: no such file.
        CheckpointMagicError: the file does not start with the magic bytes.
        CheckpointTruncatedError: the file ends inside a field.
        CheckpointLayoutError: extents, names, partition bytes or trailing
            data disagree with the header.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    with open(path, "rb") as f:
        data = f.read()
    return decode_checkpoint(data, path)
